//! File helpers shared by the dataset, checkpoint and report writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Result, TideError};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| TideError::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| TideError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| TideError::io(&tmp, e))?;
        f.sync_all().map_err(|e| TideError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| TideError::io(path, e))
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

pub fn encode_png_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, rgb, image::ColorType::Rgb8)
}

pub fn encode_png_gray(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, gray, image::ColorType::L8)
}

fn encode_png(width: usize, height: usize, bytes: &[u8], color: image::ColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        bytes,
        width as u32,
        height as u32,
        color,
    )?;
    Ok(out)
}

/// Decode a PNG into `(width, height, rgb8)`.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Decode a PNG into `(width, height, gray8)`.
pub fn decode_png_gray(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TideError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn png_roundtrip() {
        let rgb: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let png = encode_png_rgb(4, 3, &rgb).unwrap();
        assert_eq!(decode_png_rgb(&png).unwrap(), (4, 3, rgb));
        let gray = vec![0u8, 255, 255, 0];
        let png = encode_png_gray(2, 2, &gray).unwrap();
        assert_eq!(decode_png_gray(&png).unwrap(), (2, 2, gray));
    }
}
