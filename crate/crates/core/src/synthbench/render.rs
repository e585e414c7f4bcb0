use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BenchmarkConfig, RgbImage, Shape, Style};
use crate::error::{Result, TideError};
use crate::primitives::{ClassId, ConceptId, ConceptMask, Map2};

const SUPERSAMPLE: usize = 4;
const STRIPE_BANDS: f64 = 4.0;

/// A concept primitive placed on the canvas, in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub concept: ConceptId,
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    /// Half-extent of the primitive's bounding box.
    pub r: f64,
}

/// Style-independent geometry of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub class_id: ClassId,
    pub placements: Vec<Placement>,
}

/// Half-extent giving a primitive the requested area in pixels.
pub(crate) fn half_extent(shape: Shape, area: f64) -> f64 {
    use std::f64::consts::PI;
    match shape {
        Shape::Disk => (area / PI).sqrt(),
        Shape::Square | Shape::HStripes | Shape::VStripes => area.sqrt() / 2.0,
        Shape::Triangle | Shape::Diamond => (area / 2.0).sqrt(),
        Shape::Cross => (area / 3.0).sqrt(),
        Shape::Ring => (area / (0.75 * PI)).sqrt(),
    }
}

/// Band index (0 or 1) when `(u, v)` lies inside the primitive centered at the origin.
fn band_at(shape: Shape, r: f64, u: f64, v: f64) -> Option<u8> {
    let inside = match shape {
        Shape::Disk => u * u + v * v <= r * r,
        Shape::Square | Shape::HStripes | Shape::VStripes => u.abs() <= r && v.abs() <= r,
        Shape::Triangle => v >= -r && v <= r && u.abs() <= (v + r) / 2.0,
        Shape::Diamond => u.abs() + v.abs() <= r,
        Shape::Cross => {
            let a = r / 2.0;
            (u.abs() <= r && v.abs() <= a) || (v.abs() <= r && u.abs() <= a)
        }
        Shape::Ring => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= 0.25 * r * r
        }
    };
    if !inside {
        return None;
    }
    let band = |t: f64| (((t + r) / (2.0 * r / STRIPE_BANDS)).floor() as i64).rem_euclid(2) as u8;
    Some(match shape {
        Shape::HStripes => band(v),
        Shape::VStripes => band(u),
        _ => 0,
    })
}

impl Placement {
    /// Fraction of pixel `(x, y)` covered by the primitive.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let mut hit = 0usize;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                if band_at(self.shape, self.r, px - self.cx, py - self.cy).is_some() {
                    hit += 1;
                }
            }
        }
        hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    /// Pixel-level membership: covered at least half.
    fn pixel_band(&self, x: usize, y: usize) -> Option<u8> {
        if (x as f64 + 0.5 - self.cx).abs() > self.r + 1.0 || (y as f64 + 0.5 - self.cy).abs() > self.r + 1.0 {
            return None;
        }
        if self.coverage(x, y) < 0.5 {
            return None;
        }
        let (u, v) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        Some(band_at(self.shape, self.r, u, v).unwrap_or(0))
    }

    fn pixel_mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.pixel_band(x, y).is_some();
            }
        }
        m
    }
}

/// Jitter redraws before a layout is declared infeasible.
const LAYOUT_ATTEMPTS: usize = 64;

/// Jittered geometry for one sample of `class`.
pub fn sample_layout(config: &BenchmarkConfig, class: ClassId, seed: u64) -> Result<Layout> {
    let spec = config
        .classes
        .get(class.0)
        .ok_or_else(|| TideError::InvalidInput(format!("unknown class {}", class.0)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size as f64;
    let n = config.image_size;
    let mut last = String::new();
    for _ in 0..LAYOUT_ATTEMPTS {
        let mut placements = Vec::with_capacity(spec.concepts.len());
        for &k in &spec.concepts {
            let c = &config.concepts[k.0];
            let (jx, jy) = if config.jitter > 0.0 {
                (
                    rng.gen_range(-config.jitter..=config.jitter),
                    rng.gen_range(-config.jitter..=config.jitter),
                )
            } else {
                (0.0, 0.0)
            };
            placements.push(Placement {
                concept: k,
                shape: c.shape,
                cx: (c.anchor.0 + jx) * size,
                cy: (c.anchor.1 + jy) * size,
                r: half_extent(c.shape, c.size * size * size),
            });
        }
        match first_overlap(config, &placements, n) {
            None => {
                return Ok(Layout {
                    class_id: class,
                    placements,
                })
            }
            Some((a, b, px)) => {
                last = format!("concepts {a} and {b} overlap by {px} px in class {}", spec.name);
            }
        }
    }
    Err(TideError::Generation(last))
}

/// First pair of placements whose shared pixels exceed the overlap tolerance.
fn first_overlap(config: &BenchmarkConfig, placements: &[Placement], n: usize) -> Option<(ConceptId, ConceptId, usize)> {
    let pixel_masks: Vec<Vec<bool>> = placements.iter().map(|p| p.pixel_mask(n)).collect();
    for a in 0..placements.len() {
        for b in a + 1..placements.len() {
            let both = pixel_masks[a]
                .iter()
                .zip(&pixel_masks[b])
                .filter(|(x, y)| **x && **y)
                .count();
            let smaller = pixel_masks[a]
                .iter()
                .filter(|&&v| v)
                .count()
                .min(pixel_masks[b].iter().filter(|&&v| v).count())
                .max(1);
            if both as f64 / smaller as f64 > config.overlap_tolerance {
                return Some((placements[a].concept, placements[b].concept, both));
            }
        }
    }
    None
}

/// Per-cell occupancy of one primitive at feature-grid resolution.
fn occupancy(config: &BenchmarkConfig, p: &Placement) -> Map2 {
    let g = config.grid_size;
    let cell = config.cell_size();
    let mut data = vec![0.0; g * g];
    for gy in 0..g {
        for gx in 0..g {
            let mut acc = 0.0;
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    acc += p.coverage(x, y);
                }
            }
            data[gy * g + gx] = acc / (cell * cell) as f64;
        }
    }
    Map2 {
        height: g,
        width: g,
        data,
    }
}

/// Ground-truth masks: primitive occupancy per grid cell, binarized at 0.5.
pub fn layout_masks(config: &BenchmarkConfig, layout: &Layout) -> Vec<ConceptMask> {
    layout
        .placements
        .iter()
        .map(|p| {
            let occ = occupancy(config, p);
            ConceptMask {
                concept_id: p.concept,
                height: occ.height,
                width: occ.width,
                data: occ.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
            }
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn scale(c: [f64; 3], f: f64) -> [f64; 3] {
    [c[0] * f, c[1] * f, c[2] * f]
}

/// `(placement index, band)` for every pixel, first placement wins.
fn label_map(config: &BenchmarkConfig, layout: &Layout) -> Vec<Option<(usize, u8)>> {
    let n = config.image_size;
    let mut labels = vec![None; n * n];
    for y in 0..n {
        for x in 0..n {
            for (i, p) in layout.placements.iter().enumerate() {
                if let Some(b) = p.pixel_band(x, y) {
                    labels[y * n + x] = Some((i, b));
                    break;
                }
            }
        }
    }
    labels
}

/// Render a layout under a domain style.
pub fn render_layout(config: &BenchmarkConfig, layout: &Layout, style: Style, seed: u64) -> RgbImage {
    let n = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = label_map(config, layout);
    let mut px = vec![[0.0f64; 3]; n * n];

    let warm = |rng: &mut ChaCha8Rng| {
        hsv(
            rng.gen_range(0.0..60.0),
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.55..0.9),
        )
    };

    match style {
        Style::PlainFill => {
            let g = rng.gen_range(0.82..0.95);
            let colors: Vec<[f64; 3]> = layout.placements.iter().map(|_| warm(&mut rng)).collect();
            for (i, l) in labels.iter().enumerate() {
                px[i] = match l {
                    None => [g, g, g],
                    Some((k, 0)) => colors[*k],
                    Some((k, _)) => scale(colors[*k], 0.4),
                };
            }
        }
        Style::OutlineOnly => {
            let bg = rng.gen_range(0.92..1.0);
            let ink = rng.gen_range(0.0..0.2);
            for y in 0..n {
                for x in 0..n {
                    let here = labels[y * n + x];
                    let edge = here.is_some()
                        && [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                                return true;
                            }
                            labels[ny as usize * n + nx as usize] != here
                        });
                    let v = if edge { ink } else { bg };
                    px[y * n + x] = [v, v, v];
                }
            }
        }
        Style::TexturedFill => {
            let g = rng.gen_range(0.75..0.9);
            let fills: Vec<([f64; 3], bool)> = layout
                .placements
                .iter()
                .map(|_| {
                    (
                        hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.5..1.0), rng.gen_range(0.6..0.95)),
                        rng.gen_bool(0.5),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let i = y * n + x;
                    px[i] = match labels[i] {
                        None => {
                            let v = g + rng.gen_range(-0.04..0.04);
                            [v, v, v]
                        }
                        Some((k, band)) => {
                            let (color, checker) = fills[k];
                            let t = if checker {
                                if (x + y) % 2 == 0 { 1.0 } else { 0.6 }
                            } else if (x + 2 * y) % 3 == 0 {
                                0.5
                            } else {
                                1.0
                            };
                            let b = if band == 0 { 1.0 } else { 0.45 };
                            scale(color, t * b)
                        }
                    };
                }
            }
        }
        Style::HueShiftedCluttered => {
            let bg = hsv(
                rng.gen_range(0.0..360.0),
                rng.gen_range(0.2..0.5),
                rng.gen_range(0.5..0.8),
            );
            let colors: Vec<[f64; 3]> = layout
                .placements
                .iter()
                .map(|_| {
                    hsv(
                        rng.gen_range(180.0..260.0),
                        rng.gen_range(0.6..1.0),
                        rng.gen_range(0.55..0.95),
                    )
                })
                .collect();
            for (i, p) in px.iter_mut().enumerate() {
                let noise = rng.gen_range(-0.05..0.05);
                *p = match labels[i] {
                    None => [bg[0] + noise, bg[1] + noise, bg[2] + noise],
                    Some((k, 0)) => colors[k],
                    Some((k, _)) => scale(colors[k], 0.4),
                };
            }
            let clutter = &config.classes[layout.class_id.0].clutter;
            for _ in 0..clutter.count {
                let r = if clutter.max_radius > clutter.min_radius {
                    rng.gen_range(clutter.min_radius..=clutter.max_radius)
                } else {
                    clutter.min_radius
                };
                let color = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0));
                for _attempt in 0..20 {
                    let cx = rng.gen_range(r..n as f64 - r);
                    let cy = rng.gen_range(r..n as f64 - r);
                    let cells: Vec<usize> = (0..n * n)
                        .filter(|&i| {
                            let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
                        })
                        .collect();
                    let touches = cells.iter().any(|&i| {
                        let (x, y) = (i % n, i / n);
                        [(0i64, 0i64), (0, -1), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            nx >= 0 && ny >= 0 && nx < n as i64 && ny < n as i64
                                && labels[ny as usize * n + nx as usize].is_some()
                        })
                    });
                    if !touches {
                        for i in cells {
                            px[i] = color;
                        }
                        break;
                    }
                }
            }
        }
    }

    let data = px
        .iter()
        .flat_map(|c| c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    RgbImage {
        height: n,
        width: n,
        data,
    }
}

/// A canonical, unjittered plain-style rendering of a class together with soft
/// per-concept occupancy maps, standing in for a synthesized exemplar and its
/// attention maps.
pub fn render_exemplar(config: &BenchmarkConfig, class: ClassId) -> Result<(RgbImage, Vec<(ConceptId, Map2)>)> {
    let flat = BenchmarkConfig {
        jitter: 0.0,
        ..config.clone()
    };
    let layout = sample_layout(&flat, class, 0)?;
    let image = render_layout(&flat, &layout, Style::PlainFill, super::mix_seed(&[config.seed, class.0 as u64, 3]));
    let soft = layout
        .placements
        .iter()
        .map(|p| (p.concept, occupancy(&flat, p)))
        .collect();
    Ok((image, soft))
}
