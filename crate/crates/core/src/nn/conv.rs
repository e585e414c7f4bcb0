//! 3x3 same-padded convolution block (conv -> ReLU -> optional 2x2 max-pool)
//! implemented with im2col and a dense GEMM.

/// Activations between blocks, `(H, W, C)` layout.
#[derive(Debug, Clone)]
pub(crate) struct Act {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    in_h: usize,
    in_w: usize,
    cin: usize,
    cols: Vec<f64>,
    /// Pre-activation conv output, `(in_h * in_w) x cout`.
    pre: Vec<f64>,
    /// Flat index into the post-ReLU map picked by each pooled output cell.
    pool_argmax: Option<Vec<u32>>,
}

/// C = alpha * A(m x k) * B(k x n) + beta * C, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie entirely within the given slices
    // (checked by the callers' shape bookkeeping) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &Act) -> Vec<f64> {
    let (h, w, c) = (input.h, input.w, input.c);
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * k..(y * w + x + 1) * k];
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (dy * 3 + dx) * c;
                    row[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &dcols[(y * w + x) * k..(y * w + x + 1) * k];
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = x as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (dy * 3 + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// `weight` is `(9 * cin) x cout` row-major, `bias` has `cout` entries.
pub(crate) fn block_forward(
    input: &Act,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    pool: bool,
) -> (Act, BlockCache) {
    let (h, w, cin) = (input.h, input.w, input.c);
    let m = h * w;
    let k = 9 * cin;
    let cols = im2col(input);
    let mut pre = Vec::with_capacity(m * cout);
    for _ in 0..m {
        pre.extend_from_slice(bias);
    }
    gemm(m, k, cout, &cols, k as isize, 1, weight, cout as isize, 1, 1.0, &mut pre);

    let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let (out, pool_argmax) = if pool {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * cout];
        let mut arg = vec![0u32; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..cout {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * cout + ch;
                        if post[idx] > best {
                            best = post[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (oy * ow + ox) * cout + ch;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
        (
            Act {
                h: oh,
                w: ow,
                c: cout,
                data: out,
            },
            Some(arg),
        )
    } else {
        (
            Act {
                h,
                w,
                c: cout,
                data: post,
            },
            None,
        )
    };
    (
        out,
        BlockCache {
            in_h: h,
            in_w: w,
            cin,
            cols,
            pre,
            pool_argmax,
        },
    )
}

/// Backpropagate `d_out` through one block, accumulating into `d_weight`/`d_bias`.
/// Returns the gradient w.r.t. the block input when `need_input_grad` is set.
pub(crate) fn block_backward(
    cache: &BlockCache,
    d_out: &[f64],
    weight: &[f64],
    cout: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let m = cache.in_h * cache.in_w;
    let k = 9 * cache.cin;
    let mut d_pre = match &cache.pool_argmax {
        Some(arg) => {
            let mut d = vec![0.0; m * cout];
            for (o, &src) in arg.iter().enumerate() {
                d[src as usize] += d_out[o];
            }
            d
        }
        None => d_out.to_vec(),
    };
    for (d, &p) in d_pre.iter_mut().zip(&cache.pre) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
    for row in d_pre.chunks_exact(cout) {
        for (db, &d) in d_bias.iter_mut().zip(row) {
            *db += d;
        }
    }
    // dW += cols^T * d_pre
    gemm(
        k,
        m,
        cout,
        &cache.cols,
        1,
        k as isize,
        &d_pre,
        cout as isize,
        1,
        1.0,
        d_weight,
    );
    if !need_input_grad {
        return None;
    }
    // dcols = d_pre * W^T
    let mut dcols = vec![0.0; m * k];
    gemm(m, cout, k, &d_pre, cout as isize, 1, weight, 1, cout as isize, 0.0, &mut dcols);
    Some(col2im(&dcols, cache.in_h, cache.in_w, cache.cin))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an oracle for the im2col path.
    fn naive_conv(input: &Act, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; input.h * input.w * cout];
        for y in 0..input.h {
            for x in 0..input.w {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = y as isize + dy as isize - 1;
                            let sx = x as isize + dx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= input.h as isize || sx >= input.w as isize {
                                continue;
                            }
                            for ci in 0..input.c {
                                let v = input.data[(sy as usize * input.w + sx as usize) * input.c + ci];
                                acc += v * weight[((dy * 3 + dx) * input.c + ci) * cout + co];
                            }
                        }
                    }
                    out[(y * input.w + x) * cout + co] = acc.max(0.0);
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn im2col_matches_naive_convolution() {
        let mut s = 7u64;
        let input = Act {
            h: 5,
            w: 4,
            c: 3,
            data: (0..60).map(|_| lcg(&mut s)).collect(),
        };
        let cout = 4;
        let weight: Vec<f64> = (0..27 * cout).map(|_| lcg(&mut s)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| lcg(&mut s)).collect();
        let (out, _) = block_forward(&input, &weight, &bias, cout, false);
        let expect = naive_conv(&input, &weight, &bias, cout);
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut s = 11u64;
        let input = Act {
            h: 4,
            w: 4,
            c: 2,
            data: (0..32).map(|_| lcg(&mut s)).collect(),
        };
        let cout = 3;
        let mut weight: Vec<f64> = (0..18 * cout).map(|_| lcg(&mut s)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| 0.1 * lcg(&mut s)).collect();
        let probe: Vec<f64> = (0..12).map(|_| lcg(&mut s)).collect();
        let loss = |w: &[f64], inp: &Act| -> f64 {
            let (o, _) = block_forward(inp, w, &bias, cout, true);
            o.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = block_forward(&input, &weight, &bias, cout, true);
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; cout];
        let dx = block_backward(&cache, &probe, &weight, cout, &mut dw, &mut db, true).unwrap();
        let h = 1e-6;
        for i in 0..weight.len() {
            let orig = weight[i];
            weight[i] = orig + h;
            let up = loss(&weight, &input);
            weight[i] = orig - h;
            let down = loss(&weight, &input);
            weight[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dW[{i}] {fd} vs {}", dw[i]);
        }
        let mut inp = input.clone();
        for i in 0..inp.data.len() {
            let orig = inp.data[i];
            inp.data[i] = orig + h;
            let up = loss(&weight, &inp);
            inp.data[i] = orig - h;
            let down = loss(&weight, &inp);
            inp.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dX[{i}] {fd} vs {}", dx[i]);
        }
    }
}
