//! Max pooling and adaptive average pooling over the trailing three axes of
//! a `[L, D, H, W]` view.

use crate::error::{Result, TensorError};
use crate::tensor::Float;

/// Windowed max. Returns the pooled values and, per output cell, the flat
/// input index of the winning element (first index on ties).
pub fn maxpool_forward<T: Float>(
    x: &[T],
    lead: usize,
    input: [usize; 3],
    window: [usize; 3],
) -> Result<(Vec<T>, Vec<usize>, [usize; 3])> {
    for a in 0..3 {
        if window[a] == 0 || !input[a].is_multiple_of(window[a]) {
            return Err(TensorError::NotDivisible {
                op: "maxpool",
                axis: a,
                extent: input[a],
                factor: window[a],
            });
        }
    }
    let out = [
        input[0] / window[0],
        input[1] / window[1],
        input[2] / window[2],
    ];
    let [id, ih, iw] = input;
    let n_out = lead * out[0] * out[1] * out[2];
    let mut values = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    for l in 0..lead {
        let base = l * id * ih * iw;
        for zo in 0..out[0] {
            for yo in 0..out[1] {
                for xo in 0..out[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for a in 0..window[0] {
                        for b in 0..window[1] {
                            let row = base
                                + ((zo * window[0] + a) * ih + yo * window[1] + b) * iw
                                + xo * window[2];
                            for c in 0..window[2] {
                                let v = x[row + c];
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = row + c;
                                }
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_i);
                }
            }
        }
    }
    Ok((values, argmax, out))
}

pub fn maxpool_backward<T: Float>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// Bin `[start, end)` of output cell `i` when pooling `n` inputs to `m`.
pub fn adaptive_bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = (i * n) / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

pub fn adaptive_avg_forward<T: Float>(
    x: &[T],
    lead: usize,
    input: [usize; 3],
    target: [usize; 3],
) -> Result<Vec<T>> {
    for a in 0..3 {
        if target[a] == 0 || target[a] > input[a] {
            return Err(TensorError::InvalidArgument {
                op: "adaptive_avg_pool",
                msg: format!(
                    "target extent {} exceeds input extent {} on spatial axis {a}",
                    target[a], input[a]
                ),
            });
        }
    }
    let [id, ih, iw] = input;
    let mut out = Vec::with_capacity(lead * target.iter().product::<usize>());
    for l in 0..lead {
        let base = l * id * ih * iw;
        for zo in 0..target[0] {
            let (z0, z1) = adaptive_bin(zo, id, target[0]);
            for yo in 0..target[1] {
                let (y0, y1) = adaptive_bin(yo, ih, target[1]);
                for xo in 0..target[2] {
                    let (x0, x1) = adaptive_bin(xo, iw, target[2]);
                    let mut acc = T::zero();
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let row = base + (z * ih + y) * iw;
                            for xx in x0..x1 {
                                acc += x[row + xx];
                            }
                        }
                    }
                    let count = (z1 - z0) * (y1 - y0) * (x1 - x0);
                    out.push(acc / T::lit(count as f64));
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_backward<T: Float>(
    dy: &[T],
    lead: usize,
    input: [usize; 3],
    target: [usize; 3],
) -> Vec<T> {
    let [id, ih, iw] = input;
    let mut dx = vec![T::zero(); lead * id * ih * iw];
    let mut q = 0;
    for l in 0..lead {
        let base = l * id * ih * iw;
        for zo in 0..target[0] {
            let (z0, z1) = adaptive_bin(zo, id, target[0]);
            for yo in 0..target[1] {
                let (y0, y1) = adaptive_bin(yo, ih, target[1]);
                for xo in 0..target[2] {
                    let (x0, x1) = adaptive_bin(xo, iw, target[2]);
                    let count = (z1 - z0) * (y1 - y0) * (x1 - x0);
                    let g = dy[q] / T::lit(count as f64);
                    q += 1;
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let row = base + (z * ih + y) * iw;
                            for xx in x0..x1 {
                                dx[row + xx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_cover_input() {
        for n in 1..12 {
            for m in 1..=n {
                let mut covered = vec![0; n];
                for i in 0..m {
                    let (s, e) = adaptive_bin(i, n, m);
                    assert!(s < e && e <= n);
                    for c in &mut covered[s..e] {
                        *c += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c >= 1));
            }
        }
    }

    #[test]
    fn maxpool_rejects_indivisible_extent() {
        let x = vec![0.0f32; 3 * 4];
        assert!(maxpool_forward(&x, 1, [1, 3, 4], [1, 2, 2]).is_err());
    }
}
