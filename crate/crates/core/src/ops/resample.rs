//! Factor-two upsampling along a single axis of an `[outer, n, inner]` view.
//! Multi-axis upsampling chains these one axis at a time.

use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    Nearest,
    /// Linear interpolation at half-pixel centres (bilinear over two axes,
    /// trilinear over three), clamped at the borders.
    Linear,
}

/// Source taps and weights of output index `o` for linear ×2 upsampling.
fn linear_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = src - i0 as f64;
    (i0, i1, frac)
}

pub fn upsample2x_forward<T: Float>(
    x: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    mode: UpsampleMode,
) -> Vec<T> {
    let m = 2 * n;
    let mut y = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut y[o * m * inner..(o + 1) * m * inner];
        for j in 0..m {
            let row = &mut dst[j * inner..(j + 1) * inner];
            match mode {
                UpsampleMode::Nearest => {
                    row.copy_from_slice(&src[(j / 2) * inner..(j / 2 + 1) * inner]);
                }
                UpsampleMode::Linear => {
                    let (i0, i1, f) = linear_taps(j, n);
                    let (w0, w1) = (T::lit(1.0 - f), T::lit(f));
                    let a = &src[i0 * inner..(i0 + 1) * inner];
                    let b = &src[i1 * inner..(i1 + 1) * inner];
                    for ((r, &va), &vb) in row.iter_mut().zip(a).zip(b) {
                        *r = w0 * va + w1 * vb;
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Float>(
    dy: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    mode: UpsampleMode,
) -> Vec<T> {
    let m = 2 * n;
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &dy[o * m * inner..(o + 1) * m * inner];
        let dst = &mut dx[o * n * inner..(o + 1) * n * inner];
        for j in 0..m {
            let g = &src[j * inner..(j + 1) * inner];
            match mode {
                UpsampleMode::Nearest => {
                    let i = j / 2;
                    for (d, &v) in dst[i * inner..(i + 1) * inner].iter_mut().zip(g) {
                        *d += v;
                    }
                }
                UpsampleMode::Linear => {
                    let (i0, i1, f) = linear_taps(j, n);
                    let (w0, w1) = (T::lit(1.0 - f), T::lit(f));
                    for (k, &v) in g.iter().enumerate() {
                        dst[i0 * inner + k] += w0 * v;
                        dst[i1 * inner + k] += w1 * v;
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
    fn nearest_repeats_each_element() {
        let y = upsample2x_forward(&[1.0f64, 2.0], 1, 2, 1, UpsampleMode::Nearest);
        assert_eq!(y, vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_uses_half_pixel_centres() {
        let y = upsample2x_forward(&[0.0f64, 4.0], 1, 2, 1, UpsampleMode::Linear);
        assert_eq!(y, vec![0.0, 1.0, 3.0, 4.0]);
    }
}
