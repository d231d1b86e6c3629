//! Cross-correlation over `[C, D, H, W]` inputs via im2col + GEMM.
//! Two-dimensional convolution is the `D = 1, kd = 1` case.

use crate::error::{Result, TensorError};
use crate::tensor::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c_in: usize,
    pub input: [usize; 3],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

impl ConvDims {
    pub fn new(x: [usize; 4], w: [usize; 5], geom: ConvGeom) -> Result<Self> {
        if w[1] != x[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv",
                expected: vec![w[0], x[0], w[2], w[3], w[4]],
                got: w.to_vec(),
            });
        }
        let mut output = [0; 3];
        for a in 0..3 {
            if geom.stride[a] == 0 {
                return Err(TensorError::InvalidArgument {
                    op: "conv",
                    msg: "stride must be at least 1".into(),
                });
            }
            let padded = x[a + 1] + 2 * geom.pad[a];
            if w[a + 2] == 0 || w[a + 2] > padded {
                return Err(TensorError::InvalidArgument {
                    op: "conv",
                    msg: format!(
                        "kernel extent {} does not fit padded input extent {} on spatial axis {a}",
                        w[a + 2],
                        padded
                    ),
                });
            }
            output[a] = (padded - w[a + 2]) / geom.stride[a] + 1;
        }
        Ok(Self {
            c_in: x[0],
            input: [x[1], x[2], x[3]],
            c_out: w[0],
            kernel: [w[2], w[3], w[4]],
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self, geom: &ConvGeom) -> bool {
        self.kernel == [1, 1, 1] && geom.stride == [1, 1, 1] && geom.pad == [0, 0, 0]
    }
}

fn im2col<T: Float>(x: &[T], d: &ConvDims, g: &ConvGeom, cols: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let p = d.out_positions();
    let mut row = 0;
    for ci in 0..d.c_in {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zo in 0..od {
                        let z = (zo * g.stride[0] + a) as isize - g.pad[0] as isize;
                        for yo in 0..oh {
                            let y = (yo * g.stride[1] + b) as isize - g.pad[1] as isize;
                            let seg = &mut dst[q..q + ow];
                            q += ow;
                            if z < 0 || z >= id as isize || y < 0 || y >= ih as isize {
                                seg.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let base = (z as usize * ih + y as usize) * iw;
                            for (xo, v) in seg.iter_mut().enumerate() {
                                let xi = (xo * g.stride[2] + c) as isize - g.pad[2] as isize;
                                *v = if xi < 0 || xi >= iw as isize {
                                    T::zero()
                                } else {
                                    xc[base + xi as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], d: &ConvDims, g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let p = d.out_positions();
    let mut row = 0;
    for ci in 0..d.c_in {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut q = 0;
                    for zo in 0..od {
                        let z = (zo * g.stride[0] + a) as isize - g.pad[0] as isize;
                        for yo in 0..oh {
                            let y = (yo * g.stride[1] + b) as isize - g.pad[1] as isize;
                            let seg = &src[q..q + ow];
                            q += ow;
                            if z < 0 || z >= id as isize || y < 0 || y >= ih as isize {
                                continue;
                            }
                            let base = (z as usize * ih + y as usize) * iw;
                            for (xo, &v) in seg.iter().enumerate() {
                                let xi = (xo * g.stride[2] + c) as isize - g.pad[2] as isize;
                                if xi >= 0 && xi < iw as isize {
                                    xc[base + xi as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let p = d.out_positions();
    let k = d.patch_len();
    let mut out = vec![T::zero(); d.c_out * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    if d.is_pointwise(g) {
        gemm(d.c_out, k, p, w, false, x, false, &mut out, true);
    } else {
        let mut cols = vec![T::zero(); k * p];
        im2col(x, d, g, &mut cols);
        gemm(d.c_out, k, p, w, false, &cols, false, &mut out, true);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = d.out_positions();
    let k = d.patch_len();
    let pointwise = d.is_pointwise(g);
    let cols_owned;
    let cols: &[T] = if pointwise || !need[1] {
        x
    } else {
        let mut c = vec![T::zero(); k * p];
        im2col(x, d, g, &mut c);
        cols_owned = c;
        &cols_owned
    };
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); d.c_out * k];
        gemm(d.c_out, p, k, dy, false, cols, true, &mut dw, false);
        dw
    });
    let db = need[2].then(|| dy.chunks(p).map(|row| row.iter().copied().sum()).collect());
    let dx = need[0].then(|| {
        if pointwise {
            let mut dx = vec![T::zero(); k * p];
            gemm(k, d.c_out, p, w, true, dy, false, &mut dx, false);
            dx
        } else {
            let mut dcols = vec![T::zero(); k * p];
            gemm(k, d.c_out, p, w, true, dy, false, &mut dcols, false);
            let mut dx = vec![T::zero(); d.c_in * d.in_positions()];
            col2im(&dcols, d, g, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeom) -> Vec<f64> {
        let [id, ih, iw] = d.input;
        let [kd, kh, kw] = d.kernel;
        let [od, oh, ow] = d.output;
        let mut out = vec![0.0; d.c_out * od * oh * ow];
        for co in 0..d.c_out {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let z = (zo * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let y = (yo * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let xx =
                                            (xo * g.stride[2] + c) as isize - g.pad[2] as isize;
                                        if z < 0
                                            || y < 0
                                            || xx < 0
                                            || z >= id as isize
                                            || y >= ih as isize
                                            || xx >= iw as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * id + z as usize) * ih + y as usize) * iw
                                            + xx as usize;
                                        let wi = (((co * d.c_in + ci) * kd + a) * kh + b) * kw + c;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * od + zo) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_padded_conv_matches_direct_loops() {
        let g = ConvGeom {
            stride: [1, 2, 1],
            pad: [1, 0, 2],
        };
        let d = ConvDims::new([2, 3, 5, 4], [3, 2, 2, 3, 3], g).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4)
            .map(|i| ((i * 7 % 13) as f64) - 6.0)
            .collect();
        let w: Vec<f64> = (0..3 * 2 * 2 * 3 * 3)
            .map(|i| ((i * 5 % 11) as f64) * 0.1)
            .collect();
        let got = conv_forward(&x, &w, None, &d, &g);
        let want = naive(&x, &w, &d, &g);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let g = ConvGeom {
            stride: [1, 1, 1],
            pad: [0, 0, 0],
        };
        assert!(ConvDims::new([1, 1, 2, 2], [1, 1, 1, 3, 3], g).is_err());
    }
}
