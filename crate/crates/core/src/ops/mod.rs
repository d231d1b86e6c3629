//! Forward/backward kernels on flat buffers. The autodiff graph wires these
//! together; nothing here allocates graph state.

pub mod conv;
pub mod einsum;
pub mod norm;
pub mod pool;
pub mod resample;

use crate::tensor::Float;

/// Max-shifted softmax along the middle axis of an `[outer, n, inner]` view.
pub fn softmax_forward<T: Float>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(x[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                y[at(k)] /= total;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Float>(
    y: &[T],
    dy: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: T = (0..n).map(|k| y[at(k)] * dy[at(k)]).sum();
            for k in 0..n {
                dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
            }
        }
    }
    dx
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Split `shape` around `axis` into `(outer, n, inner)`.
pub fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
