use crate::tensor::Float;

/// Per-channel statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance normalization of `[C, S]` followed by a per-channel affine map.
pub fn instance_norm_forward<T: Float>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let s = x.len() / channels;
    let n = T::lit(s as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(channels),
        inv_std: Vec::with_capacity(channels),
    };
    for c in 0..channels {
        let xc = &x[c * s..(c + 1) * s];
        let mean = xc.iter().copied().sum::<T>() / n;
        let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + eps).sqrt();
        for (o, &v) in y[c * s..(c + 1) * s].iter_mut().zip(xc) {
            *o = gamma[c] * (v - mean) * inv_std + beta[c];
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    (y, stats)
}

pub struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn instance_norm_backward<T: Float>(
    x: &[T],
    dy: &[T],
    channels: usize,
    gamma: &[T],
    stats: &NormStats<T>,
) -> NormGrads<T> {
    let s = x.len() / channels;
    let n = T::lit(s as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = Vec::with_capacity(channels);
    let mut dbeta = Vec::with_capacity(channels);
    for c in 0..channels {
        let xc = &x[c * s..(c + 1) * s];
        let dyc = &dy[c * s..(c + 1) * s];
        let (mean, inv_std) = (stats.mean[c], stats.inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&v, &g) in xc.iter().zip(dyc) {
            let xhat = (v - mean) * inv_std;
            sum_dy += g;
            sum_dy_xhat += g * xhat;
        }
        dgamma.push(sum_dy_xhat);
        dbeta.push(sum_dy);
        let scale = gamma[c] * inv_std / n;
        for ((o, &v), &g) in dx[c * s..(c + 1) * s].iter_mut().zip(xc).zip(dyc) {
            let xhat = (v - mean) * inv_std;
            *o = scale * (n * g - sum_dy - xhat * sum_dy_xhat);
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
