//! Soft Dice (Tversky-weighted) losses.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// False-positive weight.
    pub alpha: f64,
    /// False-negative weight.
    pub beta: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.eps > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "loss config",
                msg: format!("need alpha, beta >= 0 and eps > 0, got {self:?}"),
            });
        }
        Ok(())
    }
}

/// `φ = Σmg / (Σmg + αΣm(1−g) + βΣ(1−m)g + ε)` on plain slices.
pub fn soft_dice_phi(m: &[f64], g: &[f64], cfg: &LossConfig) -> Result<f64> {
    if m.len() != g.len() {
        return Err(TensorError::ShapeMismatch {
            op: "soft_dice_phi",
            expected: vec![g.len()],
            got: vec![m.len()],
        });
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&a, &b) in m.iter().zip(g) {
        tp += a * b;
        fp += a * (1.0 - b);
        fn_ += (1.0 - a) * b;
    }
    Ok(tp / (tp + cfg.alpha * fp + cfg.beta * fn_ + cfg.eps))
}

/// Per-class partial sums `(Σ m·g, Σ m)` of `[C, ...]` probabilities against
/// same-shape binary targets. Summing these over slices and passing the
/// totals to [`dice_from_sums`] gives the batch loss.
pub fn partial_sums<T: Float>(g: &mut Graph<T>, probs: Var, target: Var) -> Result<(Var, Var)> {
    if g.shape(probs) != g.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "dice loss",
            expected: g.shape(target).to_vec(),
            got: g.shape(probs).to_vec(),
        });
    }
    let shape = g.shape(probs).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let m = g.reshape(probs, &[c, n])?;
    let t = g.reshape(target, &[c, n])?;
    let inter = g.contract("cx,cx->c", m, t)?;
    let ones = g.constant(Tensor::ones(vec![n]));
    let mass = g.contract("cx,x->c", m, ones)?;
    Ok((inter, mass))
}

/// `Σ_c (1 − φ_c)` from per-class sums; `truth[c] = Σ g_c`.
pub fn dice_from_sums<T: Float>(
    g: &mut Graph<T>,
    inter: Var,
    mass: Var,
    truth: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    let c = truth.len();
    if g.shape(inter) != [c] || g.shape(mass) != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "dice loss classes",
            expected: vec![c],
            got: g.shape(inter).to_vec(),
        });
    }
    let gt = g.constant(Tensor::new(
        vec![c],
        truth.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let fp = g.sub(mass, inter)?;
    let fp = g.mul_scalar(fp, cfg.alpha);
    let fneg = g.sub(gt, inter)?;
    let fneg = g.mul_scalar(fneg, cfg.beta);
    let den = g.add(inter, fp)?;
    let den = g.add(den, fneg)?;
    let den = g.add_scalar(den, cfg.eps);
    let phi = g.div(inter, den)?;
    let total = g.sum(phi);
    let neg = g.mul_scalar(total, -1.0);
    Ok(g.add_scalar(neg, c as f64))
}

/// Per-class soft Dice loss of `[C, ...]` probabilities against binary targets.
pub fn dice_loss<T: Float>(
    g: &mut Graph<T>,
    probs: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let c = g.shape(target)[0];
    let n = g.value(target).len() / c;
    let truth: Vec<f64> = (0..c)
        .map(|k| {
            g.value(target).data()[k * n..(k + 1) * n]
                .iter()
                .map(|v| v.as_f64())
                .sum()
        })
        .collect();
    let (inter, mass) = partial_sums(g, probs, target)?;
    dice_from_sums(g, inter, mass, &truth, cfg)
}

pub fn loss_total<T: Float>(g: &mut Graph<T>, l2d: Var, l3d: Var) -> Result<Var> {
    g.add(l2d, l3d)
}

/// One-hot `[C, ...]` targets from labels in `0..=C` (0 is background).
pub fn one_hot<T: Float>(labels: &[u8], shape: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != labels.len() {
        return Err(TensorError::DataLength {
            shape: shape.to_vec(),
            expected: n,
            got: labels.len(),
        });
    }
    let mut data = vec![T::zero(); num_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l > num_classes {
            return Err(TensorError::InvalidArgument {
                op: "one_hot",
                msg: format!("label {l} exceeds class count {num_classes}"),
            });
        }
        if l > 0 {
            data[(l - 1) * n + i] = T::one();
        }
    }
    let mut full = vec![num_classes];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_probability_on_two_of_four() {
        let cfg = LossConfig {
            eps: 0.0,
            ..Default::default()
        };
        let phi = soft_dice_phi(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0], &cfg).unwrap();
        assert!((phi - 0.5).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_plain_phi() {
        let cfg = LossConfig::default();
        let m = Tensor::new(vec![2, 3], vec![0.9, 0.2, 0.4, 0.1, 0.7, 0.3]).unwrap();
        let t = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let expected = (0..2)
            .map(|c| {
                1.0 - soft_dice_phi(
                    &m.data()[c * 3..c * 3 + 3],
                    &t.data()[c * 3..c * 3 + 3],
                    &cfg,
                )
                .unwrap()
            })
            .sum::<f64>();
        let mut g = Graph::<f64>::new();
        let mv = g.leaf(m, true);
        let tv = g.constant(t);
        let l = dice_loss(&mut g, mv, tv, &cfg).unwrap();
        assert!((g.value(l).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn one_hot_drops_background() {
        let t: Tensor<f32> = one_hot(&[0, 1, 2, 1], &[4], 2).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(one_hot::<f32>(&[3], &[1], 2).is_err());
    }
}
