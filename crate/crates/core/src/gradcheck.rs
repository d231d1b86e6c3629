//! Central finite-difference verification of analytic gradients.
//!
//! The function under test is rebuilt from scratch for every perturbation,
//! so the check exercises exactly the forward code used in training.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Fault, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per tensor; tensors at or below this size are checked exhaustively.
    pub samples_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Second differences at `h` and `2h` disagreeing by more than this
    /// fraction of the slope (after scaling by `h`) mark a kink inside the
    /// stencil. There the analytic value only has to lie between the
    /// one-sided differences.
    pub kink_tol: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 50,
            floor: 1e-5,
            kink_tol: 2e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self, tol: f64) -> Vec<&TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err.is_nan() || t.max_rel_err >= tol)
            .collect()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures(tol).is_empty()
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d loss / d input` for every named input of `f`.
///
/// `f` receives one leaf per input (in order) and returns a one-element loss.
pub fn check<F>(inputs: &[(String, Tensor<f64>)], f: F, cfg: &CheckConfig) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Arc<Tensor<f64>>> =
        inputs.iter().map(|(_, t)| Arc::new(t.clone())).collect();

    let eval = |values: &[Arc<Tensor<f64>>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|v| g.leaf_shared(Arc::clone(v), false))
            .collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    if let Some(fault) = cfg.fault {
        g.inject_fault(fault);
    }
    let vars: Vec<Var> = values
        .iter()
        .map(|v| g.leaf_shared(Arc::clone(v), true))
        .collect();
    let loss = f(&mut g, &vars)?;
    let f0 = g.value(loss).item();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    drop(grads);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(inputs.len());
    for (ti, (name, _)) in inputs.iter().enumerate() {
        let n = values[ti].len();
        let order: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, n).into_vec()
        };
        let mut entry = TensorCheck {
            name: name.clone(),
            checked: 0,
            kinks: 0,
            max_rel_err: 0.0,
            worst_index: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for idx in order {
            if entry.checked >= cfg.samples_per_tensor {
                break;
            }
            let orig = values[ti].data()[idx];
            let mut at = |delta: f64| -> Result<f64> {
                Arc::make_mut(&mut values[ti]).data_mut()[idx] = orig + delta;
                let v = eval(&values);
                Arc::make_mut(&mut values[ti]).data_mut()[idx] = orig;
                v
            };
            let h = cfg.step;
            let (fp, fm, fp2, fm2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            let a = analytic[ti].data()[idx];
            let curv_h = (fp - 2.0 * f0 + fm) / (h * h);
            let curv_2h = (fp2 - 2.0 * f0 + fm2) / (4.0 * h * h);
            let central = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h);
            let numeric =
                if (curv_h - curv_2h).abs() * h > cfg.kink_tol * central.abs().max(cfg.floor) {
                    entry.kinks += 1;
                    let forward = (4.0 * fp - 3.0 * f0 - fp2) / (2.0 * h);
                    let backward = (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h);
                    a.clamp(forward.min(backward), forward.max(backward))
                } else {
                    central
                };
            let e = rel_err(a, numeric, cfg.floor);
            entry.checked += 1;
            if e > entry.max_rel_err || e.is_nan() {
                entry.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                entry.worst_index = Some(idx);
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        report.push(entry);
    }
    Ok(CheckReport { tensors: report })
}

/// `sum(x * r)` for a fixed pseudo-random `r`, so every output element
/// contributes a distinct weight to the checked scalar.
pub fn random_projection(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn case(
    name: impl Into<String>,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        inputs,
        f: Box::new(f),
    }
}

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed).map(|v| 1.5 + v)
}

fn op_cases() -> Vec<Case> {
    use crate::ops::resample::UpsampleMode;
    let r = random_tensor;
    let mut cases = Vec::new();
    for (i, &(ci, h, w, co, k, stride, pad)) in [
        (1, 5, 5, 2, 3, 1, 1),
        (2, 6, 7, 3, 3, 2, 1),
        (3, 4, 4, 2, 1, 1, 0),
    ]
    .iter()
    .enumerate()
    {
        cases.push(case(
            format!("conv2d#{i}"),
            vec![r(&[ci, h, w], 1), r(&[co, ci, k, k], 2), r(&[co], 3)],
            move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }
    for (i, &(ci, d, h, w, co, k, stride, pad)) in [
        (1, 4, 4, 4, 2, 3, 1, 1),
        (2, 3, 5, 4, 2, 3, 2, 1),
        (2, 4, 4, 4, 3, 1, 1, 0),
    ]
    .iter()
    .enumerate()
    {
        cases.push(case(
            format!("conv3d#{i}"),
            vec![r(&[ci, d, h, w], 4), r(&[co, ci, k, k, k], 5), r(&[co], 6)],
            move |g, v| g.conv3d(v[0], v[1], Some(v[2]), stride, pad),
        ));
    }
    for (i, (shape, win)) in [
        (vec![2, 4, 4], vec![2, 2]),
        (vec![1, 4, 6, 4], vec![2, 2, 2]),
        (vec![3, 6, 6], vec![3, 3]),
    ]
    .into_iter()
    .enumerate()
    {
        cases.push(case(
            format!("maxpool#{i}"),
            vec![r(&shape, 7)],
            move |g, v| g.maxpool(v[0], &win),
        ));
    }
    for (i, shape) in [vec![2, 3, 4], vec![3, 2, 3, 4], vec![1, 5, 5]]
        .into_iter()
        .enumerate()
    {
        let c = shape[0];
        cases.push(case(
            format!("instance_norm#{i}"),
            vec![r(&shape, 8), r(&[c], 9), r(&[c], 10)],
            |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
        ));
    }
    for (i, (shape, target)) in [
        (vec![2, 6, 6], vec![3, 3]),
        (vec![1, 4, 8, 6], vec![2, 4, 3]),
        (vec![2, 4, 6], vec![1, 1]),
    ]
    .into_iter()
    .enumerate()
    {
        cases.push(case(
            format!("adaptive_avg_pool#{i}"),
            vec![r(&shape, 11)],
            move |g, v| g.adaptive_avg_pool(v[0], &target),
        ));
    }
    for mode in [UpsampleMode::Nearest, UpsampleMode::Linear] {
        for (i, (shape, axes)) in [
            (vec![2, 3, 4], vec![1, 2]),
            (vec![1, 2, 3, 4], vec![1, 2, 3]),
            (vec![3, 5], vec![1]),
        ]
        .into_iter()
        .enumerate()
        {
            cases.push(case(
                format!("upsample_{mode:?}#{i}"),
                vec![r(&shape, 12)],
                move |g, v| g.upsample2x(v[0], mode, &axes),
            ));
        }
    }
    for (i, (shape, axis)) in [(vec![5], 0), (vec![3, 4], 1), (vec![2, 3, 4], 1)]
        .into_iter()
        .enumerate()
    {
        cases.push(case(
            format!("softmax#{i}"),
            vec![r(&shape, 13).map(|x| 3.0 * x)],
            move |g, v| g.softmax(v[0], axis),
        ));
    }
    for (i, (spec, a, b)) in [
        ("cdhw,d->chw", vec![2, 3, 2, 2], vec![3]),
        ("edhw,ehw->d", vec![2, 3, 2, 2], vec![2, 2, 2]),
        ("c,hw->chw", vec![3], vec![2, 2]),
    ]
    .into_iter()
    .enumerate()
    {
        cases.push(case(
            format!("contract#{i}"),
            vec![r(&a, 14), r(&b, 15)],
            move |g, v| g.contract(spec, v[0], v[1]),
        ));
    }
    for (i, shape) in [vec![7], vec![3, 4], vec![2, 3, 2]].into_iter().enumerate() {
        let s2 = shape.clone();
        cases.push(case(format!("relu#{i}"), vec![r(&shape, 16)], |g, v| {
            Ok(g.relu(v[0]))
        }));
        cases.push(case(
            format!("sigmoid#{i}"),
            vec![r(&shape, 17).map(|x| 4.0 * x)],
            |g, v| Ok(g.sigmoid(v[0])),
        ));
        cases.push(case(
            format!("add#{i}"),
            vec![r(&shape, 18), r(&shape, 19)],
            |g, v| g.add(v[0], v[1]),
        ));
        cases.push(case(
            format!("sub#{i}"),
            vec![r(&shape, 20), r(&shape, 21)],
            |g, v| g.sub(v[0], v[1]),
        ));
        cases.push(case(
            format!("mul#{i}"),
            vec![r(&shape, 22), r(&shape, 23)],
            |g, v| g.mul(v[0], v[1]),
        ));
        cases.push(case(
            format!("div#{i}"),
            vec![r(&shape, 24), positive_tensor(&shape, 25)],
            |g, v| g.div(v[0], v[1]),
        ));
        cases.push(case(
            format!("add_scalar#{i}"),
            vec![r(&shape, 26)],
            |g, v| Ok(g.add_scalar(v[0], 0.7)),
        ));
        cases.push(case(
            format!("mul_scalar#{i}"),
            vec![r(&shape, 27)],
            |g, v| Ok(g.mul_scalar(v[0], -1.3)),
        ));
        cases.push(case(format!("sum#{i}"), vec![r(&shape, 28)], |g, v| {
            Ok(g.sum(v[0]))
        }));
        cases.push(case(format!("mean#{i}"), vec![r(&shape, 29)], |g, v| {
            Ok(g.mean(v[0]))
        }));
        cases.push(case(
            format!("concat#{i}"),
            vec![r(&shape, 30), r(&shape, 31)],
            |g, v| g.concat(&[v[0], v[1]], 0),
        ));
        let len = s2[0];
        cases.push(case(
            format!("narrow#{i}"),
            vec![r(&shape, 32)],
            move |g, v| g.narrow(v[0], 0, len / 2, len - len / 2),
        ));
        let flat: usize = s2.iter().product();
        cases.push(case(
            format!("reshape#{i}"),
            vec![r(&shape, 33)],
            move |g, v| g.reshape(v[0], &[flat]),
        ));
    }
    cases
}

/// Checks every primitive op on at least three shapes, each through a
/// random projection to a scalar.
pub fn op_suite(cfg: &CheckConfig) -> Result<Vec<(String, CheckReport)>> {
    let mut out = Vec::new();
    for (k, c) in op_cases().into_iter().enumerate() {
        let inputs: Vec<(String, Tensor<f64>)> = c
            .inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("{}.in{i}", c.name), t))
            .collect();
        let f = c.f;
        let report = check(
            &inputs,
            |g, v| {
                let y = f(g, v)?;
                random_projection(g, y, 1000 + k as u64)
            },
            cfg,
        )?;
        out.push((c.name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_of_a_product_passes() {
        let x = random_tensor(&[3, 4], 1);
        let y = random_tensor(&[3, 4], 2);
        let report = check(
            &[("x".into(), x), ("y".into(), y)],
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            &CheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-8), "{report:?}");
        assert_eq!(report.checked(), 24);
    }

    #[test]
    fn relu_at_zero_is_counted_as_a_kink() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let report = check(
            &[("x".into(), x)],
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &CheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.tensors[0].kinks, 1);
        assert_eq!(report.tensors[0].checked, 3);
        assert!(report.passed(1e-8));
    }

    #[test]
    fn every_primitive_passes() {
        let results = op_suite(&CheckConfig::default()).unwrap();
        assert!(results.len() >= 3 * 20);
        for (name, r) in &results {
            assert!(r.passed(1e-5), "{name}: {r:?}");
            assert!(r.checked() > 0, "{name}: nothing checked");
        }
    }

    #[test]
    fn negated_conv_gradient_is_caught() {
        let cfg = CheckConfig {
            fault: Some(Fault::NegateConvWeightGrad),
            ..Default::default()
        };
        let results = op_suite(&cfg).unwrap();
        let conv = results.iter().find(|(n, _)| n == "conv2d#0").unwrap();
        assert!(conv.1.max_rel_err() > 1.0, "{:?}", conv.1);
        let relu = results.iter().find(|(n, _)| n == "relu#0").unwrap();
        assert!(relu.1.passed(1e-5));
    }
}
