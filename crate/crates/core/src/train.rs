//! Optimization: split-graph gradient computation, Adam, the training loop,
//! inference, and the whole-model gradient check.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result as TResult};
use crate::gradcheck::{self, CheckConfig, CheckReport};
use crate::graph::{Graph, Var};
use crate::loss::{dice_from_sums, dice_loss, one_hot, partial_sums, LossConfig};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{slice_of, AttentionRecord, ScaaModel, SliceContext};
use crate::nn::{Bound, ParamStore};
use crate::synth::{augment, AugmentConfig, VolumeSample};
use crate::tensor::{Float, Tensor};

type Result<T> = std::result::Result<T, Error>;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter, in store order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> TResult<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(crate::error::TensorError::InvalidArgument {
                op: "adam",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = std::sync::Arc::make_mut(&mut p.value).data_mut();
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                w[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
    pub slices: usize,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub loss: LossConfig,
    pub window: (f64, f64),
    pub checkpoint_every: Option<usize>,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 150,
            max_steps: None,
            slices: 16,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            loss: LossConfig::default(),
            window: (-400.0, 400.0),
            checkpoint_every: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.slices == 0 {
            return Err(Error::Config("slices per step must be >= 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
}

struct SliceWork<T: Float> {
    graph: Graph<T>,
    params: Bound,
    ctx: SliceContext,
    inter: Var,
    mass: Var,
    truth: Vec<f64>,
}

fn slice_targets<T: Float>(sample: &VolumeSample, z: usize) -> TResult<Tensor<T>> {
    let [_, h, w] = sample.shape;
    one_hot(
        &sample.labels[z * h * w..(z + 1) * h * w],
        &[h, w],
        sample.num_classes,
    )
}

fn add_into<T: Float>(acc: &mut Option<Tensor<T>>, g: Option<&Tensor<T>>) {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_assign(g),
            None => *acc = Some(g.clone()),
        }
    }
}

/// Parameter and context gradients of one slice graph.
type SliceGrads<T> = (Vec<Option<Tensor<T>>>, Vec<Option<Tensor<T>>>);

/// Loss and parameter gradients for one volume and a set of slices.
///
/// The context encoder runs once in its own graph; each slice gets an
/// independent graph (evaluated in parallel) whose context inputs are
/// leaves. The batch Dice couples slices only through per-class sums, so a
/// small combiner graph turns those sums into the loss and seeds each
/// slice's backward pass. Context gradients from all slices are summed in
/// slice order and fed back into the encoder graph together with the
/// auxiliary loss.
pub fn compute_gradients<T: Float>(
    model: &ScaaModel,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    sample: &VolumeSample,
    slices: &[usize],
    loss: &LossConfig,
) -> Result<(StepLosses, Vec<Tensor<T>>)> {
    let [d, h, w] = sample.shape;
    let c = sample.num_classes;
    if c != model.config.num_classes {
        return Err(Error::Config(format!(
            "sample has {c} classes, model expects {}",
            model.config.num_classes
        )));
    }
    if slices.is_empty() || slices.iter().any(|&z| z >= d) {
        return Err(Error::Config(format!(
            "slice indices {slices:?} invalid for depth {d}"
        )));
    }
    let ds = model.config.downsample;
    let mut g3 = Graph::new();
    let p3 = store.bind(&mut g3);
    let vol = g3.constant(image.clone().reshape(vec![1, d, h, w])?);
    let ctx = model.encode_3d(&mut g3, &p3, vol)?;
    let t3 = g3.constant(one_hot(
        &sample.downsampled_labels(ds),
        &[d / ds, h / ds, w / ds],
        c,
    )?);
    let l3d = dice_loss(&mut g3, ctx.aux, t3, loss)?;

    let g3r = &g3;
    let works: Vec<TResult<SliceWork<T>>> = slices
        .par_iter()
        .map(|&z| {
            let mut g = Graph::new();
            let params = store.bind(&mut g);
            let local = ctx.slice.import(g3r, &mut g, true);
            let x = g.constant(slice_of(image, z)?);
            let out = model.slice_forward(&mut g, &params, x, z, &local)?;
            let target = slice_targets::<T>(sample, z)?;
            let truth = (0..c)
                .map(|k| {
                    target.data()[k * h * w..(k + 1) * h * w]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum()
                })
                .collect();
            let t = g.constant(target);
            let (inter, mass) = partial_sums(&mut g, out.probs, t)?;
            Ok(SliceWork {
                graph: g,
                params,
                ctx: local,
                inter,
                mass,
                truth,
            })
        })
        .collect();
    let works = works.into_iter().collect::<TResult<Vec<_>>>()?;

    let mut gc = Graph::<T>::new();
    let leaves: Vec<(Var, Var)> = works
        .iter()
        .map(|wk| {
            (
                gc.leaf(wk.graph.value(wk.inter).clone(), true),
                gc.leaf(wk.graph.value(wk.mass).clone(), true),
            )
        })
        .collect();
    let (mut inter, mut mass) = leaves[0];
    for &(i, m) in &leaves[1..] {
        inter = gc.add(inter, i)?;
        mass = gc.add(mass, m)?;
    }
    let mut truth = vec![0.0; c];
    for wk in &works {
        for (t, v) in truth.iter_mut().zip(&wk.truth) {
            *t += v;
        }
    }
    let l2d = dice_from_sums(&mut gc, inter, mass, &truth, loss)?;
    let gcg = gc.backward(l2d)?;

    let slice_grads: Vec<TResult<SliceGrads<T>>> = works
        .into_par_iter()
        .zip(leaves.par_iter())
        .map(|(wk, &(li, lm))| {
            let seeds = vec![
                (wk.inter, gcg.get(li).cloned().expect("combiner grad")),
                (wk.mass, gcg.get(lm).cloned().expect("combiner grad")),
            ];
            let mut grads = wk.graph.backward_seeded(seeds)?;
            let params = wk.params.iter().map(|(_, v)| grads.take(v)).collect();
            let ctx = wk.ctx.vars().into_iter().map(|v| grads.take(v)).collect();
            Ok((params, ctx))
        })
        .collect();

    let ctx_vars = ctx.slice.vars();
    let mut param_acc: Vec<Option<Tensor<T>>> = vec![None; store.len()];
    let mut ctx_acc: Vec<Option<Tensor<T>>> = vec![None; ctx_vars.len()];
    for r in slice_grads {
        let (pg, cg) = r?;
        for (acc, g) in param_acc.iter_mut().zip(&pg) {
            add_into(acc, g.as_ref());
        }
        for (acc, g) in ctx_acc.iter_mut().zip(&cg) {
            add_into(acc, g.as_ref());
        }
    }

    let mut seeds = vec![(l3d, Tensor::full(vec![], T::one()))];
    for (v, g) in ctx_vars.iter().zip(ctx_acc) {
        if let Some(g) = g {
            seeds.push((*v, g));
        }
    }
    let g3grads = g3.backward_seeded(seeds)?;
    for (acc, (_, v)) in param_acc.iter_mut().zip(p3.iter()) {
        add_into(acc, g3grads.get(v));
    }
    let grads = param_acc
        .into_iter()
        .zip(store.iter())
        .map(|(g, (_, p))| g.unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec())))
        .collect();

    let l2 = gc.value(l2d).item().as_f64();
    let l3 = g3.value(l3d).item().as_f64();
    Ok((
        StepLosses {
            l2d: l2,
            l3d: l3,
            total: l2 + l3,
        },
        grads,
    ))
}

/// The same loss built as one graph, for gradient checking and for
/// cross-checking [`compute_gradients`]. Returns `(l2d, l3d, total)`.
pub fn loss_graph<T: Float>(
    model: &ScaaModel,
    g: &mut Graph<T>,
    p: &Bound,
    image: &Tensor<T>,
    sample: &VolumeSample,
    slices: &[usize],
    loss: &LossConfig,
) -> TResult<(Var, Var, Var)> {
    let [d, h, w] = sample.shape;
    let c = sample.num_classes;
    let ds = model.config.downsample;
    let vol = g.constant(image.clone().reshape(vec![1, d, h, w])?);
    let ctx = model.encode_3d(g, p, vol)?;
    let t3 = g.constant(one_hot(
        &sample.downsampled_labels(ds),
        &[d / ds, h / ds, w / ds],
        c,
    )?);
    let l3d = dice_loss(g, ctx.aux, t3, loss)?;
    let mut sums: Option<(Var, Var)> = None;
    let mut truth = vec![0.0; c];
    for &z in slices {
        let x = g.constant(slice_of(image, z)?);
        let out = model.slice_forward(g, p, x, z, &ctx.slice)?;
        let target = slice_targets::<T>(sample, z)?;
        for (k, t) in truth.iter_mut().enumerate() {
            *t += target.data()[k * h * w..(k + 1) * h * w]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let tv = g.constant(target);
        let (i, m) = partial_sums(g, out.probs, tv)?;
        sums = Some(match sums {
            None => (i, m),
            Some((ai, am)) => (g.add(ai, i)?, g.add(am, m)?),
        });
    }
    let (inter, mass) = sums.ok_or(crate::error::TensorError::InvalidArgument {
        op: "loss_graph",
        msg: "no slices".into(),
    })?;
    let l2d = dice_from_sums(g, inter, mass, &truth, loss)?;
    let total = g.add(l2d, l3d)?;
    Ok((l2d, l3d, total))
}

fn finite_or_abort(
    step: usize,
    losses: &StepLosses,
    grads_finite: bool,
    detail: impl FnOnce() -> String,
) -> Result<()> {
    if losses.total.is_finite() && grads_finite {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        step,
        detail: format!(
            "l2d={} l3d={} gradients_finite={} {}",
            losses.l2d,
            losses.l3d,
            grads_finite,
            detail()
        ),
    })
}

/// One optimizer step on one volume.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    model: &ScaaModel,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    sample: &VolumeSample,
    slices: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLosses> {
    let image = sample.normalized(cfg.window).cast::<T>();
    let (losses, grads) = compute_gradients(model, store, &image, sample, slices, &cfg.loss)?;
    let finite = grads.iter().all(Tensor::all_finite);
    finite_or_abort(step, &losses, finite, || {
        format!("volume={} slices={slices:?}", sample.id)
    })?;
    adam.step(store, &grads, cfg.lr)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l2d: f64,
    pub l3d: f64,
    pub total: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl<T: Float> TrainState<T> {
    pub fn new(store: ParamStore<T>) -> Self {
        let adam = Adam::new(&store);
        Self {
            store,
            adam,
            step: 0,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Volume index, augmentation seed and slices used at global step `step`.
/// Pure in `(seed, step)`, so resumed runs draw the same batches.
pub fn step_plan(
    cfg: &TrainConfig,
    dataset: &[VolumeSample],
    step: usize,
) -> (usize, u64, Vec<usize>) {
    let dataset_len = dataset.len();
    let epoch = step / dataset_len;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut rng_for(cfg.seed, (1 << 40) | epoch as u64));
    let volume = order[step % dataset_len];
    let depth = dataset[volume].shape[0];
    let mut rng = rng_for(cfg.seed, step as u64);
    let aug_seed = rand::Rng::random(&mut rng);
    let mut slices = sample_indices(&mut rng, depth, cfg.slices.min(depth)).into_vec();
    slices.sort_unstable();
    (volume, aug_seed, slices)
}

pub fn total_steps(cfg: &TrainConfig, dataset_len: usize) -> usize {
    let full = cfg.epochs * dataset_len;
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Runs from `state.step` to the configured end. `on_step` sees the state
/// after every update (checkpointing hooks in here).
pub fn train<T: Float>(
    model: &ScaaModel,
    state: &mut TrainState<T>,
    dataset: &[VolumeSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState<T>, &LogRow) -> Result<()>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let end = total_steps(cfg, dataset.len());
    let mut rows = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let started = Instant::now();
        let step = state.step;
        let (vi, aug_seed, slices) = step_plan(cfg, dataset, step);
        let base = &dataset[vi];
        let sample = match &cfg.augment {
            Some(a) => augment(base, a, aug_seed),
            None => base.clone(),
        };
        let losses = train_step(
            model,
            &mut state.store,
            &mut state.adam,
            &sample,
            &slices,
            cfg,
            step,
        )?;
        state.step += 1;
        let row = LogRow {
            step: state.step,
            l2d: losses.l2d,
            l3d: losses.l3d,
            total: losses.total,
            wall_ms: cfg
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        on_step(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// `[D, H, W]` labels, `0` background.
    pub labels: Vec<u8>,
    pub report: Option<MetricReport>,
    pub attention: Vec<AttentionRecord>,
}

/// Per-voxel decision: among classes with probability above 0.5 the most
/// probable wins; otherwise background.
pub fn decide<T: Float>(mask: &Tensor<T>) -> Vec<u8> {
    let s = mask.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let half = T::lit(0.5);
    (0..n)
        .map(|i| {
            let mut best = 0u8;
            let mut best_p = half;
            for k in 0..c {
                let p = mask.data()[k * n + i];
                if p > best_p {
                    best_p = p;
                    best = (k + 1) as u8;
                }
            }
            best
        })
        .collect()
}

/// Segments every slice of `sample`; with `with_metrics`, scores against its labels.
pub fn infer<T: Float>(
    model: &ScaaModel,
    store: &ParamStore<T>,
    sample: &VolumeSample,
    window: (f64, f64),
    with_metrics: bool,
) -> Result<Inference> {
    let [d, _, _] = sample.shape;
    let image = sample.normalized(window).cast::<T>();
    let all: Vec<usize> = (0..d).collect();
    let fwd = model.forward(store, &image, &all)?;
    let mut labels = Vec::with_capacity(sample.len());
    for m in &fwd.masks {
        labels.extend(decide(m));
    }
    let report = if with_metrics {
        Some(evaluate(
            &labels,
            &sample.labels,
            sample.shape,
            sample.num_classes,
            sample.spacing,
        )?)
    } else {
        None
    };
    Ok(Inference {
        labels,
        report,
        attention: fwd.attention,
    })
}

/// Finite-difference check of every parameter tensor of `model` on the
/// full loss (both heads), at 64-bit.
pub fn grad_check(
    model: &ScaaModel,
    store: &ParamStore<f64>,
    sample: &VolumeSample,
    slices: &[usize],
    loss: &LossConfig,
    window: (f64, f64),
    cfg: &CheckConfig,
) -> Result<CheckReport> {
    let image = sample.normalized(window).cast::<f64>();
    let inputs: Vec<(String, Tensor<f64>)> = store
        .iter()
        .map(|(k, p)| (k.to_string(), (*p.value).clone()))
        .collect();
    let names: Vec<String> = inputs.iter().map(|(k, _)| k.clone()).collect();
    let report = gradcheck::check(
        &inputs,
        |g, vars| {
            let p = Bound::from_pairs(names.iter().map(String::as_str).zip(vars.iter().copied()));
            let (_, _, total) = loss_graph(model, g, &p, &image, sample, slices, loss)?;
            Ok(total)
        },
        cfg,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaaConfig;
    use crate::synth::{generate, PhantomSpec};

    #[test]
    fn split_gradients_match_single_graph() {
        let cfg = ScaaConfig::micro(3);
        let (model, store) = ScaaModel::init::<f64>(cfg, 5).unwrap();
        let sample = generate(&PhantomSpec::micro().with_seed(1)).unwrap();
        let image = sample.normalized((-400.0, 400.0));
        let image = image.cast::<f64>();
        let slices = [3, 17, 30];
        let loss = LossConfig::default();
        let (losses, grads) =
            compute_gradients(&model, &store, &image, &sample, &slices, &loss).unwrap();

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (l2d, l3d, total) =
            loss_graph(&model, &mut g, &p, &image, &sample, &slices, &loss).unwrap();
        assert!((g.value(l2d).item() - losses.l2d).abs() < 1e-12);
        assert!((g.value(l3d).item() - losses.l3d).abs() < 1e-12);
        let mono = g.backward(total).unwrap();
        for ((name, v), split) in p.iter().zip(&grads) {
            let reference = mono.get(v).unwrap();
            for (a, b) in reference.data().iter().zip(split.data()) {
                assert!(
                    (a - b).abs() <= 1e-10 * (1.0 + a.abs()),
                    "{name}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn model_check_flags_sign_flipped_conv_gradients() {
        let (model, store) = ScaaModel::init::<f64>(ScaaConfig::micro(3), 0).unwrap();
        let sample = generate(&PhantomSpec::micro().with_seed(0)).unwrap();
        let cfg = CheckConfig {
            samples_per_tensor: 2,
            fault: Some(crate::graph::Fault::NegateConvWeightGrad),
            ..Default::default()
        };
        let report = grad_check(
            &model,
            &store,
            &sample,
            &[8],
            &LossConfig::default(),
            (-400.0, 400.0),
            &cfg,
        )
        .unwrap();
        let convs = report
            .tensors
            .iter()
            .filter(|t| t.name.ends_with("weight") && t.name.contains("conv"))
            .count();
        let bad = report.failures(1e-4);
        assert!(bad.iter().all(|t| t.name.ends_with("weight")), "{bad:?}");
        assert!(2 * bad.len() > convs, "{} of {convs} flagged", bad.len());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (model, store) = ScaaModel::init::<f32>(ScaaConfig::micro(3), 2).unwrap();
        let sample = generate(&PhantomSpec::micro().with_seed(2)).unwrap();
        let mut state = TrainState::new(store.clone());
        let cfg = TrainConfig {
            lr: 0.0,
            slices: 2,
            augment: None,
            ..Default::default()
        };
        train_step(
            &model,
            &mut state.store,
            &mut state.adam,
            &sample,
            &[1, 2],
            &cfg,
            0,
        )
        .unwrap();
        for ((_, a), (_, b)) in store.iter().zip(state.store.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}
