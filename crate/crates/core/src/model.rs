//! The segmentation network: 3D context encoder, 2D slice encoder,
//! cross-dimensional slice attention, and 2D decoder.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv, ConvBlock2d, ConvUnit, Dims, ParamStore, ResidualBlock3d};
use crate::ops::resample::UpsampleMode;
use crate::tensor::{Float, Tensor};

static ENCODE_3D_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of `encode_3d` evaluations since process start.
pub fn encode_3d_calls() -> usize {
    ENCODE_3D_CALLS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Global descriptor only.
    Ca,
    /// Centre-slice fusion without attention.
    Cca,
    /// Attention plus global descriptor.
    Scaa,
    /// Attention without global descriptor.
    ScaaStar,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ca, Variant::Cca, Variant::Scaa, Variant::ScaaStar];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ca => "ca",
            Variant::Cca => "cca",
            Variant::Scaa => "scaa",
            Variant::ScaaStar => "scaa-star",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Ca => "CA",
            Variant::Cca => "C-CA",
            Variant::Scaa => "SCAA",
            Variant::ScaaStar => "SCAA*",
        }
    }

    pub fn attends(self) -> bool {
        matches!(self, Variant::Scaa | Variant::ScaaStar)
    }

    /// Whether 3D context is fused into the 2D features at scales 2..5.
    pub fn fuses(self) -> bool {
        self != Variant::Ca
    }

    pub fn uses_globe(self) -> bool {
        matches!(self, Variant::Ca | Variant::Scaa)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(Variant::Ca),
            "cca" | "c-ca" => Ok(Variant::Cca),
            "scaa" => Ok(Variant::Scaa),
            "scaa-star" | "scaa*" => Ok(Variant::ScaaStar),
            _ => Err(format!(
                "unknown variant '{s}' (expected ca, cca, scaa or scaa-star)"
            )),
        }
    }
}

/// Architecture hyperparameters. Per-scale lists index scales 2..5
/// (length 4) or 1..5 (length 5).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaaConfig {
    pub num_classes: usize,
    pub downsample: usize,
    pub c3d: [usize; 4],
    pub c2d: [usize; 5],
    pub fused: [usize; 5],
    /// Per-head embedding width.
    pub embed: [usize; 4],
    pub heads: [usize; 4],
    pub pool: [usize; 4],
    pub variant: Variant,
}

impl ScaaConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            downsample: 2,
            c3d: [24, 32, 64, 64],
            c2d: [64, 96, 128, 192, 256],
            fused: [64, 96, 128, 192, 256],
            embed: [2, 2, 4, 4],
            heads: [2, 2, 4, 4],
            pool: [16, 8, 4, 4],
            variant: Variant::Scaa,
        }
    }

    /// Reduced widths for CPU training on 64³ phantoms.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            downsample: 2,
            c3d: [8, 12, 16, 16],
            c2d: [16, 24, 32, 48, 64],
            fused: [16, 24, 32, 48, 64],
            embed: [2, 2, 4, 4],
            heads: [2, 2, 4, 4],
            pool: [16, 8, 4, 4],
            variant: Variant::ScaaStar,
        }
    }

    /// Smallest configuration exercising every code path; used for gradient checks.
    pub fn micro(num_classes: usize) -> Self {
        Self {
            num_classes,
            downsample: 2,
            c3d: [2, 2, 2, 2],
            c2d: [2, 2, 2, 2, 2],
            fused: [2, 2, 2, 2, 2],
            embed: [2, 2, 2, 2],
            heads: [1, 1, 2, 2],
            pool: [4, 4, 2, 2],
            variant: Variant::Scaa,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| TensorError::InvalidArgument { op: "config", msg };
        let all = self
            .c3d
            .iter()
            .chain(&self.c2d)
            .chain(&self.fused)
            .chain(&self.embed)
            .chain(&self.heads)
            .chain(&self.pool);
        if self.num_classes == 0 || all.clone().any(|&v| v == 0) {
            return Err(bad(
                "all widths, heads, pool sizes and the class count must be >= 1".into(),
            ));
        }
        if !self.downsample.is_power_of_two() {
            return Err(bad(format!(
                "downsample {} is not a power of two",
                self.downsample
            )));
        }
        if self.c3d[3] != self.c3d[2] {
            return Err(bad(format!(
                "scale-5 context channels ({}) must equal scale-4 ({}): scale 5 is the pooled scale-4 map",
                self.c3d[3], self.c3d[2]
            )));
        }
        if self.fused[0] != self.c2d[0] {
            return Err(bad(
                "fused scale-1 width must equal the 2D scale-1 width".into()
            ));
        }
        Ok(())
    }

    /// Channels of the decoder input feature `F_i` at scale index `s` (0 = scale 1).
    pub fn feature_channels(&self, s: usize) -> usize {
        if s == 0 || !self.variant.fuses() {
            self.c2d[s]
        } else {
            self.fused[s]
        }
    }

    /// Input extents must be multiples of this along every axis.
    pub fn volume_multiple(&self) -> usize {
        self.downsample * 16
    }

    /// Context-map depth index matching full-resolution slice `z` at scale index `s`.
    pub fn center_index(&self, z: usize, s: usize, depth: usize) -> usize {
        let factor = self.downsample << (s + 1);
        (z / factor).min(depth.saturating_sub(1))
    }

    pub fn globe_channels(&self) -> usize {
        if self.variant.uses_globe() {
            self.c3d[3]
        } else {
            0
        }
    }
}

/// One attention vector over context depth.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Scale number, 2..=5.
    pub scale: usize,
    pub slice_z: usize,
    pub head: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| -w * w.ln())
            .sum()
    }

    pub fn is_one_hot(&self) -> bool {
        self.weights.iter().filter(|&&w| w == 1.0).count() == 1
            && self.weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Mass on the `k` positions nearest `center` (a window of `k`, shifted to stay in range).
    pub fn mass_near(&self, center: usize, k: usize) -> f64 {
        let n = self.weights.len();
        let k = k.min(n);
        let start = center.saturating_sub(k / 2).min(n - k);
        self.weights[start..start + k].iter().sum()
    }
}

#[derive(Clone, Debug)]
struct FusionBlock {
    query: Option<Conv>,
    key: Option<Conv>,
    merge: Option<Conv>,
    units: [ConvUnit; 2],
}

/// Layer layout of one configuration. Holds parameter names only; values
/// live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ScaaModel {
    pub config: ScaaConfig,
    stem: ResidualBlock3d,
    stages: Vec<[ResidualBlock3d; 2]>,
    aux: Conv,
    enc2d: Vec<ConvBlock2d>,
    fusion: Vec<Option<FusionBlock>>,
    dec: Vec<ConvUnit>,
    head: Conv,
}

/// Context-encoder outputs living in one graph.
#[derive(Clone, Debug)]
pub struct SliceContext {
    pub f3d: [Var; 4],
    pub keys: [Option<Var>; 4],
    pub globe: Option<Var>,
}

impl SliceContext {
    /// Re-creates the context as leaves of another graph.
    pub fn import<T: Float>(
        &self,
        from: &Graph<T>,
        to: &mut Graph<T>,
        requires_grad: bool,
    ) -> SliceContext {
        let mut leaf = |v: Var| to.leaf_shared(from.shared(v), requires_grad);
        SliceContext {
            f3d: self.f3d.map(&mut leaf),
            keys: self.keys.map(|k| k.map(&mut leaf)),
            globe: self.globe.map(&mut leaf),
        }
    }

    /// Every var in a fixed order: f3d, present keys, globe.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.f3d.to_vec();
        v.extend(self.keys.iter().flatten());
        v.extend(self.globe);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Context3d {
    pub slice: SliceContext,
    /// Auxiliary per-class probabilities at the downsampled volume resolution.
    pub aux: Var,
}

#[derive(Clone, Debug)]
pub struct SliceOut {
    /// `[C, H, W]` per-class probabilities.
    pub probs: Var,
    /// `(scale index 0..4, head, weights)`.
    pub attention: Vec<(usize, usize, Var)>,
}

/// Result of [`ScaaModel::forward`].
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// One `[C, H, W]` probability map per requested slice.
    pub masks: Vec<Tensor<T>>,
    /// `[C, D/ds, H/ds, W/ds]` auxiliary probabilities.
    pub aux: Tensor<T>,
    pub attention: Vec<AttentionRecord>,
}

fn upsample_by<T: Float>(
    g: &mut Graph<T>,
    mut x: Var,
    factor: usize,
    mode: UpsampleMode,
    axes: &[usize],
) -> Result<Var> {
    let mut f = factor;
    while f > 1 {
        x = g.upsample2x(x, mode, axes)?;
        f /= 2;
    }
    Ok(x)
}

/// Scaled dot-product attention of one query map against per-depth keys,
/// followed by the depth-weighted sum of the context map.
///
/// `query: [heads*e, h, w]`, `keys: [heads*e, D, h, w]`, `context: [C, D, H, W]`.
/// Returns per-head attention vectors `[D]` and aggregated maps `[C, H, W]`.
pub fn attend<T: Float>(
    g: &mut Graph<T>,
    query: Var,
    keys: Var,
    context: Var,
    heads: usize,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let qs = g.shape(query).to_vec();
    let ks = g.shape(keys).to_vec();
    if qs.len() != 3
        || ks.len() != 4
        || qs[0] != ks[0]
        || qs[1..] != ks[2..]
        || !qs[0].is_multiple_of(heads)
    {
        return Err(TensorError::InvalidArgument {
            op: "attend",
            msg: format!("query {qs:?} and keys {ks:?} do not describe {heads} heads"),
        });
    }
    let e = qs[0] / heads;
    let scale = 1.0 / ((e * qs[1] * qs[2]) as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut aggregated = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.narrow(query, 0, h * e, e)?;
        let k = g.narrow(keys, 0, h * e, e)?;
        let r = g.contract("edhw,ehw->d", k, q)?;
        let r = g.mul_scalar(r, scale);
        let a = g.softmax(r, 0)?;
        let agg = g.contract("cdhw,d->chw", context, a)?;
        weights.push(a);
        aggregated.push(agg);
    }
    Ok((weights, aggregated))
}

impl ScaaModel {
    pub fn new<T: Float>(config: ScaaConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let stem = ResidualBlock3d::new(store, "ctx.stem", 1, c.c3d[0])?;
        let mut stages = Vec::with_capacity(3);
        let mut prev = c.c3d[0];
        for s in 0..3 {
            let out = c.c3d[s];
            stages.push([
                ResidualBlock3d::new(store, &format!("ctx.stage{s}.0"), prev, out)?,
                ResidualBlock3d::new(store, &format!("ctx.stage{s}.1"), out, out)?,
            ]);
            prev = out;
        }
        let aux = Conv::new(store, "ctx.aux", Dims::Three, c.c3d[3], c.num_classes, 1)?;

        let mut enc2d = Vec::with_capacity(5);
        let mut prev = 1;
        for s in 0..5 {
            enc2d.push(ConvBlock2d::new(
                store,
                &format!("enc.{s}"),
                prev,
                c.c2d[s],
                false,
            )?);
            prev = c.c2d[s];
        }

        let mut fusion = Vec::with_capacity(4);
        for s in 0..4 {
            if !c.variant.fuses() {
                fusion.push(None);
                continue;
            }
            let (c2, c3, width) = (c.c2d[s + 1], c.c3d[s], c.heads[s] * c.embed[s]);
            let p = format!("msfa.{s}");
            let (query, key, merge) = if c.variant.attends() {
                (
                    Some(Conv::new(
                        store,
                        format!("{p}.query"),
                        Dims::Two,
                        c2,
                        width,
                        1,
                    )?),
                    Some(Conv::new(
                        store,
                        format!("{p}.key"),
                        Dims::Three,
                        c3,
                        width,
                        1,
                    )?),
                    Some(Conv::new(
                        store,
                        format!("{p}.merge"),
                        Dims::Two,
                        c.heads[s] * c3,
                        c3,
                        1,
                    )?),
                )
            } else {
                (None, None, None)
            };
            let out = c.fused[s + 1];
            let units = [
                ConvUnit::new(store, &format!("{p}.fuse.0"), Dims::Two, c2 + c3, out)?,
                ConvUnit::new(store, &format!("{p}.fuse.1"), Dims::Two, out, out)?,
            ];
            fusion.push(Some(FusionBlock {
                query,
                key,
                merge,
                units,
            }));
        }

        let mut dec = Vec::with_capacity(4);
        for s in 0..4 {
            let cin = c.feature_channels(s + 1) + c.feature_channels(s);
            dec.push(ConvUnit::new(
                store,
                &format!("dec.{s}"),
                Dims::Two,
                cin,
                c.feature_channels(s),
            )?);
        }
        let head = Conv::new(
            store,
            "head",
            Dims::Two,
            c.feature_channels(0) + c.globe_channels(),
            c.num_classes,
            1,
        )?;
        Ok(Self {
            config,
            stem,
            stages,
            aux,
            enc2d,
            fusion,
            dec,
            head,
        })
    }

    /// Builds the layout and a freshly initialized parameter store.
    pub fn init<T: Float>(config: ScaaConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store)?;
        store.init(seed);
        Ok((model, store))
    }

    pub fn check_volume_shape(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.volume_multiple();
        for (axis, &e) in shape.iter().enumerate().skip(shape.len().saturating_sub(3)) {
            if e == 0 || e % m != 0 {
                return Err(TensorError::NotDivisible {
                    op: "volume",
                    axis,
                    extent: e,
                    factor: m,
                });
            }
        }
        Ok(())
    }

    /// Context encoder on a `[1, D, H, W]` volume.
    pub fn encode_3d<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        volume: Var,
    ) -> Result<Context3d> {
        ENCODE_3D_CALLS.fetch_add(1, Ordering::SeqCst);
        let shape = g.shape(volume).to_vec();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(TensorError::InvalidArgument {
                op: "encode_3d",
                msg: format!("expected a [1, D, H, W] volume, got {shape:?}"),
            });
        }
        self.check_volume_shape(&shape)?;
        let ds = self.config.downsample;
        let x = g.adaptive_avg_pool(volume, &[shape[1] / ds, shape[2] / ds, shape[3] / ds])?;
        let x = self.stem.forward(g, p, x)?;
        let mut x = g.maxpool(x, &[2, 2, 2])?;
        let mut f3d = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage[0].forward(g, p, x)?;
            x = stage[1].forward(g, p, x)?;
            f3d.push(x);
            x = g.maxpool(x, &[2, 2, 2])?;
        }
        f3d.push(x);
        let f3d: [Var; 4] = [f3d[0], f3d[1], f3d[2], f3d[3]];

        let mut keys = [None; 4];
        for (s, block) in self.fusion.iter().enumerate() {
            if let Some(key) = block.as_ref().and_then(|b| b.key.as_ref()) {
                let k = key.forward(g, p, f3d[s])?;
                let ks = g.shape(k).to_vec();
                let (ph, pw) = self.pool_extent(s, ks[2], ks[3]);
                keys[s] = Some(g.adaptive_avg_pool(k, &[ph, pw])?);
            }
        }
        let globe = if self.config.variant.uses_globe() {
            let c = self.config.c3d[3];
            let pooled = g.adaptive_avg_pool(f3d[3], &[1, 1, 1])?;
            Some(g.reshape(pooled, &[c])?)
        } else {
            None
        };
        let logits = self.aux.forward(g, p, f3d[3])?;
        let up = upsample_by(g, logits, 16, UpsampleMode::Nearest, &[1, 2, 3])?;
        let aux = g.sigmoid(up);
        Ok(Context3d {
            slice: SliceContext { f3d, keys, globe },
            aux,
        })
    }

    fn pool_extent(&self, s: usize, h: usize, w: usize) -> (usize, usize) {
        (self.config.pool[s].min(h), self.config.pool[s].min(w))
    }

    /// 2D encoder on a `[1, H, W]` slice; returns the pre-pool output of every block.
    pub fn encode_2d<T: Float>(&self, g: &mut Graph<T>, p: &Bound, slice: Var) -> Result<Vec<Var>> {
        let shape = g.shape(slice).to_vec();
        if shape.len() != 3
            || shape[0] != 1
            || !shape[1].is_multiple_of(16)
            || !shape[2].is_multiple_of(16)
        {
            return Err(TensorError::InvalidArgument {
                op: "encode_2d",
                msg: format!("expected a [1, H, W] slice with H, W divisible by 16, got {shape:?}"),
            });
        }
        let mut out = Vec::with_capacity(5);
        let mut x = slice;
        for (s, block) in self.enc2d.iter().enumerate() {
            if s > 0 {
                x = g.maxpool(x, &[2, 2])?;
            }
            x = block.forward(g, p, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Fuses context into the 2D feature at scale index `s` (scale `s + 2`).
    /// Returns the fused feature and `(head, weights)` pairs.
    pub fn msfa<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        s: usize,
        f2d: Var,
        ctx: &SliceContext,
        z: usize,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        let Some(block) = self.fusion.get(s).and_then(Option::as_ref) else {
            return Ok((f2d, Vec::new()));
        };
        let f3d = ctx.f3d[s];
        let depth = g.shape(f3d)[1];
        let (merged, records) = match (&block.query, &block.merge) {
            (Some(query), Some(merge)) => {
                let keys = ctx.keys[s].ok_or(TensorError::InvalidArgument {
                    op: "msfa",
                    msg: format!("context has no keys at scale {}", s + 2),
                })?;
                let q = query.forward(g, p, f2d)?;
                let ks = g.shape(keys).to_vec();
                let q = g.adaptive_avg_pool(q, &[ks[2], ks[3]])?;
                let (weights, agg) = attend(g, q, keys, f3d, self.config.heads[s])?;
                let cat = if agg.len() == 1 {
                    agg[0]
                } else {
                    g.concat(&agg, 0)?
                };
                let merged = merge.forward(g, p, cat)?;
                (merged, weights.into_iter().enumerate().collect())
            }
            _ => {
                let idx = self.config.center_index(z, s, depth);
                let mut onehot = Tensor::zeros(vec![depth]);
                onehot.data_mut()[idx] = T::one();
                let a = g.constant(onehot);
                let agg = g.contract("cdhw,d->chw", f3d, a)?;
                (agg, vec![(0, a)])
            }
        };
        let up = upsample_by(
            g,
            merged,
            self.config.downsample,
            UpsampleMode::Linear,
            &[1, 2],
        )?;
        let cat = g.concat(&[f2d, up], 0)?;
        let y = block.units[0].forward(g, p, cat)?;
        let y = block.units[1].forward(g, p, y)?;
        Ok((y, records))
    }

    /// Decoder from `F_1..F_5` to `[C, H, W]` probabilities.
    pub fn decode_2d<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feats: &[Var],
        globe: Option<Var>,
    ) -> Result<Var> {
        if feats.len() != 5 {
            return Err(TensorError::InvalidArgument {
                op: "decode_2d",
                msg: format!("expected 5 scale features, got {}", feats.len()),
            });
        }
        let mut x = feats[4];
        for s in (0..4).rev() {
            let up = g.upsample2x(x, UpsampleMode::Nearest, &[1, 2])?;
            let cat = g.concat(&[up, feats[s]], 0)?;
            x = self.dec[s].forward(g, p, cat)?;
        }
        if self.config.variant.uses_globe() {
            let globe = globe.ok_or(TensorError::InvalidArgument {
                op: "decode_2d",
                msg: "variant needs the global descriptor".into(),
            })?;
            let shape = g.shape(x).to_vec();
            let ones = g.constant(Tensor::ones(vec![shape[1], shape[2]]));
            let plane = g.contract("c,hw->chw", globe, ones)?;
            x = g.concat(&[x, plane], 0)?;
        }
        let logits = self.head.forward(g, p, x)?;
        Ok(g.sigmoid(logits))
    }

    /// One slice through encoder, fusion and decoder.
    pub fn slice_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        slice: Var,
        z: usize,
        ctx: &SliceContext,
    ) -> Result<SliceOut> {
        let f2d = self.encode_2d(g, p, slice)?;
        let mut feats = vec![f2d[0]];
        let mut attention = Vec::new();
        for s in 0..4 {
            let (f, rec) = self.msfa(g, p, s, f2d[s + 1], ctx, z)?;
            feats.push(f);
            attention.extend(rec.into_iter().map(|(h, v)| (s, h, v)));
        }
        let probs = self.decode_2d(g, p, &feats, ctx.globe)?;
        Ok(SliceOut { probs, attention })
    }

    /// Inference on a `[D, H, W]` volume: context once, then every requested slice
    /// in its own graph.
    pub fn forward<T: Float>(
        &self,
        store: &ParamStore<T>,
        volume: &Tensor<T>,
        slices: &[usize],
    ) -> Result<Forward<T>> {
        use rayon::prelude::*;

        let shape = volume.shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "forward",
                msg: format!("expected a [D, H, W] volume, got {shape:?}"),
            });
        }
        if let Some(&z) = slices.iter().find(|&&z| z >= shape[0]) {
            return Err(TensorError::InvalidArgument {
                op: "forward",
                msg: format!("slice index {z} out of range for depth {}", shape[0]),
            });
        }
        let mut g3 = Graph::new();
        let p3 = store.bind_with(&mut g3, false);
        let v = g3.constant(
            volume
                .clone()
                .reshape(vec![1, shape[0], shape[1], shape[2]])?,
        );
        let ctx = self.encode_3d(&mut g3, &p3, v)?;
        let aux = g3.value(ctx.aux).clone();
        let g3 = &g3;
        let per_slice: Vec<Result<(Tensor<T>, Vec<AttentionRecord>)>> = slices
            .par_iter()
            .map(|&z| {
                let mut g = Graph::new();
                let p = store.bind_with(&mut g, false);
                let local = ctx.slice.import(g3, &mut g, false);
                let x = g.constant(slice_of(volume, z)?);
                let out = self.slice_forward(&mut g, &p, x, z, &local)?;
                let records = out
                    .attention
                    .iter()
                    .map(|&(s, head, a)| AttentionRecord {
                        scale: s + 2,
                        slice_z: z,
                        head,
                        weights: g.value(a).data().iter().map(|v| v.as_f64()).collect(),
                    })
                    .collect();
                Ok((Arc::unwrap_or_clone(g.shared(out.probs)), records))
            })
            .collect();
        let mut masks = Vec::with_capacity(slices.len());
        let mut attention = Vec::new();
        for r in per_slice {
            let (m, a) = r?;
            masks.push(m);
            attention.extend(a);
        }
        Ok(Forward {
            masks,
            aux,
            attention,
        })
    }
}

/// `[1, H, W]` copy of depth slice `z` of a `[D, H, W]` volume.
pub fn slice_of<T: Float>(volume: &Tensor<T>, z: usize) -> Result<Tensor<T>> {
    let s = volume.shape();
    let plane = s[1] * s[2];
    Tensor::new(
        vec![1, s[1], s[2]],
        volume.data()[z * plane..(z + 1) * plane].to_vec(),
    )
}

/// Learnable scalar count of a configuration, computed from the widths alone.
pub fn count_parameters(c: &ScaaConfig) -> usize {
    let mut n = ResidualBlock3d::param_count(1, c.c3d[0]);
    let mut prev = c.c3d[0];
    for s in 0..3 {
        n += ResidualBlock3d::param_count(prev, c.c3d[s])
            + ResidualBlock3d::param_count(c.c3d[s], c.c3d[s]);
        prev = c.c3d[s];
    }
    n += Conv::param_count(Dims::Three, c.c3d[3], c.num_classes, 1);
    let mut prev = 1;
    for s in 0..5 {
        n += ConvBlock2d::param_count(prev, c.c2d[s]);
        prev = c.c2d[s];
    }
    if c.variant.fuses() {
        for s in 0..4 {
            let (c2, c3, width) = (c.c2d[s + 1], c.c3d[s], c.heads[s] * c.embed[s]);
            if c.variant.attends() {
                n += Conv::param_count(Dims::Two, c2, width, 1)
                    + Conv::param_count(Dims::Three, c3, width, 1)
                    + Conv::param_count(Dims::Two, c.heads[s] * c3, c3, 1);
            }
            n += ConvUnit::param_count(Dims::Two, c2 + c3, c.fused[s + 1])
                + ConvUnit::param_count(Dims::Two, c.fused[s + 1], c.fused[s + 1]);
        }
    }
    for s in 0..4 {
        n += ConvUnit::param_count(
            Dims::Two,
            c.feature_channels(s + 1) + c.feature_channels(s),
            c.feature_channels(s),
        );
    }
    n + Conv::param_count(
        Dims::Two,
        c.feature_channels(0) + c.globe_channels(),
        c.num_classes,
        1,
    )
}
