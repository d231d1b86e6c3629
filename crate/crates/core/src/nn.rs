//! Parameter storage and the convolutional building blocks.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    NormGamma,
    NormBeta,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

/// Ordered name -> tensor map. Insertion order is the serialization and
/// optimizer-state order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::InvalidArgument {
                op: "register",
                msg: format!("duplicate parameter name '{name}'"),
            });
        }
        let fill = match kind {
            ParamKind::NormGamma => T::one(),
            _ => T::zero(),
        };
        let value = Arc::new(Tensor::full(shape, fill));
        self.params.insert(name, Param { value, kind });
        Ok(())
    }

    /// Kaiming-uniform conv weights (fan-in), zero biases, unit gamma, zero beta.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.values_mut() {
            let t = Arc::make_mut(&mut p.value);
            match p.kind {
                ParamKind::ConvWeight { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = T::lit(rng.random_range(-bound..bound));
                    }
                }
                ParamKind::Bias | ParamKind::NormBeta => t.data_mut().fill(T::zero()),
                ParamKind::NormGamma => t.data_mut().fill(T::one()),
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| p.value.as_ref())
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set parameter",
                expected: p.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    pub fn bind_with(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    g.leaf_shared(Arc::clone(&p.value), requires_grad),
                )
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter name -> graph leaf for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn by_name(&self) -> HashMap<&str, Var> {
        self.iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three,
}

impl Dims {
    fn kernel_shape(self, c_out: usize, c_in: usize, k: usize) -> Vec<usize> {
        match self {
            Dims::Two => vec![c_out, c_in, k, k],
            Dims::Three => vec![c_out, c_in, k, k, k],
        }
    }

    fn taps(self, k: usize) -> usize {
        match self {
            Dims::Two => k * k,
            Dims::Three => k * k * k,
        }
    }
}

/// Convolution with bias, "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub dims: Dims,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: impl Into<String>,
        dims: Dims,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let prefix = prefix.into();
        let fan_in = c_in * dims.taps(kernel);
        store.register(
            format!("{prefix}.weight"),
            dims.kernel_shape(c_out, c_in, kernel),
            ParamKind::ConvWeight { fan_in },
        )?;
        store.register(format!("{prefix}.bias"), vec![c_out], ParamKind::Bias)?;
        Ok(Self {
            prefix,
            dims,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn param_count(dims: Dims, c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * dims.taps(kernel) + c_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&format!("{}.weight", self.prefix))?;
        let b = p.var(&format!("{}.bias", self.prefix))?;
        let pad = self.kernel / 2;
        match self.dims {
            Dims::Two => g.conv2d(x, w, Some(b), 1, pad),
            Dims::Three => g.conv3d(x, w, Some(b), 1, pad),
        }
    }
}

/// conv -> instance norm -> relu.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    norm: String,
}

impl ConvUnit {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: Dims,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let conv = Conv::new(store, format!("{prefix}.conv"), dims, c_in, c_out, 3)?;
        let norm = format!("{prefix}.norm");
        store.register(format!("{norm}.gamma"), vec![c_out], ParamKind::NormGamma)?;
        store.register(format!("{norm}.beta"), vec![c_out], ParamKind::NormBeta)?;
        Ok(Self { conv, norm })
    }

    pub fn param_count(dims: Dims, c_in: usize, c_out: usize) -> usize {
        Conv::param_count(dims, c_in, c_out, 3) + 2 * c_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        if g.shape(x)[0] != self.conv.c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv unit input channels",
                expected: vec![self.conv.c_in],
                got: vec![g.shape(x)[0]],
            });
        }
        let y = self.conv.forward(g, p, x)?;
        let gamma = p.var(&format!("{}.gamma", self.norm))?;
        let beta = p.var(&format!("{}.beta", self.norm))?;
        let y = g.instance_norm(y, gamma, beta, NORM_EPS)?;
        Ok(g.relu(y))
    }
}

/// Two 3×3 conv units, optionally followed by a 2×2 max pool.
#[derive(Clone, Debug)]
pub struct ConvBlock2d {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub pool: bool,
}

impl ConvBlock2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        pool: bool,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvUnit::new(store, &format!("{prefix}.0"), Dims::Two, c_in, c_out)?,
            second: ConvUnit::new(store, &format!("{prefix}.1"), Dims::Two, c_out, c_out)?,
            pool,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        ConvUnit::param_count(Dims::Two, c_in, c_out)
            + ConvUnit::param_count(Dims::Two, c_out, c_out)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.first.forward(g, p, x)?;
        let y = self.second.forward(g, p, y)?;
        if self.pool {
            g.maxpool(y, &[2, 2])
        } else {
            Ok(y)
        }
    }
}

/// `y = unit2(unit1(x)) + skip(x)`; the skip is a 1×1×1 conv when the
/// channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock3d {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub proj: Option<Conv>,
}

impl ResidualBlock3d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let first = ConvUnit::new(store, &format!("{prefix}.0"), Dims::Three, c_in, c_out)?;
        let second = ConvUnit::new(store, &format!("{prefix}.1"), Dims::Three, c_out, c_out)?;
        let proj = if c_in != c_out {
            Some(Conv::new(
                store,
                format!("{prefix}.skip"),
                Dims::Three,
                c_in,
                c_out,
                1,
            )?)
        } else {
            None
        };
        Ok(Self {
            first,
            second,
            proj,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        let skip = if c_in != c_out {
            Conv::param_count(Dims::Three, c_in, c_out, 1)
        } else {
            0
        };
        ConvUnit::param_count(Dims::Three, c_in, c_out)
            + ConvUnit::param_count(Dims::Three, c_out, c_out)
            + skip
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.first.forward(g, p, x)?;
        let y = self.second.forward(g, p, y)?;
        let skip = match &self.proj {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(y, skip)
    }
}
