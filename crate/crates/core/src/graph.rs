//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the DAG; `backward` walks it once in reverse.
//! A graph is confined to one thread. Parallel work builds one graph per
//! slice and merges gradients afterwards.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::conv::{conv_backward, conv_forward, ConvDims, ConvGeom};
use crate::ops::einsum::{ContractPlan, ContractSpec};
use crate::ops::norm::{instance_norm_backward, instance_norm_forward, NormStats};
use crate::ops::pool::{
    adaptive_avg_backward, adaptive_avg_forward, maxpool_backward, maxpool_forward,
};
use crate::ops::resample::{upsample2x_backward, upsample2x_forward, UpsampleMode};
use crate::ops::{axis_view, sigmoid, softmax_backward, softmax_forward};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, for checking that the gradient
/// harness notices broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    NegateConvWeightGrad,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    AdaptiveAvgPool {
        x: Var,
        lead: usize,
        input: [usize; 3],
        target: [usize; 3],
    },
    Upsample {
        x: Var,
        view: (usize, usize, usize),
        mode: UpsampleMode,
    },
    Softmax {
        x: Var,
        view: (usize, usize, usize),
    },
    Contract {
        a: Var,
        b: Var,
        plan: ContractPlan,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that shares its buffer with the caller (parameters, cached context).
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // convolution, pooling, normalization
    // ------------------------------------------------------------------

    /// 2D cross-correlation: `x [Ci,H,W]`, `w [Co,Ci,kh,kw]`, `b [Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("input {xs:?} / weight {ws:?} must have rank 3 / 4"),
            });
        }
        let geom = ConvGeom {
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        };
        let dims = ConvDims::new(
            [xs[0], 1, xs[1], xs[2]],
            [ws[0], ws[1], 1, ws[2], ws[3]],
            geom,
        )?;
        self.conv_impl(x, w, b, dims, geom, true)
    }

    /// 3D cross-correlation: `x [Ci,D,H,W]`, `w [Co,Ci,kd,kh,kw]`, `b [Co]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 5 {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                msg: format!("input {xs:?} / weight {ws:?} must have rank 4 / 5"),
            });
        }
        let geom = ConvGeom {
            stride: [stride; 3],
            pad: [pad; 3],
        };
        let dims = ConvDims::new(
            [xs[0], xs[1], xs[2], xs[3]],
            [ws[0], ws[1], ws[2], ws[3], ws[4]],
            geom,
        )?;
        self.conv_impl(x, w, b, dims, geom, false)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        geom: ConvGeom,
        two_d: bool,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [dims.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv bias",
                    expected: vec![dims.c_out],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
            &geom,
        );
        let shape = if two_d {
            vec![dims.c_out, dims.output[1], dims.output[2]]
        } else {
            vec![dims.c_out, dims.output[0], dims.output[1], dims.output[2]]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv {
                x,
                w,
                b,
                dims,
                geom,
            },
            rg,
        ))
    }

    /// Max pooling over the trailing `window.len()` axes (2 or 3).
    pub fn maxpool(&mut self, x: Var, window: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, input, win) = trailing_view(&shape, window, "maxpool")?;
        let (vals, argmax, out) = maxpool_forward(self.value(x).data(), lead, input, win)?;
        let mut out_shape = shape.clone();
        let k = window.len();
        for (i, e) in out_shape[shape.len() - k..].iter_mut().enumerate() {
            *e = out[3 - k + i];
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, vals)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Instance normalization over all non-channel axes, then `gamma * x + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1..].iter().product::<usize>() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "instance_norm",
                msg: format!("need at least two spatial elements per channel, got {shape:?}"),
            });
        }
        let c = shape[0];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm affine",
                    expected: vec![c],
                    got: self.shape(p).to_vec(),
                });
            }
        }
        let (y, stats) = instance_norm_forward(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::lit(eps),
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    /// Adaptive average pooling of the trailing `target.len()` axes (1 to 3).
    pub fn adaptive_avg_pool(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (lead, input, tgt) = trailing_view(&shape, target, "adaptive_avg_pool")?;
        let out = adaptive_avg_forward(self.value(x).data(), lead, input, tgt)?;
        let mut out_shape = shape.clone();
        let k = target.len();
        out_shape[shape.len() - k..].copy_from_slice(target);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::AdaptiveAvgPool {
                x,
                lead,
                input,
                target: tgt,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // resampling, attention primitives
    // ------------------------------------------------------------------

    /// Doubles each listed axis.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode, axes: &[usize]) -> Result<Var> {
        let mut cur = x;
        for &axis in axes {
            let shape = self.shape(cur).to_vec();
            if axis >= shape.len() {
                return Err(TensorError::InvalidArgument {
                    op: "upsample2x",
                    msg: format!("axis {axis} out of range for shape {shape:?}"),
                });
            }
            let view = axis_view(&shape, axis);
            let y = upsample2x_forward(self.value(cur).data(), view.0, view.1, view.2, mode);
            let mut out_shape = shape;
            out_shape[axis] *= 2;
            let rg = self.rg(&[cur]);
            cur = self.push(
                Tensor::new(out_shape, y)?,
                Op::Upsample { x: cur, view, mode },
                rg,
            );
        }
        Ok(cur)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let view = axis_view(&shape, axis);
        let y = softmax_forward(self.value(x).data(), view.0, view.1, view.2);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { x, view }, rg))
    }

    /// Index contraction, e.g. `contract("cdhw,d->chw", f, a)`.
    pub fn contract(&mut self, spec: &str, a: Var, b: Var) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        let plan = ContractPlan::new(&spec, self.shape(a), self.shape(b))?;
        let out = plan.forward(self.value(a).data(), self.value(b).data());
        let rg = self.rg(&[a, b]);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::Contract { a, b, plan }, rg))
    }

    // ------------------------------------------------------------------
    // elementwise and structural
    // ------------------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let y = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(y, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let y = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(y, Op::MulScalar(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        let rg = self.rg(&[x]);
        self.push(y, Op::Mean(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: first.clone(),
                    got: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_view(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow(axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Gradients of a one-element tensor with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                msg: format!(
                    "loss must have one element, shape is {:?}",
                    self.shape(loss)
                ),
            });
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), T::one());
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Backward pass from arbitrary upstream gradients (summed when a node
    /// is seeded twice).
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    expected: self.shape(v).to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            start = start.max(v.0 + 1);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v);
        debug_assert_eq!(g.len(), shape.iter().product::<usize>());
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                dims,
                geom,
            } => {
                let need = [
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let r = conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    dims,
                    geom,
                    need,
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(mut dw) = r.dw {
                    if self.fault == Some(Fault::NegateConvWeightGrad) {
                        dw.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (r.db, b) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = maxpool_backward(g, argmax, self.value(*x).len());
                self.accumulate(grads, *x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let c = self.shape(*x)[0];
                let r = instance_norm_backward(
                    self.value(*x).data(),
                    g,
                    c,
                    self.value(*gamma).data(),
                    stats,
                );
                self.accumulate(grads, *x, r.dx);
                self.accumulate(grads, *gamma, r.dgamma);
                self.accumulate(grads, *beta, r.dbeta);
            }
            Op::AdaptiveAvgPool {
                x,
                lead,
                input,
                target,
            } => {
                let dx = adaptive_avg_backward(g, *lead, *input, *target);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x, view, mode } => {
                let dx = upsample2x_backward(g, view.0, view.1, view.2, *mode);
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, view } => {
                let dx = softmax_backward(node.value.data(), g, view.0, view.1, view.2);
                self.accumulate(grads, *x, dx);
            }
            Op::Contract { a, b, plan } => {
                let need = [self.requires_grad(*a), self.requires_grad(*b)];
                let (da, db) = plan.backward(self.value(*a).data(), self.value(*b).data(), g, need);
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d / y).collect());
                self.accumulate(
                    grads,
                    *b,
                    g.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect(),
                );
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulScalar(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_view(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = axis_view(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
        }
    }
}

/// Views `shape` as `[lead, d, h, w]` with `spec` covering the trailing axes,
/// padding missing leading spatial axes with 1.
fn trailing_view(
    shape: &[usize],
    spec: &[usize],
    op: &'static str,
) -> Result<(usize, [usize; 3], [usize; 3])> {
    let k = spec.len();
    if k == 0 || k > 3 || k > shape.len() {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("cannot apply a {k}-axis window to shape {shape:?}"),
        });
    }
    let lead: usize = shape[..shape.len() - k].iter().product();
    let mut input = [1; 3];
    let mut win = [1; 3];
    input[3 - k..].copy_from_slice(&shape[shape.len() - k..]);
    win[3 - k..].copy_from_slice(spec);
    Ok((lead, input, win))
}
