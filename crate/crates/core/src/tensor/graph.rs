//! Tape-based reverse-mode differentiation.
//!
//! Ops evaluate eagerly and append a node to the tape. Parameters are read
//! in place from a borrowed [`ParamStore`]; only activations and gradients
//! allocate. A graph is confined to one thread; a frozen `ParamStore` can
//! be shared by many inference graphs at once.

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, NormStats};
use super::params::{ParamId, ParamStore};
use super::{Dims4, Tensor4};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearity. The derivative at exactly zero takes the
/// negative-side slope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    LeakyRelu(f32),
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::None => v,
        }
    }

    fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu(a) = self {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "leaky relu slope {a} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for one residual block: `(weight, bias)` per conv and
/// `(gamma, beta)` per norm.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub conv1: (Var, Var),
    pub norm1: (Var, Var),
    pub conv2: (Var, Var),
    pub norm2: (Var, Var),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Dot(Var, Tensor4),
}

struct Node {
    value: Option<Tensor4>,
    /// Reductions keep their f64 accumulator for precise readout.
    exact: Option<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor4> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor4)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
    param_vars: Vec<Option<Var>>,
    trainable: Option<Vec<bool>>,
    record: bool,
    backward_done: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn recording(store: &'p ParamStore) -> Self {
        Self::build(Some(store), true)
    }

    /// A forward-only graph; nothing requires gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::build(Some(store), false)
    }

    /// A recording graph with no parameter store, for ops on free tensors.
    pub fn standalone() -> Self {
        Self::build(None, true)
    }

    /// A forward-only graph with no parameter store.
    pub fn standalone_inference() -> Self {
        Self::build(None, false)
    }

    fn build(store: Option<&'p ParamStore>, record: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: vec![None; store.map_or(0, ParamStore::len)],
            trainable: None,
            record,
            backward_done: false,
        }
    }

    /// Restrict which parameters receive gradients. Unlisted parameters are
    /// treated as constants.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        let mut mask = vec![false; self.param_vars.len()];
        for id in ids {
            mask[id.0] = true;
        }
        self.trainable = Some(mask);
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            exact: None,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is kept after [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::InvalidArgument("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::InvalidArgument(format!("unknown parameter {id:?}")));
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let trainable = self.trainable.as_ref().is_none_or(|m| m[id.0]);
        self.nodes.push(Node {
            value: None,
            exact: None,
            op: Op::Param(id),
            requires_grad: self.record && trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").tensor(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn dims(&self, v: Var) -> Dims4 {
        self.value(v).dims()
    }

    /// Scalar readout, using the f64 accumulator when the node has one.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| self.value(v).data()[0] as f64)
    }

    /// Consume the graph and return one node's value.
    pub fn into_value(mut self, v: Var) -> Tensor4 {
        match self.nodes[v.0].value.take() {
            Some(t) => t,
            None => self.value(v).detached(),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::forward("conv2d", self.dims(x), self.dims(w), stride, pad)?;
        self.check_bias("conv2d", b, geom.co)?;
        let mut out = geom.apply(self.value(x).data(), self.value(w).data());
        ops::add_bias(&mut out, self.value(b).data());
        let t = Tensor4::from_buffer(geom.out_dims(), out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(t, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution; `w` has dims `(in_ch, k, k, out_ch)`, the
    /// same layout as the convolution it is the adjoint of.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::transposed(
            "conv_transpose2d",
            self.dims(x),
            self.dims(w),
            stride,
            pad,
            output_padding,
        )?;
        self.check_bias("conv_transpose2d", b, geom.ci)?;
        let mut out = geom.adjoint(self.value(x).data(), self.value(w).data());
        ops::add_bias(&mut out, self.value(b).data());
        let t = Tensor4::from_buffer(geom.in_dims(), out)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(t, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    fn check_bias(&self, op: &'static str, b: Var, channels: usize) -> Result<()> {
        let len = self.value(b).len();
        if len != channels {
            return Err(Error::ChannelMismatch {
                op,
                expected: channels,
                actual: len,
            });
        }
        Ok(())
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let dims = self.dims(x);
        let (out, stats) = ops::instance_norm_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let t = Tensor4::from_vec(dims, out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let src = self.value(x);
        let out: Vec<f32> = src.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor4::from_vec(src.dims(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Act { x, kind }, rg))
    }

    /// `x + IN(conv(relu(IN(conv(x)))))` with 3×3 same-padded convs.
    pub fn residual_block(&mut self, x: Var, p: &ResidualVars, eps: f32) -> Result<Var> {
        let c = self.dims(x).c;
        for (w, b) in [p.conv1, p.conv2] {
            let wd = self.dims(w);
            if wd.n != c || wd.c != c {
                return Err(Error::ChannelMismatch {
                    op: "residual_block",
                    expected: c,
                    actual: if wd.c != c { wd.c } else { wd.n },
                });
            }
            self.check_bias("residual_block", b, c)?;
        }
        let pad = self.dims(p.conv1.0).h / 2;
        let y = self.conv2d(x, p.conv1.0, p.conv1.1, 1, pad)?;
        let y = self.instance_norm(y, p.norm1.0, p.norm1.1, eps)?;
        let y = self.activation(y, Activation::Relu)?;
        let pad = self.dims(p.conv2.0).h / 2;
        let y = self.conv2d(y, p.conv2.0, p.conv2.1, 1, pad)?;
        let y = self.instance_norm(y, p.norm2.0, p.norm2.1, eps)?;
        self.add(x, y)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor4> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch {
                op,
                expected: ta.dims(),
                actual: tb.dims(),
            });
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(ta.dims(), out)
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Result<Tensor4> {
        let t = self.value(x);
        Tensor4::from_vec(t.dims(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let t = self.map(x, |v| v * s)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Result<Var> {
        let t = self.map(x, |v| v + s)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::AddScalar(x), rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v * v)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Square(x), rg))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f32::abs)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Abs(x), rg))
    }

    fn push_reduction(&mut self, exact: f64, op: Op, rg: bool) -> Var {
        let v = self.push(Tensor4::scalar(exact as f32), op, rg);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let rg = self.needs(&[x]);
        Ok(self.push_reduction(s, Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[x]);
        Ok(self.push_reduction(s, Op::Sum(x), rg))
    }

    /// `sum(x * weights)` for a constant weight tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor4) -> Result<Var> {
        let t = self.value(x);
        if t.dims() != weights.dims() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                expected: t.dims(),
                actual: weights.dims(),
            });
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.needs(&[x]);
        Ok(self.push_reduction(s, Op::Dot(x, weights), rg))
    }

    /// Reverse pass from a scalar loss. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference graph".into()));
        }
        let dims = self.dims(loss);
        if dims != Dims4::scalar() {
            return Err(Error::NotScalar(dims));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor4::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    self.grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            let contributions = self.node_backward(i, &g)?;
            drop(g);
            for (var, grad) in contributions {
                self.accumulate(var, grad)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor4) -> Result<Vec<(Var, Tensor4)>> {
        let mut out = Vec::new();
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, geom } => {
                if self.wants(*x) {
                    let dx = geom.adjoint(gd, self.value(*w).data());
                    out.push((*x, Tensor4::from_buffer(geom.in_dims(), dx)?));
                }
                if self.wants(*w) {
                    let dw = geom.weight_grad(self.value(*x).data(), gd);
                    out.push((*w, Tensor4::from_buffer(self.dims(*w), dw)?));
                }
                if self.wants(*b) {
                    let db = ops::channel_sum(gd, geom.co);
                    out.push((*b, Tensor4::from_vec(self.dims(*b), db)?));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if self.wants(*x) {
                    let dx = geom.apply(gd, self.value(*w).data());
                    out.push((*x, Tensor4::from_buffer(geom.out_dims(), dx)?));
                }
                if self.wants(*w) {
                    let dw = geom.weight_grad(gd, self.value(*x).data());
                    out.push((*w, Tensor4::from_buffer(self.dims(*w), dw)?));
                }
                if self.wants(*b) {
                    let db = ops::channel_sum(gd, geom.ci);
                    out.push((*b, Tensor4::from_vec(self.dims(*b), db)?));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dgamma, dbeta) = ops::instance_norm_backward(
                    self.value(*x).data(),
                    self.dims(*x),
                    self.value(*gamma).data(),
                    stats,
                    gd,
                );
                if self.wants(*x) {
                    out.push((*x, Tensor4::from_vec(self.dims(*x), dx)?));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor4::from_vec(self.dims(*gamma), dgamma)?));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor4::from_vec(self.dims(*beta), dbeta)?));
                }
            }
            Op::Act { x, kind } => {
                let dims = self.dims(*x);
                let dx: Vec<f32> = match kind {
                    Activation::LeakyRelu(a) => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| if v > 0.0 { g } else { a * g })
                        .collect(),
                    Activation::Relu => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Tanh => self
                        .value(Var(i))
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &g)| g * (1.0 - y * y))
                        .collect(),
                    Activation::None => gd.to_vec(),
                };
                out.push((*x, Tensor4::from_vec(dims, dx)?));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, g.detached()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.detached()));
                }
                if self.wants(*b) {
                    out.push((*b, Tensor4::from_vec(g.dims(), gd.iter().map(|v| -v).collect())?));
                }
            }
            Op::Scale(x, s) => {
                out.push((*x, Tensor4::from_vec(g.dims(), gd.iter().map(|v| v * s).collect())?));
            }
            Op::AddScalar(x) => out.push((*x, g.detached())),
            Op::Square(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| 2.0 * v * g)
                    .collect();
                out.push((*x, Tensor4::from_vec(g.dims(), dx)?));
            }
            Op::Abs(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| {
                        if v > 0.0 {
                            g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, Tensor4::from_vec(g.dims(), dx)?));
            }
            Op::Mean(x) => {
                let dims = self.dims(*x);
                let v = gd[0] / dims.len() as f32;
                out.push((*x, Tensor4::filled(dims, v)));
            }
            Op::Sum(x) => out.push((*x, Tensor4::filled(self.dims(*x), gd[0]))),
            Op::Dot(x, weights) => {
                let dx = weights.data().iter().map(|w| w * gd[0]).collect();
                out.push((*x, Tensor4::from_vec(weights.dims(), dx)?));
            }
        }
        Ok(out)
    }

    fn accumulate(&mut self, v: Var, grad: Tensor4) -> Result<()> {
        match &mut self.grads[v.0] {
            slot @ None => *slot = Some(grad),
            Some(acc) => {
                if acc.dims() != grad.dims() {
                    return Err(Error::ShapeMismatch {
                        op: "backward",
                        expected: acc.dims(),
                        actual: grad.dims(),
                    });
                }
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
        }
        Ok(())
    }

    /// Gradient of a leaf or parameter node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Move the parameter gradients out of the graph. Parameters that were
    /// used but received no gradient flow get an explicit zero tensor.
    pub fn take_param_grads(&mut self) -> Gradients {
        let mut grads: Vec<Option<Tensor4>> = (0..self.param_vars.len()).map(|_| None).collect();
        for (idx, var) in self.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            grads[idx] = Some(match self.grads.get_mut(var.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor4::zeros(self.value(*var).dims()),
            });
        }
        Gradients { grads }
    }
}
