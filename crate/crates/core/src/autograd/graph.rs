use std::sync::Arc;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{self, conv, layout, math, norm, resize, ResizeMode};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running stats are recorded for update.
    Train,
    /// Running statistics.
    Eval,
}

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: norm::BnStats<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: norm::LnStats<T> },
    Relu { x: Var, mask: Option<Vec<bool>> },
    Gelu(Var),
    Sigmoid(Var),
    PixelShuffle { x: Var, r: usize },
    PixelUnshuffle { x: Var, r: usize },
    WindowPartition { x: Var, ws: usize },
    WindowReverse { x: Var, ws: usize },
    Roll { x: Var, sy: isize, sx: isize },
    Permute { x: Var, axes: [usize; 4] },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, top: usize, left: usize },
    Resize { x: Var, mode: ResizeMode },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Softmax(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    MeanHw(Var),
    Sum(Var),
    Gather { src: Var, index: Arc<Vec<usize>> },
    /// Scalar loss whose input gradient was computed in the forward pass.
    Loss { x: Var, grad: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape over [`Tensor`] operations.
///
/// A graph borrows its [`ParamStore`] immutably; batch-norm running-stat
/// updates are collected and handed back by [`Graph::take_stat_updates`].
pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    mode: Mode,
    grad_enabled: bool,
    stat_updates: Vec<(ParamId, Vec<T>)>,
    kinks: Kinks,
}

/// Handling of ReLU activation patterns.
///
/// A finite-difference stencil that straddles a ReLU kink does not measure
/// the derivative backprop computes. Recording the patterns at a base point
/// and replaying them at perturbed points evaluates the smooth piece that
/// contains the base point.
#[derive(Clone, Debug, Default)]
pub enum Kinks {
    #[default]
    Free,
    Record(Vec<Vec<bool>>),
    Replay { masks: std::sync::Arc<Vec<Vec<bool>>>, next: usize },
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    /// Squared global L2 norm over parameter gradients.
    pub fn param_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            stat_updates: Vec::new(),
            kinks: Kinks::Free,
        }
    }

    /// Eval-mode graph in which nothing requires gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(params, Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    /// Sum of bytes held by node outputs (parameters excluded).
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.value.as_ref())
            .map(|t| t.numel() * std::mem::size_of::<T>())
            .sum()
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.grad_enabled && self.params.kind(id) == ParamKind::Trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b).data()), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv { x, w, b, stride, pad }, &inputs))
    }

    /// Batch normalisation. In train mode the running statistics in
    /// `running` are scheduled for update with `momentum`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (rm, rv) = running;
        let train = self.mode == Mode::Train;
        let (y, stats) = if train {
            let (y, stats) = norm::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
            let m = T::c(momentum);
            let upd = |old: &[T], new: &[T]| -> Vec<T> {
                old.iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect()
            };
            let new_mean = upd(self.params.get(rm).data(), &stats.mean);
            let new_var = upd(self.params.get(rv).data(), &stats.var_unbiased);
            self.stat_updates.push((rm, new_mean));
            self.stat_updates.push((rv, new_var));
            (y, stats)
        } else {
            norm::batch_norm_eval(
                self.value(x),
                self.value(gamma).data(),
                self.value(beta).data(),
                self.params.get(rm).data(),
                self.params.get(rv).data(),
                eps,
            )?
        };
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, stats, train }, &[x, gamma, beta]))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, stats) = norm::layer_norm(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut kinks = std::mem::take(&mut self.kinks);
        let xv = self.value(x);
        let (y, mask) = match &mut kinks {
            Kinks::Free => (math::relu(xv), None),
            Kinks::Record(masks) => {
                masks.push(xv.data().iter().map(|&v| v > T::zero()).collect());
                (math::relu(xv), None)
            }
            Kinks::Replay { masks, next } => {
                let mask = masks.get(*next).filter(|m| m.len() == xv.numel()).cloned();
                *next += 1;
                let mask = mask.expect("replayed graph structure differs from the recorded one");
                let mut y = xv.clone();
                for (v, &keep) in y.data_mut().iter_mut().zip(&mask) {
                    if !keep {
                        *v = T::zero();
                    }
                }
                (y, Some(mask))
            }
        };
        self.kinks = kinks;
        self.push(y, Op::Relu { x, mask }, &[x])
    }

    pub fn set_kinks(&mut self, kinks: Kinks) {
        self.kinks = kinks;
    }

    pub fn take_kinks(&mut self) -> Kinks {
        std::mem::take(&mut self.kinks)
    }

    /// GELU, tanh approximation (see [`math::GELU_SQRT_2_OVER_PI`]).
    pub fn gelu(&mut self, x: Var) -> Var {
        let y = math::gelu(self.value(x));
        self.push(y, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = math::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = layout::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelShuffle { x, r }, &[x]))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = layout::pixel_unshuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelUnshuffle { x, r }, &[x]))
    }

    pub fn window_partition(&mut self, x: Var, ws: usize) -> Result<Var> {
        let y = layout::window_partition(self.value(x), ws)?;
        Ok(self.push(y, Op::WindowPartition { x, ws }, &[x]))
    }

    pub fn window_reverse(&mut self, x: Var, ws: usize, grid: Shape) -> Result<Var> {
        let y = layout::window_reverse(self.value(x), ws, grid)?;
        Ok(self.push(y, Op::WindowReverse { x, ws }, &[x]))
    }

    /// Cyclic shift of a channels-last grid.
    pub fn roll_hw(&mut self, x: Var, sy: isize, sx: isize) -> Var {
        let y = layout::roll_hw(self.value(x), sy, sx);
        self.push(y, Op::Roll { x, sy, sx }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: [usize; 4]) -> Result<Var> {
        let y = layout::permute(self.value(x), axes)?;
        Ok(self.push(y, Op::Permute { x, axes }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = layout::concat(&tensors, axis)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = layout::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn pad_hw(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Var {
        let y = layout::pad_hw(self.value(x), top, bottom, left, right);
        self.push(y, Op::Pad { x, top, left }, &[x])
    }

    pub fn crop_hw(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let r = self.narrow(x, 2, top, h)?;
        self.narrow(r, 3, left, w)
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: ResizeMode) -> Result<Var> {
        let y = resize::resize(self.value(x), oh, ow, mode)?;
        Ok(self.push(y, Op::Resize { x, mode }, &[x]))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = math::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = math::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k = T::c(s);
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, s), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = math::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = math::softmax(self.value(x));
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = math::linear(self.value(x), self.value(w), b.map(|b| self.value(b).data()))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn mean_hw(&mut self, x: Var) -> Var {
        let y = math::mean_hw(self.value(x));
        self.push(y, Op::MeanHw(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `out.flat[k] = src.flat[index[k]]`.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != index.len() {
            return Err(Error::invalid_shape("gather", format!("{} indices for {shape}", index.len())));
        }
        let s = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(Error::invalid_shape("gather", format!("index {bad} out of {}", s.len())));
        }
        let data = index.iter().map(|&i| s[i]).collect();
        let y = Tensor::from_vec(shape, data)?;
        Ok(self.push(y, Op::Gather { src, index }, &[src]))
    }

    /// Records a scalar loss whose gradient with respect to `x` is already
    /// known.
    pub fn loss(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("loss", grad.shape(), self.shape(x)));
        }
        Ok(self.push(Tensor::scalar(value), Op::Loss { x, grad }, &[x]))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("root must be scalar, got {}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut out = Gradients {
            params: (0..self.params.len()).map(|_| None).collect(),
            leaves: Vec::new(),
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => out.leaves.push((Var(i), g)),
                Op::Param(id) => match out.params[id.0].as_mut() {
                    Some(acc) => add_into(acc, &g),
                    None => out.params[id.0] = Some(g),
                },
                op => self.backward_op(op, Var(i), g, &mut grads)?,
            }
        }
        out.leaves.reverse();
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match grads[v.0].as_mut() {
            Some(existing) => add_into(existing, &g),
            None => grads[v.0] = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, out: Var, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, stride, pad } => {
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, self.needs(*x))?;
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, cg.dw);
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    self.acc(grads, *b, Tensor::from_vec(shape, cg.db)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, stats, train } => {
                let (dx, dg, db) =
                    norm::batch_norm_backward(self.value(*x), self.value(*gamma).data(), stats, &g, *train);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg)?);
                self.acc(grads, *beta, Tensor::from_vec(self.shape(*beta), db)?);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = norm::layer_norm_backward(self.value(*x), self.value(*gamma).data(), stats, &g);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dg)?);
                self.acc(grads, *beta, Tensor::from_vec(self.shape(*beta), db)?);
            }
            Op::Relu { x, mask } => {
                let xv = self.value(*x);
                let mut dx = g;
                match mask {
                    Some(m) => {
                        for (d, &keep) in dx.data_mut().iter_mut().zip(m) {
                            if !keep {
                                *d = T::zero();
                            }
                        }
                    }
                    None => {
                        for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                            if v <= T::zero() {
                                *d = T::zero();
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= T::c(math::gelu_grad_scalar(v.f64()));
                }
                self.acc(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = self.value(out);
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (T::one() - s);
                }
                self.acc(grads, *x, dx);
            }
            Op::PixelShuffle { x, r } => self.acc(grads, *x, layout::pixel_unshuffle(&g, *r)?),
            Op::PixelUnshuffle { x, r } => self.acc(grads, *x, layout::pixel_shuffle(&g, *r)?),
            Op::WindowPartition { x, ws } => {
                let grid = self.shape(*x);
                self.acc(grads, *x, layout::window_reverse(&g, *ws, grid)?);
            }
            Op::WindowReverse { x, ws } => self.acc(grads, *x, layout::window_partition(&g, *ws)?),
            Op::Roll { x, sy, sx } => self.acc(grads, *x, layout::roll_hw(&g, -sy, -sx)),
            Op::Permute { x, axes } => self.acc(grads, *x, layout::permute(&g, layout::inverse_axes(*axes))?),
            Op::Reshape(x) => {
                let shape = self.shape(*x);
                self.acc(grads, *x, g.reshape(shape)?);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p).dims()[*axis];
                    if self.needs(p) {
                        self.acc(grads, p, layout::narrow(&g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                layout::narrow_backward_into(&mut dx, &g, *axis, *start);
                self.acc(grads, *x, dx);
            }
            Op::Pad { x, top, left } => {
                let s = self.shape(*x);
                self.acc(grads, *x, layout::crop_hw(&g, *top, *left, s.h(), s.w())?);
            }
            Op::Resize { x, mode } => {
                let s = self.shape(*x);
                self.acc(grads, *x, resize::resize_backward(&g, s.h(), s.w(), *mode));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, math::reduce_to(&g, self.shape(*a)));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, math::reduce_to(&g, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = math::mul_backward(self.value(*a), self.value(*b), &g);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(x, s) => {
                let k = T::c(*s);
                self.acc(grads, *x, g.map(|v| v * k));
            }
            Op::MatMul(a, b) => {
                let (da, db) = math::matmul_backward(self.value(*a), self.value(*b), &g);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Softmax(x) => self.acc(grads, *x, math::softmax_backward(self.value(out), &g)),
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = math::linear_backward(self.value(*x), self.value(*w), &g);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, Tensor::from_vec(self.shape(*b), db)?);
                }
            }
            Op::MeanHw(x) => {
                let s = self.shape(*x);
                let inv = T::c(1.0 / (s.h() * s.w()) as f64);
                let dx = Tensor::from_fn(s, |[n, c, _, _]| g.at(n, c, 0, 0) * inv);
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Gather { src, index } => {
                let mut dx = Tensor::zeros(self.shape(*src));
                let d = dx.data_mut();
                for (&i, &v) in index.iter().zip(g.data()) {
                    d[i] += v;
                }
                self.acc(grads, *src, dx);
            }
            Op::Loss { x, grad } => {
                let gv = g.data()[0];
                self.acc(grads, *x, grad.map(|v| v * gv));
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_has_constant_gradient() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::from_fn([1, 2, 3, 4], |[_, c, h, w]| (c + h + w) as f64));
        let y = g.scale(x, 2.0);
        let s = g.sum(y);
        assert_eq!(g.value(s).data()[0], 2.0 * (0..2).flat_map(|c| (0..3).flat_map(move |h| (0..4).map(move |w| (c + h + w) as f64))).sum::<f64>());
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::zeros([1, 1, 1, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::full([1, 1, 1, 3], 3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, 6.0, 6.0]);
    }

    #[test]
    fn shuffle_gradient_is_inverse_permutation() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input_with_grad(Tensor::zeros([1, 8, 2, 3]));
        let y = g.pixel_shuffle(x, 2).unwrap();
        let weights = Tensor::from_fn(g.shape(y), |[_, c, h, w]| (c * 100 + h * 10 + w) as f64);
        let wv = g.input(weights.clone());
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &layout::pixel_unshuffle(&weights, 2).unwrap());
    }

    #[test]
    fn train_mode_batch_norm_schedules_running_stats() {
        let mut store = ParamStore::<f32>::new();
        let gamma = store.add("g", Tensor::full([1, 1, 1, 1], 1.0), ParamKind::Trainable).unwrap();
        let beta = store.add("b", Tensor::zeros([1, 1, 1, 1]), ParamKind::Trainable).unwrap();
        let rm = store.add("rm", Tensor::zeros([1, 1, 1, 1]), ParamKind::Buffer).unwrap();
        let rv = store.add("rv", Tensor::full([1, 1, 1, 1], 1.0), ParamKind::Buffer).unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::from_vec([2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        g.batch_norm(x, gv, bv, (rm, rv), 0.1, 1e-5).unwrap();
        let updates = g.take_stat_updates();
        drop(g);
        store.apply_stat_updates(updates);
        assert!((store.get(rm).data()[0] - 0.2).abs() < 1e-6);
        // unbiased var of [1, 3] is 2
        assert!((store.get(rv).data()[0] - 1.1).abs() < 1e-6);
    }
}
