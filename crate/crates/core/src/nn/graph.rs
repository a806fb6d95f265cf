//! A define-by-run tape over NCHW tensors.
//!
//! Each forward pass records its operations in a [`Graph`]; [`Graph::backward`]
//! replays them in reverse and returns parameter gradients. Parameters are read
//! from a borrowed [`ParamStore`], so evaluation passes need no mutable state
//! and can run concurrently.

use crate::error::{Error, Result};

use super::layers::{Conv2d, Norm, NormKind};
use super::ops::{self, ConvGeom, NormCache};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        kind: NormKind,
        cache: NormCache,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Scale(Var, f32),
    Resize(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    ChannelMul {
        x: Var,
        scale: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Result of a backward pass.
pub struct Backprop {
    pub params: Gradients,
    leaves: Vec<Option<Tensor>>,
}

impl Backprop {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn input_grad(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    train: bool,
    nodes: Vec<Node>,
    stat_updates: Vec<(ParamId, Vec<f32>)>,
    resamples: usize,
    attention: Vec<Var>,
}

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f32 = 0.1;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            store,
            train,
            nodes: Vec::new(),
            stat_updates: Vec::new(),
            resamples: 0,
            attention: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Number of resampling operations recorded so far.
    pub fn resample_count(&self) -> usize {
        self.resamples
    }

    /// Channel-attention vectors recorded by [`Graph::mark_attention`].
    pub fn attention(&self) -> impl Iterator<Item = &Tensor> {
        self.attention.iter().map(|v| &self.nodes[v.0].value)
    }

    pub fn mark_attention(&mut self, v: Var) {
        self.attention.push(v);
    }

    /// New running statistics produced by train-mode batch normalization.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn conv2d(&mut self, x: Var, conv: &Conv2d) -> Result<Var> {
        let [_, c, h, w] = self.shape(x);
        if c != conv.cin {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} input channels, got {c}",
                conv.name, conv.cin
            )));
        }
        let geom = ConvGeom::new(conv.cin, conv.cout, conv.k, conv.stride, conv.pad, h, w)
            .ok_or_else(|| Error::ShapeMismatch(format!("{}: input {h}x{w} too small", conv.name)))?;
        let bias = conv.bias.map(|b| self.store.value(b));
        let y = ops::conv2d_forward(self.value(x), self.store.value(conv.weight), bias, &geom);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                weight: conv.weight,
                bias: conv.bias,
                geom,
            },
        ))
    }

    pub fn norm(&mut self, x: Var, norm: &Norm) -> Result<Var> {
        let c = self.shape(x)[1];
        if c != norm.channels {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} channels, got {c}",
                norm.name, norm.channels
            )));
        }
        let gamma = self.store.value(norm.gamma);
        let beta = self.store.value(norm.beta);
        let (y, cache) = match norm.kind {
            NormKind::Batch => {
                let running = (!self.train).then(|| {
                    (
                        self.store.value(norm.running_mean),
                        self.store.value(norm.running_var),
                    )
                });
                let (y, cache, batch) = ops::batch_norm_forward(self.value(x), gamma, beta, running);
                if let Some((mean, var)) = batch {
                    let blend = |old: &[f32], new: Vec<f32>| -> Vec<f32> {
                        old.iter()
                            .zip(new)
                            .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                            .collect()
                    };
                    let rm = blend(self.store.value(norm.running_mean), mean);
                    let rv = blend(self.store.value(norm.running_var), var);
                    self.stat_updates.push((norm.running_mean, rm));
                    self.stat_updates.push((norm.running_var, rv));
                }
                (y, cache)
            }
            NormKind::Group => ops::group_norm_forward(self.value(x), gamma, beta, norm.groups),
        };
        Ok(self.push(
            y,
            Op::Norm {
                x,
                gamma: norm.gamma,
                beta: norm.beta,
                kind: norm.kind,
                cache,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(y, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Logistic sigmoid, kept inside the open interval (0, 1) even where
    /// `f32` rounding would saturate.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        const LO: f32 = 1e-7;
        const HI: f32 = 1.0 - 6e-8;
        self.unary(x, |v| (1.0 / (1.0 + (-v).exp())).clamp(LO, HI), Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    /// Bilinear resampling to `(h, w)` with half-pixel centers.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        self.resamples += 1;
        let y = ops::resize_forward(self.value(x), h, w);
        self.push(y, Op::Resize(x))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::ShapeMismatch("empty concat".into()))?);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::ShapeMismatch(format!("concat {s:?} with {first:?}")));
            }
            channels += s[1];
        }
        let [n, _, h, w] = first;
        let mut data = Vec::with_capacity(n * channels * h * w);
        for i in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(i));
            }
        }
        let y = Tensor::from_vec([n, channels, h, w], data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, _, _] = t.shape();
        let hw = t.plane_len();
        let data = t
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let y = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        self.push(y, Op::GlobalAvgPool(x))
    }

    /// `x * scale` with `scale` of shape `[n, c, 1, 1]` broadcast over space.
    pub fn channel_mul(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(scale));
        if ss != [xs[0], xs[1], 1, 1] {
            return Err(Error::ShapeMismatch(format!("channel scale {ss:?} for {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let mut y = self.value(x).clone();
        let s = self.value(scale).data().to_vec();
        for (i, plane) in y.data_mut().chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v *= s[i]);
        }
        Ok(self.push(y, Op::ChannelMul { x, scale }))
    }

    /// Reverse-mode sweep from `out`, seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Backprop> {
        if seed.shape() != self.shape(out) {
            return Err(Error::ShapeMismatch(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Gradients::zeros_like(self.store);
        grads[out.0] = Some(seed);

        fn add(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, weight, bias, geom } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*x), self.store.value(*weight), &g, geom);
                    params.accumulate(*weight, &dw);
                    if let Some(b) = bias {
                        params.accumulate(*b, &db);
                    }
                    add(&mut grads, *x, dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    kind,
                    cache,
                } => {
                    let gm = self.store.value(*gamma);
                    let (dx, dg, db) = match kind {
                        NormKind::Batch => ops::batch_norm_backward(&g, gm, cache),
                        NormKind::Group => {
                            let groups = cache.inv_std.len() / g.n();
                            ops::group_norm_backward(&g, gm, cache, groups)
                        }
                    };
                    params.accumulate(*gamma, &dg);
                    params.accumulate(*beta, &db);
                    add(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    add(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g;
                    for (d, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    add(&mut grads, *x, d);
                }
                Op::Softplus(x) => {
                    let mut d = g;
                    for (d, &v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                        *d *= 1.0 / (1.0 + (-v).exp());
                    }
                    add(&mut grads, *x, d);
                }
                Op::Scale(x, k) => {
                    let mut d = g;
                    d.data_mut().iter_mut().for_each(|v| *v *= k);
                    add(&mut grads, *x, d);
                }
                Op::Resize(x) => {
                    let [_, _, h, w] = self.shape(*x);
                    add(&mut grads, *x, ops::resize_backward(&g, h, w));
                }
                Op::Concat(xs) => {
                    let n = g.n();
                    let hw = g.plane_len();
                    let total = g.c();
                    let mut offset = 0;
                    for &v in xs {
                        let c = self.shape(v)[1];
                        let mut data = Vec::with_capacity(n * c * hw);
                        for item in 0..n {
                            let start = (item * total + offset) * hw;
                            data.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        offset += c;
                        add(&mut grads, v, Tensor::from_vec(self.shape(v), data)?);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.shape(*x);
                    let hw = shape[2] * shape[3];
                    let mut d = Tensor::zeros(shape);
                    for (plane, &gv) in d.data_mut().chunks_mut(hw).zip(g.data()) {
                        plane.fill(gv / hw as f32);
                    }
                    add(&mut grads, *x, d);
                }
                Op::ChannelMul { x, scale } => {
                    let xv = self.value(*x);
                    let sv = self.value(*scale);
                    let hw = xv.plane_len();
                    let mut dx = g.clone();
                    let mut ds = vec![0.0f32; sv.numel()];
                    for (i, (dplane, xplane)) in dx.data_mut().chunks_mut(hw).zip(xv.data().chunks(hw)).enumerate() {
                        let mut acc = 0.0f64;
                        for (d, &xx) in dplane.iter_mut().zip(xplane) {
                            acc += *d as f64 * xx as f64;
                            *d *= sv.data()[i];
                        }
                        ds[i] = acc as f32;
                    }
                    add(&mut grads, *x, dx);
                    add(&mut grads, *scale, Tensor::from_vec(sv.shape(), ds)?);
                }
            }
        }
        Ok(Backprop { params, leaves: grads })
    }
}
