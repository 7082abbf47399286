//! Reverse-mode tape.
//!
//! A [`Graph`] records one forward pass over values read from a
//! [`ParamStore`]. Calling [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every parameter that is trainable (a weight that
//! is not frozen). Gradients still flow *through* frozen sub-networks to
//! whatever trainable nodes feed them; frozen weights themselves never get
//! a gradient entry.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::NnError;
use crate::kernels;
use crate::params::{ParamId, ParamStore, Role};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm hyper-parameters (PyTorch conventions).
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    ConvT2x2 { x: Var, w: Var, b: Option<Var> },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    SigmoidEvery { x: Var, period: usize, offset: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array4<f32>, inv_std: Array1<f32>, batch_stats: bool },
    Add(Var, Var),
    AddChannelBroadcast { x: Var, s: Var },
    ScaleChannels { x: Var, gate: Var },
    Concat1 { parts: Vec<Var>, sizes: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, arg: Vec<usize> },
    Dropout { x: Var, mask: ArrayD<f32> },
    Reshape(Var),
    SelectSlots { x: Var, width: usize, slots: Vec<usize> },
    Resize { x: Var, h: usize, w: usize },
}

struct Node {
    value: Option<ArrayD<f32>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: HashMap<ParamId, ArrayD<f32>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f32>> {
        self.by_param.get(&id)
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<(ParamId, ArrayD<f32>)>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-param node has value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn v4(&self, v: Var) -> ndarray::ArrayView4<'_, f32> {
        self.value(v).view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
    }

    fn v2(&self, v: Var) -> ndarray::ArrayView2<'_, f32> {
        self.value(v).view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
    }

    /// Running-statistics updates collected during a training forward.
    /// Apply them to the store once the graph is dropped.
    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ArrayD<f32>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn input(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let rg = self.store.get(id).trainable();
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, pad: usize) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(wv).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(NnError::Shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let out = kernels::conv2d_forward(
            self.v4(x),
            self.v4(wv),
            bv.map(|b| self.value(b).view().into_dimensionality().expect("bias rank 1")),
            pad,
        );
        let rg = self.rg(x) || self.rg(wv) || bv.is_some_and(|b| self.rg(b));
        Ok(self.push(out.into_dyn(), Op::Conv2d { x, w: wv, b: bv, pad }, rg))
    }

    pub fn conv_t2x2(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(wv).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(NnError::Shape(format!("conv_t input {xs:?} with weight {ws:?}")));
        }
        let out = kernels::conv_t2x2_forward(
            self.v4(x),
            self.v4(wv),
            bv.map(|b| self.value(b).view().into_dimensionality().expect("bias rank 1")),
        );
        let rg = self.rg(x) || self.rg(wv) || bv.is_some_and(|b| self.rg(b));
        Ok(self.push(out.into_dyn(), Op::ConvT2x2 { x, w: wv, b: bv }, rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let sh = self.shape(x);
        if sh.len() != 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0 {
            return Err(NnError::Shape(format!("max_pool2 needs even spatial dims, got {sh:?}")));
        }
        let (out, arg) = kernels::max_pool2_forward(self.v4(x));
        let rg = self.rg(x);
        Ok(self.push(out.into_dyn(), Op::MaxPool2 { x, arg }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Sigmoid on the features at `offset, offset + period, ...` of a
    /// (N, F) tensor; identity elsewhere.
    pub fn sigmoid_every(&mut self, x: Var, period: usize, offset: usize) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                if j % period == offset {
                    *v = sigmoid(*v);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SigmoidEvery { x, period, offset }, rg)
    }

    /// Batch normalization over (N, H, W) per channel.
    ///
    /// Batch statistics are used (and running statistics queued for
    /// update) only in training mode and only when `gamma` is trainable;
    /// frozen layers always run in inference mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var, NnError> {
        let batch_stats = self.mode == Mode::Train && self.store.get(gamma).trainable();
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let xv = self.v4(x);
        let (n, c, h, w) = xv.dim();
        if self.value(gv).len() != c {
            return Err(NnError::Shape(format!("batch_norm over {c} channels with gamma {:?}", self.shape(gv))));
        }
        let count = (n * h * w) as f64;
        let (mean, var) = if batch_stats {
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ch in 0..c {
                let plane = xv.slice(s![.., ch, .., ..]);
                let m = plane.iter().map(|&v| v as f64).sum::<f64>() / count;
                let vv = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
                mean[ch] = m as f32;
                var[ch] = vv as f32;
            }
            (mean, var)
        } else {
            let rm = self.store.value(running_mean).view().into_dimensionality().expect("rank 1").to_owned();
            let rv = self.store.value(running_var).view().into_dimensionality().expect("rank 1").to_owned();
            (rm, rv)
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = xv.to_owned();
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            xhat.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - m) * is);
        }
        let g = self.value(gv).view().into_dimensionality::<ndarray::Ix1>().expect("rank 1").to_owned();
        let b = self.value(bv).view().into_dimensionality::<ndarray::Ix1>().expect("rank 1").to_owned();
        let mut out = xhat.clone();
        for ch in 0..c {
            let (gg, bb) = (g[ch], b[ch]);
            out.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v * gg + bb);
        }
        if batch_stats {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 } as f32;
            let rm = self.store.value(running_mean);
            let rv = self.store.value(running_var);
            let new_rm = Zip::from(rm).and(mean.view().into_dyn()).map_collect(|&r, &m| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m);
            let new_rv = Zip::from(rv)
                .and(var.view().into_dyn())
                .map_collect(|&r, &v| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias);
            self.bn_updates.push((running_mean, new_rm));
            self.bn_updates.push((running_var, new_rv));
        }
        let rg = self.rg(x) || self.rg(gv) || self.rg(bv);
        Ok(self.push(
            out.into_dyn(),
            Op::BatchNorm { x, gamma: gv, beta: bv, xhat, inv_std, batch_stats },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x` (N, C, H, W) plus a single-channel map `s` (N, 1, H, W)
    /// broadcast over every channel.
    pub fn add_channel_broadcast(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() != 4 || ss.len() != 4 || ss[1] != 1 || xs[0] != ss[0] || xs[2..] != ss[2..] {
            return Err(NnError::Shape(format!("broadcast add {xs:?} + {ss:?}")));
        }
        let out = self.value(x) + self.value(s);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::AddChannelBroadcast { x, s }, rg))
    }

    /// Multiply each channel of `x` (N, C, H, W) by `gate` (N, C).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var, NnError> {
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        if xs.len() != 4 || gs != [xs[0], xs[1]] {
            return Err(NnError::Shape(format!("scale_channels {xs:?} by {gs:?}")));
        }
        let mut out = self.v4(x).to_owned();
        let g = self.v2(gate);
        for n in 0..xs[0] {
            for c in 0..xs[1] {
                let gg = g[[n, c]];
                out.slice_mut(s![n, c, .., ..]).mapv_inplace(|v| v * gg);
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out.into_dyn(), Op::ScaleChannels { x, gate }, rg))
    }

    /// Concatenate along axis 1 (channels or features).
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).map_err(|e| NnError::Shape(format!("concat: {e}")))?;
        let sizes = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat1 { parts: parts.to_vec(), sizes }, rg))
    }

    /// `x` (N, in) times the transpose of `w` (out, in), plus bias.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(wv).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::Shape(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let mut out = self.v2(x).dot(&self.v2(wv).t());
        if let Some(bv) = bv {
            let bias = self.value(bv).view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
            out += &bias;
        }
        let rg = self.rg(x) || self.rg(wv) || bv.is_some_and(|b| self.rg(b));
        Ok(self.push(out.into_dyn(), Op::Linear { x, w: wv, b: bv }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.v4(x);
        let (n, c, h, w) = xv.dim();
        let out = Array2::from_shape_fn((n, c), |(i, j)| {
            xv.slice(s![i, j, .., ..]).iter().map(|&v| v as f64).sum::<f64>() as f32 / (h * w) as f32
        });
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xv = self.v4(x);
        let (n, c, _, w) = xv.dim();
        let mut out = Array2::<f32>::zeros((n, c));
        let mut arg = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                let plane = xv.slice(s![i, j, .., ..]);
                let (mut best, mut bi) = (f32::NEG_INFINITY, 0usize);
                for ((y, xx), &v) in plane.indexed_iter() {
                    if v > best {
                        best = v;
                        bi = y * w + xx;
                    }
                }
                out[[i, j]] = best;
                arg.push(bi);
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalMaxPool { x, arg }, rg)
    }

    /// Inverted dropout; the identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f32) -> Var {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
            if rng.random::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let out = self.value(x) * &mask;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let v = self.value(x);
        if v.len() != shape.iter().product::<usize>() {
            return Err(NnError::Shape(format!("reshape {:?} to {shape:?}", v.shape())));
        }
        let out = v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("size checked");
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Row `i` of the result is columns `slots[i]·width .. (slots[i]+1)·width`
    /// of row `i` of `x` (N, S·width).
    pub fn select_slots(&mut self, x: Var, width: usize, slots: &[usize]) -> Result<Var, NnError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 || sh[0] != slots.len() || width == 0 || slots.iter().any(|&u| (u + 1) * width > sh[1]) {
            return Err(NnError::Shape(format!("select {} slots of width {width} from {sh:?}", slots.len())));
        }
        let xv = self.v2(x);
        let out = Array2::from_shape_fn((sh[0], width), |(i, k)| xv[[i, slots[i] * width + k]]);
        let rg = self.rg(x);
        Ok(self.push(out.into_dyn(), Op::SelectSlots { x, width, slots: slots.to_vec() }, rg))
    }

    /// Bilinear resize of the spatial dims; the identity when sizes match.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let sh = self.shape(x);
        if sh[2] == h && sh[3] == w {
            return x;
        }
        let (ih, iw) = (sh[2], sh[3]);
        let out = kernels::resize_bilinear_forward(self.v4(x), h, w);
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Resize { x, h: ih, w: iw }, rg)
    }

    /// Reverse pass from one or more outputs with their seed gradients.
    pub fn backward(&self, seeds: &[(Var, ArrayD<f32>)]) -> Result<Gradients, NnError> {
        let mut grads: Vec<Option<ArrayD<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} for output {:?}",
                    g.shape(),
                    self.shape(*v)
                )));
            }
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0);
        }
        let mut out = Gradients::default();
        for idx in (0..=top).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(&node.op, Var(idx), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        op: &Op,
        me: Var,
        g: ArrayD<f32>,
        grads: &mut [Option<ArrayD<f32>>],
        out: &mut Gradients,
    ) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, d: ArrayD<f32>, grads: &mut [Option<ArrayD<f32>>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match op {
            Op::Input => {}
            Op::Param(id) => {
                debug_assert_eq!(self.store.get(*id).role, Role::Weight);
                match out.by_param.get_mut(id) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                let r = kernels::conv2d_backward(
                    self.v4(*x),
                    self.v4(*w),
                    gv,
                    *pad,
                    rg(*x),
                    rg(*w),
                    b.is_some_and(rg),
                );
                if let Some(d) = r.dx {
                    send(*x, d.into_dyn(), grads);
                }
                if let Some(d) = r.dw {
                    send(*w, d.into_dyn(), grads);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    send(*b, d.into_dyn(), grads);
                }
            }
            Op::ConvT2x2 { x, w, b } => {
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                let r = kernels::conv_t2x2_backward(self.v4(*x), self.v4(*w), gv, rg(*x), rg(*w), b.is_some_and(rg));
                if let Some(d) = r.dx {
                    send(*x, d.into_dyn(), grads);
                }
                if let Some(d) = r.dw {
                    send(*w, d.into_dyn(), grads);
                }
                if let (Some(b), Some(d)) = (b, r.db) {
                    send(*b, d.into_dyn(), grads);
                }
            }
            Op::MaxPool2 { x, arg } => {
                let xd = self.v4(*x).dim();
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                send(*x, kernels::max_pool2_backward(gv, arg, xd).into_dyn(), grads);
            }
            Op::Relu(x) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                send(*x, d, grads);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d *= slope
                    }
                });
                send(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(me)).for_each(|d, &y| *d *= y * (1.0 - y));
                send(*x, d, grads);
            }
            Op::SigmoidEvery { x, period, offset } => {
                let mut d = g;
                let y = self.value(me);
                for (mut drow, yrow) in d.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    for (j, (dv, &yv)) in drow.iter_mut().zip(yrow.iter()).enumerate() {
                        if j % period == *offset {
                            *dv *= yv * (1.0 - yv);
                        }
                    }
                }
                send(*x, d, grads);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let gv = g.into_dimensionality::<Ix4>().expect("rank 4");
                let (n, c, h, w) = gv.dim();
                let m = (n * h * w) as f32;
                let gam = self.value(*gamma);
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for ch in 0..c {
                    let gp = gv.slice(s![.., ch, .., ..]);
                    let xp = xhat.slice(s![.., ch, .., ..]);
                    dbeta[ch] = gp.sum();
                    dgamma[ch] = Zip::from(&gp).and(&xp).fold(0.0f32, |a, &g, &x| a + g * x);
                }
                if rg(*x) {
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        let gp = gv.slice(s![.., ch, .., ..]);
                        let mut dp = dx.slice_mut(s![.., ch, .., ..]);
                        if *batch_stats {
                            let xp = xhat.slice(s![.., ch, .., ..]);
                            let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
                            Zip::from(&mut dp).and(&gp).and(&xp).for_each(|d, &g, &xh| {
                                *d = k * (g - sb - xh * sg);
                            });
                        } else {
                            Zip::from(&mut dp).and(&gp).for_each(|d, &g| *d = k * g);
                        }
                    }
                    send(*x, dx.into_dyn(), grads);
                }
                send(*gamma, dgamma.into_dyn(), grads);
                send(*beta, dbeta.into_dyn(), grads);
            }
            Op::Add(a, b) => {
                if rg(*b) {
                    send(*b, g.clone(), grads);
                }
                send(*a, g, grads);
            }
            Op::AddChannelBroadcast { x, s: sm } => {
                if rg(*sm) {
                    let ds = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*sm, ds, grads);
                }
                send(*x, g, grads);
            }
            Op::ScaleChannels { x, gate } => {
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                let (n, c, _, _) = gv.dim();
                if rg(*gate) {
                    let xv = self.v4(*x);
                    let dg = Array2::from_shape_fn((n, c), |(i, j)| {
                        Zip::from(gv.slice(s![i, j, .., ..]))
                            .and(xv.slice(s![i, j, .., ..]))
                            .fold(0.0f32, |a, &g, &x| a + g * x)
                    });
                    send(*gate, dg.into_dyn(), grads);
                }
                if rg(*x) {
                    let gate_v = self.v2(*gate);
                    let mut dx = gv.to_owned();
                    for i in 0..n {
                        for j in 0..c {
                            let k = gate_v[[i, j]];
                            dx.slice_mut(s![i, j, .., ..]).mapv_inplace(|v| v * k);
                        }
                    }
                    send(*x, dx.into_dyn(), grads);
                }
            }
            Op::Concat1 { parts, sizes } => {
                let mut start = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    if rg(*p) {
                        let piece = g.slice_axis(Axis(1), (start..start + sz).into()).to_owned();
                        send(*p, piece, grads);
                    }
                    start += sz;
                }
            }
            Op::Linear { x, w, b } => {
                let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
                if rg(*x) {
                    send(*x, gv.dot(&self.v2(*w)).into_dyn(), grads);
                }
                if rg(*w) {
                    send(*w, gv.t().dot(&self.v2(*x)).into_dyn(), grads);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        send(*b, gv.sum_axis(Axis(0)).into_dyn(), grads);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let sh = self.shape(*x).to_vec();
                let area = (sh[2] * sh[3]) as f32;
                let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
                let dx = Array4::from_shape_fn((sh[0], sh[1], sh[2], sh[3]), |(i, j, _, _)| gv[[i, j]] / area);
                send(*x, dx.into_dyn(), grads);
            }
            Op::GlobalMaxPool { x, arg } => {
                let sh = self.shape(*x).to_vec();
                let gv = g.view().into_dimensionality::<Ix2>().expect("rank 2");
                let mut dx = Array4::<f32>::zeros((sh[0], sh[1], sh[2], sh[3]));
                let mut it = arg.iter();
                for i in 0..sh[0] {
                    for j in 0..sh[1] {
                        let a = *it.next().expect("argmax per output");
                        dx[[i, j, a / sh[3], a % sh[3]]] = gv[[i, j]];
                    }
                }
                send(*x, dx.into_dyn(), grads);
            }
            Op::Dropout { x, mask } => {
                send(*x, g * mask, grads);
            }
            Op::Reshape(x) => {
                let sh = self.shape(*x).to_vec();
                let d = g.into_shape_with_order(IxDyn(&sh)).expect("same size");
                send(*x, d, grads);
            }
            Op::SelectSlots { x, width, slots } => {
                let gv = g.into_dimensionality::<Ix2>().expect("rank 2");
                let mut dx = Array2::<f32>::zeros((gv.dim().0, self.shape(*x)[1]));
                for (i, &u) in slots.iter().enumerate() {
                    for k in 0..*width {
                        dx[[i, u * width + k]] = gv[[i, k]];
                    }
                }
                send(*x, dx.into_dyn(), grads);
            }
            Op::Resize { x, h, w } => {
                let gv = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                send(*x, kernels::resize_bilinear_backward(gv, *h, *w).into_dyn(), grads);
            }
        }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f32>>, g: ArrayD<f32>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
