//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node holding the output value and whatever the backward rule
//! needs; [`Tape::backward`] then sweeps the nodes once in reverse order.
//! Leaves created with [`Tape::leaf`] collect gradients that persist (and
//! accumulate) across backward calls until [`Tape::zero_grad`].
//!
//! ```
//! use rsgn_core::autodiff::Tape;
//! use rsgn_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0));
//! let y = tape.add(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
//! ```

pub mod kernels;
mod optim;

pub use optim::{Adam, AdamConfig};

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every operation kind the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Sigmoid,
    MaxPool2,
    UpsampleBilinear,
    AdaptiveAvgPool,
    ConcatChannels,
    Add,
    WeightedBce,
    Sum,
    WeightedSum,
    LinearCombination,
}

impl OpKind {
    /// Operations with a backward rule, in registration order.
    pub const DIFFERENTIABLE: [OpKind; 13] = [
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::MaxPool2,
        OpKind::UpsampleBilinear,
        OpKind::AdaptiveAvgPool,
        OpKind::ConcatChannels,
        OpKind::Add,
        OpKind::WeightedBce,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::LinearCombination,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::AdaptiveAvgPool => "adaptive_avg_pool",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Add => "add",
            OpKind::WeightedBce => "weighted_bce",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::LinearCombination => "linear_combination",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    AdaptiveAvgPool {
        x: Var,
        size: usize,
    },
    Concat(Vec<Var>),
    Add(Var, Var),
    WeightedBce {
        pred: Var,
        target: Vec<f64>,
        betas: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    LinearCombination {
        terms: Vec<(Var, f64)>,
        divisor: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample(_) => OpKind::UpsampleBilinear,
            Op::AdaptiveAvgPool { .. } => OpKind::AdaptiveAvgPool,
            Op::Concat(_) => OpKind::ConcatChannels,
            Op::Add(..) => OpKind::Add,
            Op::WeightedBce { .. } => OpKind::WeightedBce,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::LinearCombination { .. } => OpKind::LinearCombination,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales every gradient emitted by `kind`'s backward rule
    /// by 1.5 so gradient checks can demonstrate they catch broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `x`: gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Hash of every branch decision recorded so far: the sign pattern
    /// feeding each ReLU and the argmax of each max-pool window. Two
    /// evaluations with equal signatures ran through the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| shape_err!("{what} must be NCHW, got shape {:?}", self.value(v).shape()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv2d input")?;
        let (oc, ic, kh, kw) = self.dims4(w, "conv2d weight")?;
        if ic != c {
            return Err(shape_err!(
                "conv2d channel axis: weight expects {ic} input channels, input has {c}"
            ));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(shape_err!("conv2d kernel axes: expected 1×1 or 3×3, got {kh}×{kw}"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(invalid!("conv2d stride must be 1 or 2, got {stride}"));
        }
        if self.value(b).shape() != [oc] {
            return Err(shape_err!(
                "conv2d bias axis: expected [{oc}], got {:?}",
                self.value(b).shape()
            ));
        }
        let geom = ConvGeom::new(c, h, wd, kh, padding, stride)
            .ok_or_else(|| shape_err!("conv2d spatial axes: {h}×{wd} input smaller than {kh}×{kw} kernel"))?;
        let per_in = c * h * wd;
        let per_out = oc * geom.oh * geom.ow;
        let mut out = vec![0.0; n * per_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                kernels::conv2d_forward(
                    &xv[i * per_in..(i + 1) * per_in],
                    &geom,
                    wv,
                    bv,
                    &mut out[i * per_out..(i + 1) * per_out],
                );
            }
        }
        let value = Tensor::new(vec![n, oc, geom.oh, geom.ow], out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 2×2 stride-2 transposed convolution; `w` is `(in, out, 2, 2)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv_transpose2d input")?;
        let (ic, oc, kh, kw) = self.dims4(w, "conv_transpose2d weight")?;
        if stride != 2 || kh != 2 || kw != 2 {
            return Err(invalid!(
                "conv_transpose2d must double the spatial size (2×2 kernel, stride 2); got {kh}×{kw} kernel, stride {stride}"
            ));
        }
        if ic != c {
            return Err(shape_err!(
                "conv_transpose2d channel axis: weight expects {ic} input channels, input has {c}"
            ));
        }
        if self.value(b).shape() != [oc] {
            return Err(shape_err!(
                "conv_transpose2d bias axis: expected [{oc}], got {:?}",
                self.value(b).shape()
            ));
        }
        let per_in = c * h * wd;
        let per_out = oc * 4 * h * wd;
        let mut out = vec![0.0; n * per_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                kernels::conv_t2_forward(
                    &xv[i * per_in..(i + 1) * per_in],
                    (c, h, wd),
                    wv,
                    bv,
                    &mut out[i * per_out..(i + 1) * per_out],
                );
            }
        }
        let value = Tensor::new(vec![n, oc, 2 * h, 2 * wd], out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 spatial axes must be even, got {h}×{w}"));
        }
        let len = n * c * (h / 2) * (w / 2);
        let mut out = vec![0.0; len];
        let mut argmax = vec![0; len];
        kernels::maxpool2_forward(self.value(x).data(), n * c, h, w, &mut out, &mut argmax);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres, clamped borders).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(invalid!("upsample factor must be at least 2, got {factor}"));
        }
        let (_, _, h, w) = self.dims4(x, "upsample input")?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// Bilinear resampling to an arbitrary `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "resize input")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(shape_err!("resize spatial axes must be non-empty"));
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        kernels::resize_forward(self.value(x).data(), n * c, (h, w), (out_h, out_w), &mut out);
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Upsample(x), rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "adaptive_avg_pool input")?;
        if size == 0 || size > h || size > w {
            return Err(shape_err!(
                "adaptive_avg_pool output size {size} exceeds spatial extent {h}×{w}"
            ));
        }
        let mut out = vec![0.0; n * c * size * size];
        kernels::adaptive_pool_forward(self.value(x).data(), n * c, (h, w), size, &mut out);
        let value = Tensor::new(vec![n, c, size, size], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::AdaptiveAvgPool { x, size }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| invalid!("concat_channels needs at least one input"))?;
        let (n, _, h, w) = self.dims4(first, "concat input")?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.dims4(v, "concat input")?;
            if vn != n {
                return Err(shape_err!("concat batch axis: {vn} vs {n}"));
            }
            if vh != h || vw != w {
                return Err(shape_err!("concat spatial axes: {vh}×{vw} vs {h}×{w}"));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape()[1] * plane;
                out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        let rg = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err!("add operands differ: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Class-balanced binary cross-entropy, averaged over the maps of the
    /// batch axis. Predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn weighted_bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err!(
                "weighted_bce prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            ));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(invalid!("weighted_bce target must be binary, found {bad}"));
        }
        let maps = if pv.rank() == 4 { pv.shape()[0] } else { 1 };
        let per = pv.len() / maps.max(1);
        let mut betas = Vec::with_capacity(maps);
        let mut total = 0.0;
        for i in 0..maps {
            let t = &target.data()[i * per..(i + 1) * per];
            let beta = kernels::negative_fraction(t);
            total += kernels::weighted_bce_value(&pv.data()[i * per..(i + 1) * per], t, beta);
            betas.push(beta);
        }
        let value = Tensor::scalar(total / maps as f64);
        let rg = self.needs(pred);
        Ok(self.push(
            value,
            Op::WeightedBce {
                pred,
                target: target.data().to_vec(),
                betas,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// `Σ x·weights` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err!(
                "weighted_sum {:?} vs weights {:?}",
                xv.shape(),
                weights.shape()
            ));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// `(Σ c_k · x_k) / divisor` over scalar operands.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)], divisor: f64) -> Result<Var> {
        if divisor == 0.0 {
            return Err(invalid!("linear_combination divisor must be non-zero"));
        }
        let mut acc = 0.0;
        for &(v, c) in terms {
            acc += c * self
                .value(v)
                .item()
                .ok_or_else(|| shape_err!("linear_combination operands must be scalars"))?;
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(acc / divisor),
            Op::LinearCombination {
                terms: terms.to_vec(),
                divisor,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                accumulate(&mut self.nodes[idx].grad, &g);
                continue;
            }
            let mut contributions = self.backward_rule(idx, &g);
            if self.fault == Some(self.nodes[idx].op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, c) in contributions {
                accumulate(&mut grads[v.0], &c);
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let n = xv.shape()[0];
                let per_in = geom.c * geom.h * geom.w;
                let oc = self.value(*b).len();
                let per_out = oc * geom.oh * geom.ow;
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; oc];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                for i in 0..n {
                    kernels::conv2d_backward(
                        &xv.data()[i * per_in..(i + 1) * per_in],
                        geom,
                        wv,
                        &g[i * per_out..(i + 1) * per_out],
                        &mut dw,
                        &mut db,
                        dx.as_mut().map(|d| &mut d[i * per_in..(i + 1) * per_in]),
                    );
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::ConvTranspose2d { x, w, b } => {
                let xv = self.value(*x);
                let (n, c, h, wd) = xv.dims4().expect("validated at record time");
                let wv = self.value(*w).data();
                let oc = self.value(*b).len();
                let per_in = c * h * wd;
                let per_out = oc * 4 * h * wd;
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; oc];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.len()]);
                for i in 0..n {
                    kernels::conv_t2_backward(
                        &xv.data()[i * per_in..(i + 1) * per_in],
                        (c, h, wd),
                        wv,
                        &g[i * per_out..(i + 1) * per_out],
                        &mut dw,
                        &mut db,
                        dx.as_mut().map(|d| &mut d[i * per_in..(i + 1) * per_in]),
                    );
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*x, d));
            }
            Op::Upsample(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("validated at record time");
                let (_, _, oh, ow) = node.value.dims4().expect("rank 4");
                let mut d = vec![0.0; xv.len()];
                kernels::resize_backward(g, n * c, (h, w), (oh, ow), &mut d);
                out.push((*x, d));
            }
            Op::AdaptiveAvgPool { x, size } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("validated at record time");
                let mut d = vec![0.0; xv.len()];
                kernels::adaptive_pool_backward(g, n * c, (h, w), *size, &mut d);
                out.push((*x, d));
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for i in 0..n {
                            let start = (i * total_c + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        out.push((v, d));
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::WeightedBce { pred, target, betas } => {
                let pv = self.value(*pred).data();
                let maps = betas.len();
                let per = pv.len() / maps;
                let mut d = vec![0.0; pv.len()];
                for (i, &beta) in betas.iter().enumerate() {
                    let span = i * per..(i + 1) * per;
                    kernels::weighted_bce_grad(
                        &pv[span.clone()],
                        &target[span.clone()],
                        beta,
                        g[0] / maps as f64,
                        &mut d[span],
                    );
                }
                out.push((*pred, d));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|w| w * g[0]).collect()));
            }
            Op::LinearCombination { terms, divisor } => {
                for &(v, c) in terms {
                    out.push((v, vec![g[0] * c / divisor]));
                }
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
