//! Reverse-mode differentiation over a flat tape.
//!
//! A `Graph` owns every tensor produced during one forward pass. Each op
//! records just enough context to push gradients back to its inputs;
//! `backward` walks the tape once in reverse creation order. Gradients are
//! only materialized for nodes on a path to a gradient-requiring leaf.
//!
//! All kernels are single-threaded with fixed iteration order, so repeated
//! runs are bit-identical regardless of how many worker threads the caller
//! uses at a coarser level.

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{numel, Shape, Tensor};

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    /// (N,C,H,W) -> (N,C,1,1), mean over the spatial extent.
    GlobalAvgPerChannel,
    /// (N,C,H,W) -> (N,1,H,W), mean over channels.
    ChannelwiseMeanMap,
    /// (N,C,H,W) -> (N,1,H,W), max over channels (first index wins ties).
    ChannelwiseMaxMap,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Sqrt,
    Abs,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Unary {
        input: Var,
        kind: UnaryKind,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    MaxElem {
        a: Var,
        b: Var,
    },
    GlobalAvg {
        input: Var,
    },
    ChannelMean {
        input: Var,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    MeanAll {
        input: Var,
    },
    SumAll {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    /// Two (1,C,1,1) vectors packed into a (1,2,1,C) row tensor.
    PackStats {
        mu: Var,
        sigma: Var,
    },
    /// One row of a (1,R,1,C) tensor as (1,C,1,1).
    ChannelRow {
        input: Var,
        row: usize,
    },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

fn broadcast_shape(context: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0usize; 4];
    for d in 0..4 {
        out[d] = if a[d] == b[d] || b[d] == 1 {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else {
            return Err(Error::ShapeMismatch {
                context,
                lhs: a,
                rhs: b,
            });
        };
    }
    Ok(out)
}

/// Row-major strides with zeros on broadcast (size-1) dims.
fn broadcast_strides(shape: Shape, out: Shape) -> [usize; 4] {
    let full = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0usize; 4];
    for d in 0..4 {
        s[d] = if shape[d] == out[d] { full[d] } else { 0 };
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    /// Register an input tensor. Gradients are only computed for leaves
    /// created with `requires_grad = true` (and intermediates above them).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable input (fixed kernels, targets, constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    // forward ops

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv::forward(
            &self.values[input.0],
            &self.values[kernel.0],
            &self.values[bias.0],
            stride,
            padding,
        )?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    fn unary(&mut self, input: Var, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var {
        let out = self.values[input.0].map(f);
        let needs = self.needs(input);
        self.push(out, Op::Unary { input, kind }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Sigmoid, stable_sigmoid)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Exp, f64::exp)
    }

    pub fn sqrt(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Sqrt, f64::sqrt)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, UnaryKind::Abs, f64::abs)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.values[input.0].map(|x| x * factor);
        let needs = self.needs(input);
        self.push(out, Op::Scale { input, factor }, needs)
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        let out = self.values[input.0].map(|x| x + offset);
        let needs = self.needs(input);
        self.push(out, Op::AddScalar { input }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, context: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(context, sa, sb)?;
        let stra = broadcast_strides(sa, out_shape);
        let strb = broadcast_strides(sb, out_shape);
        let ad = self.values[a.0].data();
        let bd = self.values[b.0].data();
        let mut out = Vec::with_capacity(numel(out_shape));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        for n in 0..out_shape[0] {
            let (an, bn) = (n * stra[0], n * strb[0]);
            for c in 0..out_shape[1] {
                let (ac, bc) = (an + c * stra[1], bn + c * strb[1]);
                for y in 0..out_shape[2] {
                    let (ay, by) = (ac + y * stra[2], bc + y * strb[2]);
                    for x in 0..out_shape[3] {
                        out.push(f(ad[ay + x * stra[3]], bd[by + x * strb[3]]));
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Binary { a, b, kind }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, "div")
    }

    /// Elementwise maximum. Ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: "max_elem",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let out = Tensor::from_vec(
            self.shape(a),
            self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(&x, &y)| if x >= y { x } else { y })
                .collect(),
        )?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MaxElem { a, b }, needs))
    }

    pub fn reduce(&mut self, input: Var, kind: ReduceKind) -> Result<Var> {
        let [n_b, c_n, h, w] = self.shape(input);
        if n_b * c_n * h * w == 0 {
            return Err(Error::InvalidArg("reduce on empty tensor".into()));
        }
        match kind {
            ReduceKind::GlobalAvgPerChannel => Ok(self.global_avg(input)),
            ReduceKind::ChannelwiseMeanMap => Ok(self.channel_mean(input)),
            ReduceKind::ChannelwiseMaxMap => Ok(self.channel_max(input)),
        }
    }

    fn global_avg(&mut self, input: Var) -> Var {
        let [n_b, c_n, h, w] = self.shape(input);
        let id = self.values[input.0].data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = Tensor::zeros([n_b, c_n, 1, 1]);
        for n in 0..n_b {
            for c in 0..c_n {
                let plane = &id[((n * c_n + c) * h) * w..][..h * w];
                out.data_mut()[n * c_n + c] = plane.iter().sum::<f64>() * inv;
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::GlobalAvg { input }, needs)
    }

    fn channel_mean(&mut self, input: Var) -> Var {
        let [n_b, c_n, h, w] = self.shape(input);
        let id = self.values[input.0].data();
        let inv = 1.0 / c_n as f64;
        let mut out = Tensor::zeros([n_b, 1, h, w]);
        let od = out.data_mut();
        for n in 0..n_b {
            let orow = &mut od[n * h * w..][..h * w];
            for c in 0..c_n {
                let plane = &id[((n * c_n + c) * h) * w..][..h * w];
                for (o, v) in orow.iter_mut().zip(plane) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::ChannelMean { input }, needs)
    }

    fn channel_max(&mut self, input: Var) -> Var {
        let [n_b, c_n, h, w] = self.shape(input);
        let id = self.values[input.0].data();
        let mut out = Tensor::zeros([n_b, 1, h, w]);
        let mut argmax = vec![0u32; n_b * h * w];
        {
            let od = out.data_mut();
            for n in 0..n_b {
                for i in 0..h * w {
                    let mut best = id[(n * c_n * h) * w + i];
                    let mut best_c = 0u32;
                    for c in 1..c_n {
                        let v = id[((n * c_n + c) * h) * w + i];
                        if v > best {
                            best = v;
                            best_c = c as u32;
                        }
                    }
                    od[n * h * w + i] = best;
                    argmax[n * h * w + i] = best_c;
                }
            }
        }
        let needs = self.needs(input);
        self.push(out, Op::ChannelMax { input, argmax }, needs)
    }

    pub fn mean_all(&mut self, input: Var) -> Var {
        let t = &self.values[input.0];
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(input);
        self.push(Tensor::scalar(m), Op::MeanAll { input }, needs)
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let s = self.values[input.0].data().iter().sum::<f64>();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s), Op::SumAll { input }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                context: "concat_channels",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
        let plane = ha * wa;
        {
            let od = out.data_mut();
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for n in 0..na {
                let dst = &mut od[n * (ca + cb) * plane..][..(ca + cb) * plane];
                dst[..ca * plane].copy_from_slice(&ad[n * ca * plane..][..ca * plane]);
                dst[ca * plane..].copy_from_slice(&bd[n * cb * plane..][..cb * plane]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    /// Pack per-channel statistics vectors (1,C,1,1) into a (1,2,1,C) tensor
    /// with the means in row 0 and the second statistic in row 1.
    pub fn pack_stats(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(mu);
        if self.shape(sigma) != [n, c, h, w] || (n, h, w) != (1, 1, 1) {
            return Err(Error::ShapeMismatch {
                context: "pack_stats (expects two (1,C,1,1) tensors)",
                lhs: self.shape(mu),
                rhs: self.shape(sigma),
            });
        }
        let mut data = Vec::with_capacity(2 * c);
        data.extend_from_slice(self.values[mu.0].data());
        data.extend_from_slice(self.values[sigma.0].data());
        let out = Tensor::from_vec([1, 2, 1, c], data)?;
        let needs = self.needs(mu) || self.needs(sigma);
        Ok(self.push(out, Op::PackStats { mu, sigma }, needs))
    }

    /// Extract row `row` of a (1,R,1,C) tensor as (1,C,1,1).
    pub fn channel_row(&mut self, input: Var, row: usize) -> Result<Var> {
        let [n, r, h, c] = self.shape(input);
        if n != 1 || h != 1 || row >= r {
            return Err(Error::InvalidArg(format!(
                "channel_row: row {row} of shape {:?}",
                self.shape(input)
            )));
        }
        let data = self.values[input.0].data()[row * c..][..c].to_vec();
        let out = Tensor::from_vec([1, c, 1, 1], data)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::ChannelRow { input, row }, needs))
    }

    // backward

    fn acc_grad(&mut self, v: Var, update: impl FnOnce(&mut Tensor)) {
        if !self.needs[v.0] {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.values[v.0].shape()));
        }
        update(self.grads[v.0].as_mut().unwrap());
    }

    /// Propagate gradients from a scalar node back to every
    /// gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar node, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.values[loss.0].item().is_finite() {
            return Err(Error::NonFinite("loss passed to backward".into()));
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backprop_one(i, &g, &op);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_one(&mut self, node: usize, g: &Tensor, op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                if self.needs(*input) {
                    let gi = conv::backward_input(
                        g,
                        &self.values[kernel.0],
                        self.values[input.0].shape(),
                        *stride,
                        *padding,
                    );
                    self.acc_grad(*input, |t| t.axpy(1.0, &gi));
                }
                if self.needs(*kernel) {
                    let gk = conv::backward_kernel(
                        g,
                        &self.values[input.0],
                        self.values[kernel.0].shape(),
                        *stride,
                        *padding,
                    );
                    self.acc_grad(*kernel, |t| t.axpy(1.0, &gk));
                }
                if self.needs(*bias) {
                    let gb = conv::backward_bias(g);
                    self.acc_grad(*bias, |t| t.axpy(1.0, &gb));
                }
            }
            Op::Unary { input, kind } => {
                let x = self.values[input.0].data();
                let y = self.values[node].data();
                let mut gi = Tensor::zeros(self.values[input.0].shape());
                {
                    let gid = gi.data_mut();
                    match kind {
                        UnaryKind::Relu => {
                            for ((d, &xv), &gv) in gid.iter_mut().zip(x).zip(g.data()) {
                                if xv > 0.0 {
                                    *d = gv;
                                }
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for ((d, &yv), &gv) in gid.iter_mut().zip(y).zip(g.data()) {
                                *d = gv * yv * (1.0 - yv);
                            }
                        }
                        UnaryKind::Exp => {
                            for ((d, &yv), &gv) in gid.iter_mut().zip(y).zip(g.data()) {
                                *d = gv * yv;
                            }
                        }
                        UnaryKind::Sqrt => {
                            // d sqrt(x) = 1/(2 sqrt(x)); clamp at zero so a
                            // zero-variance channel cannot poison the pass.
                            for ((d, &yv), &gv) in gid.iter_mut().zip(y).zip(g.data()) {
                                *d = gv * 0.5 / yv.max(1e-12);
                            }
                        }
                        UnaryKind::Abs => {
                            for ((d, &xv), &gv) in gid.iter_mut().zip(x).zip(g.data()) {
                                *d = gv * if xv > 0.0 {
                                    1.0
                                } else if xv < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
                self.acc_grad(*input, |t| t.axpy(1.0, &gi));
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                let gd = g.data();
                self.acc_grad(*input, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(gd) {
                        *d += f * gv;
                    }
                });
            }
            Op::AddScalar { input } => {
                self.acc_grad(*input, |t| t.axpy(1.0, g));
            }
            Op::Binary { a, b, kind } => {
                let out_shape = g.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let stra = broadcast_strides(sa, out_shape);
                let strb = broadcast_strides(sb, out_shape);
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                let mut ga = need_a.then(|| Tensor::zeros(sa));
                let mut gb = need_b.then(|| Tensor::zeros(sb));
                let ad = self.values[a.0].data();
                let bd = self.values[b.0].data();
                let gd = g.data();
                let mut gi = 0usize;
                for n in 0..out_shape[0] {
                    let (an, bn) = (n * stra[0], n * strb[0]);
                    for c in 0..out_shape[1] {
                        let (ac, bc) = (an + c * stra[1], bn + c * strb[1]);
                        for y in 0..out_shape[2] {
                            let (ay, by) = (ac + y * stra[2], bc + y * strb[2]);
                            for x in 0..out_shape[3] {
                                let gv = gd[gi];
                                gi += 1;
                                let ia = ay + x * stra[3];
                                let ib = by + x * strb[3];
                                match kind {
                                    BinaryKind::Add => {
                                        if let Some(t) = ga.as_mut() {
                                            t.data_mut()[ia] += gv;
                                        }
                                        if let Some(t) = gb.as_mut() {
                                            t.data_mut()[ib] += gv;
                                        }
                                    }
                                    BinaryKind::Sub => {
                                        if let Some(t) = ga.as_mut() {
                                            t.data_mut()[ia] += gv;
                                        }
                                        if let Some(t) = gb.as_mut() {
                                            t.data_mut()[ib] -= gv;
                                        }
                                    }
                                    BinaryKind::Mul => {
                                        if let Some(t) = ga.as_mut() {
                                            t.data_mut()[ia] += gv * bd[ib];
                                        }
                                        if let Some(t) = gb.as_mut() {
                                            t.data_mut()[ib] += gv * ad[ia];
                                        }
                                    }
                                    BinaryKind::Div => {
                                        let bv = bd[ib];
                                        if let Some(t) = ga.as_mut() {
                                            t.data_mut()[ia] += gv / bv;
                                        }
                                        if let Some(t) = gb.as_mut() {
                                            t.data_mut()[ib] -= gv * ad[ia] / (bv * bv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(t) = ga {
                    self.acc_grad(*a, |dst| dst.axpy(1.0, &t));
                }
                if let Some(t) = gb {
                    self.acc_grad(*b, |dst| dst.axpy(1.0, &t));
                }
            }
            Op::MaxElem { a, b } => {
                let ad = self.values[a.0].data();
                let bd = self.values[b.0].data();
                let gd = g.data();
                let mut ga = Tensor::zeros(self.shape(*a));
                let mut gb = Tensor::zeros(self.shape(*b));
                for i in 0..gd.len() {
                    if ad[i] >= bd[i] {
                        ga.data_mut()[i] = gd[i];
                    } else {
                        gb.data_mut()[i] = gd[i];
                    }
                }
                self.acc_grad(*a, |t| t.axpy(1.0, &ga));
                self.acc_grad(*b, |t| t.axpy(1.0, &gb));
            }
            Op::GlobalAvg { input } => {
                let [n_b, c_n, h, w] = self.shape(*input);
                let inv = 1.0 / (h * w) as f64;
                let gd = g.data();
                self.acc_grad(*input, |t| {
                    let td = t.data_mut();
                    for n in 0..n_b {
                        for c in 0..c_n {
                            let gv = gd[n * c_n + c] * inv;
                            for d in td[((n * c_n + c) * h) * w..][..h * w].iter_mut() {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::ChannelMean { input } => {
                let [n_b, c_n, h, w] = self.shape(*input);
                let inv = 1.0 / c_n as f64;
                let gd = g.data();
                self.acc_grad(*input, |t| {
                    let td = t.data_mut();
                    for n in 0..n_b {
                        let grow = &gd[n * h * w..][..h * w];
                        for c in 0..c_n {
                            let dst = &mut td[((n * c_n + c) * h) * w..][..h * w];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::ChannelMax { input, argmax } => {
                let [n_b, c_n, h, w] = self.shape(*input);
                let gd = g.data();
                self.acc_grad(*input, |t| {
                    let td = t.data_mut();
                    for n in 0..n_b {
                        for i in 0..h * w {
                            let c = argmax[n * h * w + i] as usize;
                            td[((n * c_n + c) * h) * w + i] += gd[n * h * w + i];
                        }
                    }
                });
            }
            Op::MeanAll { input } => {
                let n = self.values[input.0].numel() as f64;
                let gv = g.item() / n;
                self.acc_grad(*input, |t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumAll { input } => {
                let gv = g.item();
                self.acc_grad(*input, |t| {
                    for d in t.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let [na, ca, h, w] = self.shape(*a);
                let [_, cb, _, _] = self.shape(*b);
                let plane = h * w;
                let gd = g.data();
                self.acc_grad(*a, |t| {
                    let td = t.data_mut();
                    for n in 0..na {
                        let src = &gd[n * (ca + cb) * plane..][..ca * plane];
                        for (d, &gv) in td[n * ca * plane..][..ca * plane].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                });
                self.acc_grad(*b, |t| {
                    let td = t.data_mut();
                    for n in 0..na {
                        let src = &gd[(n * (ca + cb) + ca) * plane..][..cb * plane];
                        for (d, &gv) in td[n * cb * plane..][..cb * plane].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::PackStats { mu, sigma } => {
                let c = self.shape(*mu)[1];
                let gd = g.data();
                self.acc_grad(*mu, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(&gd[..c]) {
                        *d += gv;
                    }
                });
                self.acc_grad(*sigma, |t| {
                    for (d, &gv) in t.data_mut().iter_mut().zip(&gd[c..2 * c]) {
                        *d += gv;
                    }
                });
            }
            Op::ChannelRow { input, row } => {
                let [_, _, _, c] = self.shape(*input);
                let gd = g.data();
                let row = *row;
                self.acc_grad(*input, |t| {
                    let td = t.data_mut();
                    for i in 0..c {
                        td[row * c + i] += gd[i];
                    }
                });
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// finite-difference gradient checking

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at element {} (analytic {:.6e}, numeric {:.6e})",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_index,
            self.analytic_at_worst,
            self.numeric_at_worst
        )
    }
}

/// Check the backward pass of a scalar-valued map against central finite
/// differences (h = 1e-5). The error at each element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
pub fn grad_check<F>(f: F, input: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    const H: f64 = 1e-5;

    let mut g = Graph::new();
    let x = g.leaf(input.clone(), true);
    let out = f(&mut g, x)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArg(
            "grad_check requires a scalar-valued function".into(),
        ));
    }
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        pass: true,
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - H;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * H);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.range_f64(-1.0, 1.0))
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([1, 1, 1, 3], vec![-2.0, 0.0, 3.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let c5 = g.constant(Tensor::full([2, 3, 4, 4], 5.0));
        let avg = g.reduce(c5, ReduceKind::GlobalAvgPerChannel).unwrap();
        assert_eq!(g.shape(avg), [2, 3, 1, 1]);
        assert!(g.value(avg).data().iter().all(|&v| v == 5.0));

        // channels [1, 4, 2] at a single pixel
        let t = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 4.0, 2.0]).unwrap();
        let x = g.constant(t);
        let mx = g.reduce(x, ReduceKind::ChannelwiseMaxMap).unwrap();
        assert_eq!(g.value(mx).data(), &[4.0]);

        let t2 = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 4.0]).unwrap();
        let x2 = g.constant(t2);
        let mean = g.reduce(x2, ReduceKind::ChannelwiseMeanMap).unwrap();
        assert_eq!(g.value(mean).data(), &[2.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2), x = [1, 2] -> grad [2, 4]
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let mut g = Graph::new();
        let v = g.leaf(x, true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-12);
        assert!((grad.data()[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_function_zero_grad_passes() {
        let x = random_tensor([1, 1, 3, 3], 5);
        let rep = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(7.5))),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn conv_relu_composite_grad_check() {
        let x = random_tensor([1, 2, 5, 5], 11);
        let kernel = random_tensor([3, 2, 3, 3], 12);
        let bias = random_tensor([1, 3, 1, 1], 13);
        let rep = grad_check(
            |g, v| {
                let k = g.constant(kernel.clone());
                let b = g.constant(bias.clone());
                let c = g.conv2d(v, k, b, 1, 1)?;
                let r = g.relu(c);
                Ok(g.sum_all(r))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn conv_kernel_and_bias_grad_check() {
        let input = random_tensor([2, 2, 6, 6], 21);
        let kernel = random_tensor([3, 2, 3, 3], 22);
        let bias = random_tensor([1, 3, 1, 1], 23);
        let rep_k = grad_check(
            |g, v| {
                let i = g.constant(input.clone());
                let b = g.constant(bias.clone());
                let c = g.conv2d(i, v, b, 1, 1)?;
                let s = g.sigmoid(c);
                Ok(g.mean_all(s))
            },
            &kernel,
            1e-4,
        )
        .unwrap();
        assert!(rep_k.pass, "kernel: {rep_k}");

        let rep_b = grad_check(
            |g, v| {
                let i = g.constant(input.clone());
                let k = g.constant(kernel.clone());
                let c = g.conv2d(i, k, v, 2, 1)?;
                Ok(g.mean_all(c))
            },
            &bias,
            1e-4,
        )
        .unwrap();
        assert!(rep_b.pass, "bias: {rep_b}");
    }

    #[test]
    fn broadcast_binary_grad_check() {
        // (1,3,4,4) * (1,3,1,1) exercise of broadcast plus div/sqrt chain
        let x = random_tensor([1, 3, 4, 4], 31);
        let rep = grad_check(
            |g, v| {
                let mu = g.reduce(v, ReduceKind::GlobalAvgPerChannel)?;
                let d = g.sub(v, mu)?;
                let sq = g.mul(d, d)?;
                let var = g.reduce(sq, ReduceKind::GlobalAvgPerChannel)?;
                let sd = g.sqrt(var);
                let sde = g.add_scalar(sd, 1e-5);
                let z = g.div(d, sde)?;
                let z2 = g.mul(z, z)?;
                Ok(g.mean_all(z2))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn reduce_ops_grad_check() {
        let x = random_tensor([1, 4, 5, 5], 41);
        for kind in [
            ReduceKind::GlobalAvgPerChannel,
            ReduceKind::ChannelwiseMeanMap,
            ReduceKind::ChannelwiseMaxMap,
        ] {
            let rep = grad_check(
                |g, v| {
                    let r = g.reduce(v, kind)?;
                    let sq = g.mul(r, r)?;
                    Ok(g.sum_all(sq))
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(rep.pass, "{kind:?}: {rep}");
        }
    }

    #[test]
    fn abs_exp_maxelem_grad_check() {
        let x = random_tensor([1, 2, 3, 3], 51);
        let other = random_tensor([1, 2, 3, 3], 52);
        let rep = grad_check(
            |g, v| {
                let o = g.constant(other.clone());
                let m = g.max_elem(v, o)?;
                let a = g.abs(m);
                let e = g.exp(a);
                Ok(g.mean_all(e))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn concat_and_pack_grad_check() {
        let x = random_tensor([1, 2, 4, 4], 61);
        let rep = grad_check(
            |g, v| {
                let mean = g.reduce(v, ReduceKind::ChannelwiseMeanMap)?;
                let max = g.reduce(v, ReduceKind::ChannelwiseMaxMap)?;
                let cat = g.concat_channels(mean, max)?;
                let sq = g.mul(cat, cat)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "concat: {rep}");

        let rep2 = grad_check(
            |g, v| {
                let mu = g.reduce(v, ReduceKind::GlobalAvgPerChannel)?;
                let d = g.sub(v, mu)?;
                let sq = g.mul(d, d)?;
                let var = g.reduce(sq, ReduceKind::GlobalAvgPerChannel)?;
                let sd = g.sqrt(var);
                let packed = g.pack_stats(mu, sd)?;
                let row0 = g.channel_row(packed, 0)?;
                let row1 = g.channel_row(packed, 1)?;
                let s = g.add(row0, row1)?;
                let sq2 = g.mul(s, s)?;
                Ok(g.sum_all(sq2))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rep2.pass, "pack: {rep2}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grads_accumulate_across_shared_use() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }
}
