//! Tensor-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Nodes are appended after their inputs, so walking the node list
//! backwards visits operations in reverse topological order.
//!
//! Subgradient conventions at kinks: `relu'(0) = 0`, the gradient of a
//! norm at the zero vector is zero, and every capsule activation has zero
//! gradient at the zero vector.

use crate::activations::{self, ActivationFn};
use crate::error::{Error, Result};
use crate::tensor::{axis_split, conv2d_forward, gemm, ConvGeometry, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Hinge parameters of the margin loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginLossParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        MarginLossParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

impl MarginLossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0 && self.lambda_down >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "margin loss needs 0 < m_minus < m_plus <= 1 and lambda >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Per-class loss terms and their derivative wrt the activation.
    pub fn term(&self, a: f64, positive: bool) -> (f64, f64) {
        if positive {
            let h = (self.m_plus - a).max(0.0);
            (h * h, -2.0 * h)
        } else {
            let h = (a - self.m_minus).max(0.0);
            (self.lambda_down * h * h, 2.0 * self.lambda_down * h)
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        cols: Vec<f64>,
        geo: ConvGeometry,
    },
    ChannelBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Softmax(Var, usize),
    Norm(Var, usize),
    Activation(Var, ActivationFn),
    Power(Var, u32),
    SliceCapsules {
        x: Var,
        dim: usize,
    },
    Votes {
        u: Var,
        w: Var,
    },
    WeightedSum {
        c: Var,
        v: Var,
    },
    Agreement {
        v: Var,
        u: Var,
    },
    MarginLoss {
        a: Var,
        targets: Vec<bool>,
        params: MarginLossParams,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on
/// any parameter.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1 && t.rank() <= 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×k×k`
    /// kernels, without padding.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize) -> Result<Var> {
        self.conv2d_padded(input, kernels, stride, 0)
    }

    /// As [`Self::conv2d`] with `padding` zeros around the input.
    pub fn conv2d_padded(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols, geo) = conv2d_forward(self.value(input), self.value(kernels), stride, padding)?;
        let rg = self.any_grad(&[input, kernels]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                cols,
                geo,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×H×W` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        xv.expect_rank(3, "channel_bias")?;
        if bv.shape() != [xv.shape()[0]] {
            return Err(Error::shape("channel_bias", format!("[{}]", xv.shape()[0]), format!("{:?}", bv.shape())));
        }
        let plane = xv.shape()[1] * xv.shape()[2];
        let mut out = xv.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bv.data()[c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::ChannelBias(x, bias), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            return av.zip_map(bv, op, f);
        }
        if is_scalar(bv) {
            let k = bv.data()[0];
            return Ok(av.map(|x| f(x, k)));
        }
        if is_scalar(av) {
            let k = av.data()[0];
            return Ok(bv.map(|x| f(k, x)));
        }
        Err(Error::shape(op, format!("{:?}", av.shape()), format!("{:?}", bv.shape())))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product; either side may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax_axis(axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn vector_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).norm_axis(axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Norm(a, axis), rg))
    }

    fn rows_op(&mut self, a: Var, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let x = self.value(a);
        x.expect_rank(2, op)?;
        let d = x.shape()[1];
        let mut out = Tensor::zeros(x.shape());
        if d > 0 {
            for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
                f(src, dst);
            }
        }
        Ok(out)
    }

    /// Applies a capsule activation to every row of an `N×d` tensor.
    pub fn activation(&mut self, a: Var, act: ActivationFn) -> Result<Var> {
        act.validate()?;
        let out = self.rows_op(a, "activation", |s, o| act.apply_into(s, o))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Activation(a, act), rg))
    }

    pub fn squash(&mut self, a: Var) -> Result<Var> {
        self.activation(a, ActivationFn::OriginalSquash)
    }

    /// `Power_n` applied to every row of an `N×d` tensor.
    pub fn power(&mut self, a: Var, n: u32) -> Result<Var> {
        if n == 0 {
            return Err(Error::InvalidArgument("power needs n >= 1".into()));
        }
        let out = self.rows_op(a, "power", |u, o| o.copy_from_slice(&activations::powered_activation(u, n)))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Power(a, n), rg))
    }

    /// Regroups a `(P·D)×H×W` feature map into `(P·H·W)×D` capsule rows.
    ///
    /// Capsule `p·H·W + y·W + x` holds channels `p·D .. (p+1)·D` at `(y, x)`.
    pub fn slice_capsules(&mut self, x: Var, dim: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank(3, "slice_capsules")?;
        let (ch, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if dim == 0 || ch % dim != 0 {
            return Err(Error::shape(
                "slice_capsules",
                format!("channel count divisible by capsule dim {dim}"),
                format!("{ch}"),
            ));
        }
        let groups = ch / dim;
        let mut out = Tensor::zeros(&[groups * h * w, dim]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..groups {
            for d in 0..dim {
                let plane = &src[(p * dim + d) * h * w..(p * dim + d + 1) * h * w];
                for (pos, &v) in plane.iter().enumerate() {
                    dst[(p * h * w + pos) * dim + d] = v;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCapsules { x, dim }, rg))
    }

    /// Votes `v[i,j] = w[i,j] · u[i]` for `u: N_in×d_in` and
    /// `w: N_in×N_out×d_out×d_in`, giving `N_in×N_out×d_out`.
    pub fn capsule_votes(&mut self, u: Var, w: Var) -> Result<Var> {
        let (uv, wv) = (self.value(u), self.value(w));
        uv.expect_rank(2, "capsule_votes")?;
        wv.expect_rank(4, "capsule_votes")?;
        let (n_in, d_in) = (uv.shape()[0], uv.shape()[1]);
        let ws = wv.shape();
        if ws[0] != n_in || ws[3] != d_in {
            return Err(Error::shape(
                "capsule_votes",
                format!("[{n_in}, _, _, {d_in}]"),
                format!("{ws:?}"),
            ));
        }
        let (n_out, d_out) = (ws[1], ws[2]);
        let rows = n_out * d_out;
        // per-capsule mat-vecs are too small for gemm's packing to pay off
        let mut out = Tensor::zeros(&[n_in, n_out, d_out]);
        for (i, (dst, wi)) in out.data_mut().chunks_mut(rows).zip(wv.data().chunks(rows * d_in)).enumerate() {
            let ui = uv.row(i);
            for (o, wr) in dst.iter_mut().zip(wi.chunks(d_in)) {
                *o = wr.iter().zip(ui).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.any_grad(&[u, w]);
        Ok(self.push(out, Op::Votes { u, w }, rg))
    }

    /// `s[j] = Σ_i c[i,j] · v[i,j]` for `c: N_in×N_out`, `v: N_in×N_out×d`.
    pub fn weighted_vote_sum(&mut self, c: Var, v: Var) -> Result<Var> {
        let (cv, vv) = (self.value(c), self.value(v));
        vv.expect_rank(3, "weighted_vote_sum")?;
        let (n_in, n_out, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        if cv.shape() != [n_in, n_out] {
            return Err(Error::shape("weighted_vote_sum", format!("[{n_in}, {n_out}]"), format!("{:?}", cv.shape())));
        }
        let mut out = Tensor::zeros(&[n_out, d]);
        let (cd, vd) = (cv.data(), vv.data());
        let od = out.data_mut();
        for i in 0..n_in {
            for j in 0..n_out {
                let k = cd[i * n_out + j];
                let vote = &vd[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                for (o, &x) in od[j * d..(j + 1) * d].iter_mut().zip(vote) {
                    *o += k * x;
                }
            }
        }
        let rg = self.any_grad(&[c, v]);
        Ok(self.push(out, Op::WeightedSum { c, v }, rg))
    }

    /// Agreement `a[i,j] = v[i,j] · u[j]` for `v: N_in×N_out×d`, `u: N_out×d`.
    pub fn agreement(&mut self, v: Var, u: Var) -> Result<Var> {
        let (vv, uv) = (self.value(v), self.value(u));
        vv.expect_rank(3, "agreement")?;
        let (n_in, n_out, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        if uv.shape() != [n_out, d] {
            return Err(Error::shape("agreement", format!("[{n_out}, {d}]"), format!("{:?}", uv.shape())));
        }
        let mut out = Tensor::zeros(&[n_in, n_out]);
        for i in 0..n_in {
            for j in 0..n_out {
                let vote = &vv.data()[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                out.data_mut()[i * n_out + j] = vote.iter().zip(uv.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.any_grad(&[v, u]);
        Ok(self.push(out, Op::Agreement { v, u }, rg))
    }

    /// Margin loss over class activations `a` (rank 1); `targets[k]` marks
    /// the positive classes.
    pub fn margin_loss(&mut self, a: Var, targets: &[bool], params: MarginLossParams) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank(1, "margin_loss")?;
        if targets.len() != av.len() {
            return Err(Error::shape("margin_loss", format!("{} targets", av.len()), format!("{}", targets.len())));
        }
        let loss = av.data().iter().zip(targets).map(|(&x, &t)| params.term(x, t).0).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MarginLoss {
                a,
                targets: targets.to_vec(),
                params,
            },
            rg,
        ))
    }

    /// Reverse pass seeded with ones, i.e. the gradient of the sum of all
    /// elements of `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::ones(self.value(output).shape()));
        self.backward_from(grads, output)
    }

    /// Reverse pass from an explicit seed gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        Ok(self.backward_from(grads, output))
    }

    fn backward_from(&self, mut grads: Vec<Option<Tensor>>, output: Var) -> Gradients {
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient flowing into one side of a scalar-broadcasting binary op.
    fn reduce_broadcast(target: &Tensor, g: Tensor) -> Tensor {
        if target.shape() == g.shape() {
            g
        } else {
            let total = g.sum();
            Tensor::full(target.shape(), total)
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), 0.0);
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                cols,
                geo,
            } => {
                let kv = val(*kernels);
                let c_out = kv.shape()[0];
                let patch = kv.len() / c_out;
                let positions = geo.out_height() * geo.out_width();
                if wants(*kernels) {
                    let mut dk = Tensor::zeros(kv.shape());
                    gemm(c_out, positions, patch, g.data(), false, cols, true, dk.data_mut(), 0.0);
                    self.accumulate(grads, *kernels, dk);
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; patch * positions];
                    gemm(patch, c_out, positions, kv.data(), true, g.data(), false, &mut dcols, 0.0);
                    let mut dx = Tensor::zeros(val(*input).shape());
                    geo.col2im(&dcols, dx.data_mut());
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::ChannelBias(x, b) => {
                if wants(*b) {
                    let c = val(*b).len();
                    let plane = g.len() / c;
                    let db: Vec<f64> = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(db));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, Self::reduce_broadcast(val(*a), g.clone()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, Self::reduce_broadcast(val(*b), g.clone()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let prod = |other: &Tensor| -> Tensor {
                    if other.shape() == g.shape() {
                        g.mul(other).expect("shapes checked in forward")
                    } else {
                        g.scale(other.data()[0])
                    }
                };
                if wants(*a) {
                    self.accumulate(grads, *a, Self::reduce_broadcast(av, prod(bv)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, Self::reduce_broadcast(bv, prod(av)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let dx = g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 }).expect("same shape");
                self.accumulate(grads, *a, dx);
            }
            Op::Reshape(a) => {
                let dx = g.clone().reshape(val(*a).shape()).expect("same element count");
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis, "softmax").expect("checked in forward");
                let mut dx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for x in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + x;
                        let dotp: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            dx.data_mut()[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Norm(a, axis) => {
                let x = val(*a);
                let n = &node.value;
                let (outer, len, inner) = axis_split(x.shape(), *axis, "vector_norm").expect("checked in forward");
                let mut dx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            let r = n.data()[o * inner + i];
                            if r > 0.0 {
                                let at = (o * len + k) * inner + i;
                                dx.data_mut()[at] = g.data()[o * inner + i] * x.data()[at] / r;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Activation(a, act) => {
                let dx = self.rows_vjp(val(*a), g, |s, gi, out| act.vjp(s, gi, out));
                self.accumulate(grads, *a, dx);
            }
            Op::Power(a, n) => {
                let dx = self.rows_vjp(val(*a), g, |u, gi, out| activations::power_vjp(u, *n, gi, out));
                self.accumulate(grads, *a, dx);
            }
            Op::SliceCapsules { x, dim } => {
                let xv = val(*x);
                let (ch, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = Tensor::zeros(xv.shape());
                for p in 0..ch / dim {
                    for d in 0..*dim {
                        let plane = &mut dx.data_mut()[(p * dim + d) * h * w..(p * dim + d + 1) * h * w];
                        for (pos, v) in plane.iter_mut().enumerate() {
                            *v = g.data()[(p * h * w + pos) * dim + d];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Votes { u, w } => {
                let (uv, wv) = (val(*u), val(*w));
                let d_in = uv.shape()[1];
                let rows = wv.shape()[1] * wv.shape()[2];
                if wants(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    for (i, dwi) in dw.data_mut().chunks_mut(rows * d_in).enumerate() {
                        let (ui, gi) = (uv.row(i), &g.data()[i * rows..(i + 1) * rows]);
                        for (dst, &gr) in dwi.chunks_mut(d_in).zip(gi) {
                            dst.iter_mut().zip(ui).for_each(|(o, &x)| *o = gr * x);
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if wants(*u) {
                    let mut du = Tensor::zeros(uv.shape());
                    for (i, dui) in du.data_mut().chunks_mut(d_in).enumerate() {
                        let wi = &wv.data()[i * rows * d_in..(i + 1) * rows * d_in];
                        let gi = &g.data()[i * rows..(i + 1) * rows];
                        for (wr, &gr) in wi.chunks(d_in).zip(gi) {
                            dui.iter_mut().zip(wr).for_each(|(o, &x)| *o += gr * x);
                        }
                    }
                    self.accumulate(grads, *u, du);
                }
            }
            Op::WeightedSum { c, v } => {
                let (cv, vv) = (val(*c), val(*v));
                let (n_in, n_out, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                if wants(*c) {
                    let mut dc = Tensor::zeros(cv.shape());
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let vote = &vv.data()[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                            dc.data_mut()[i * n_out + j] = vote.iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *c, dc);
                }
                if wants(*v) {
                    let mut dv = Tensor::zeros(vv.shape());
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let k = cv.data()[i * n_out + j];
                            let dst = &mut dv.data_mut()[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                            dst.iter_mut().zip(g.row(j)).for_each(|(o, gj)| *o = k * gj);
                        }
                    }
                    self.accumulate(grads, *v, dv);
                }
            }
            Op::Agreement { v, u } => {
                let (vv, uv) = (val(*v), val(*u));
                let (n_in, n_out, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                if wants(*v) {
                    let mut dv = Tensor::zeros(vv.shape());
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let k = g.data()[i * n_out + j];
                            let dst = &mut dv.data_mut()[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                            dst.iter_mut().zip(uv.row(j)).for_each(|(o, uj)| *o = k * uj);
                        }
                    }
                    self.accumulate(grads, *v, dv);
                }
                if wants(*u) {
                    let mut du = Tensor::zeros(uv.shape());
                    for i in 0..n_in {
                        for j in 0..n_out {
                            let k = g.data()[i * n_out + j];
                            let vote = &vv.data()[(i * n_out + j) * d..(i * n_out + j + 1) * d];
                            du.data_mut()[j * d..(j + 1) * d].iter_mut().zip(vote).for_each(|(o, x)| *o += k * x);
                        }
                    }
                    self.accumulate(grads, *u, du);
                }
            }
            Op::MarginLoss { a, targets, params } => {
                let scale = g.item();
                let da = val(*a)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| scale * params.term(x, t).1)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(da));
            }
        }
    }

    fn rows_vjp(&self, x: &Tensor, g: &Tensor, f: impl Fn(&[f64], &[f64], &mut [f64])) -> Tensor {
        let d = x.shape()[1];
        let mut dx = Tensor::zeros(x.shape());
        if d > 0 {
            for ((s, gi), out) in x.data().chunks(d).zip(g.data().chunks(d)).zip(dx.data_mut().chunks_mut(d)) {
                f(s, gi, out);
            }
        }
        dx
    }
}
