//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse creation order, so each operation is visited
//! exactly once and gradients flowing into a shared input add up.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvPlan, MatRef, Padding};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        plan: ConvPlan,
    },
    Conv2dTranspose {
        x: Var,
        k: Var,
        b: Option<Var>,
        plan: ConvPlan,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Crop(Var),
    Sum(Var),
    CrossEntropy {
        s: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dTranspose { .. } => "conv2d_transpose",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Concat(_) => "concat_channels",
            Op::Crop(_) => "crop",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupt: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Test fixture: makes `backward` scale the gradient flowing through
    /// every node produced by `op` by 1.1, so gradient checks must fail.
    pub fn corrupt_backward(&mut self, op: &'static str) {
        self.corrupt = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf; it receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last `backward` call w.r.t. `v`; zeros when `v`
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        let mut g = Tensor::zeros(value.shape());
        if let Some(d) = value.grad() {
            g.data_mut().copy_from_slice(d);
        }
        g
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = self.any_grad(inputs);
        self.push(value, op, needs)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let plan = ConvPlan::conv2d(self.shape(x), self.shape(k), stride, padding)?;
        check_bias(self, b, plan.c_out)?;
        let mut out = Tensor::zeros(plan.output);
        kernels::conv2d_forward(
            &plan,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.record(out, Op::Conv2d { x, k, b, plan }, &inputs))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let plan = ConvPlan::conv2d_transpose(self.shape(x), self.shape(k), stride)?;
        check_bias(self, b, plan.c_out)?;
        let mut out = Tensor::zeros(plan.output);
        kernels::conv2d_transpose_forward(
            &plan,
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.record(out, Op::Conv2dTranspose { x, k, b, plan }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (shape, data, argmax) = kernels::maxpool_forward(self.value(x).data(), self.shape(x), window)?;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.record(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.record(out, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax over the matrix view (rows = positions, cols = channels).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let cols = src.shape().c;
        let mut out = src.clone();
        out.clear_grad();
        if cols > 0 {
            for row in out.data_mut().chunks_exact_mut(cols) {
                softmax_in_place(row);
            }
        }
        self.record(out, Op::SoftmaxRows(x), &[x])
    }

    /// Matrix product of the matrix views. The output keeps `a`'s leading
    /// dims and takes `b`'s column count as channels.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.c != sb.rows() {
            return Err(Error::shape(format!(
                "matmul of {sa} ({}×{}) with {sb} ({}×{})",
                sa.rows(),
                sa.c,
                sb.rows(),
                sb.c
            )));
        }
        let mut out = Tensor::zeros([sa.n, sa.h, sa.w, sb.c]);
        kernels::gemm(
            MatRef::new(self.value(a).data(), sa.rows(), sa.c),
            MatRef::new(self.value(b).data(), sb.rows(), sb.c),
            out.data_mut(),
            false,
        );
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Matrix transpose; the result is shaped `1×1×cols×rows`.
    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = Tensor::from_vec(Shape::matrix(s.c, s.rows()), transposed(self.value(x).data(), s.rows(), s.c))
            .expect("transpose preserves element count");
        self.record(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.record(out, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        Ok(self.record(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h > s.h || w > s.w {
            return Err(Error::shape(format!("crop {s} to {h}×{w}")));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros([s.n, h, w, s.c]);
        for n in 0..s.n {
            for y in 0..h {
                let from = src.offset(n, y, 0, 0);
                let to = out.offset(n, y, 0, 0);
                out.data_mut()[to..to + w * s.c].copy_from_slice(&src.data()[from..from + w * s.c]);
            }
        }
        Ok(self.record(out, Op::Crop(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Summed binary cross-entropy of probabilities `s` against targets in
    /// `{0,1}`. `s` is clamped to `[eps, 1-eps]`; the gradient is zero in
    /// the clamped region.
    pub fn cross_entropy(&mut self, s: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let ss = self.shape(s);
        if ss.numel() != target.numel() || (ss.h, ss.w) != (target.shape().h, target.shape().w) {
            return Err(Error::shape(format!(
                "cross-entropy of prediction {ss} against target {}",
                target.shape()
            )));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::invalid(format!("loss clamp eps {eps} outside (0, 0.5)")));
        }
        let loss = self
            .value(s)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum();
        let op = Op::CrossEntropy {
            s,
            target: target.data().to_vec(),
            eps,
        };
        Ok(self.record(Tensor::scalar(loss), op, &[s]))
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("{what} of {} and {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    /// Back-propagates from the scalar `loss`, storing the gradient of every
    /// node in its tensor's grad slot (previous gradients are discarded).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {ls}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                if self.corrupt == Some(self.nodes[i].op.name()) {
                    let bad: Vec<f64> = g.iter().map(|v| v * 1.1).collect();
                    self.propagate(i, &bad, &mut grads);
                } else {
                    self.propagate(i, &g, &mut grads);
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) if node.needs_grad => node.value.set_grad(g)?,
                _ => node.value.clear_grad(),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, plan } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; plan.input.numel()]);
                let mut dk = self.wants(*k).then(|| vec![0.0; self.value(*k).numel()]);
                kernels::conv2d_backward(
                    plan,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                self.bias_grad(*b, g, plan.c_out, grads);
                accumulate_owned(grads, *x, dx);
                accumulate_owned(grads, *k, dk);
            }
            Op::Conv2dTranspose { x, k, b, plan } => {
                let mut dx = self.wants(*x).then(|| vec![0.0; plan.input.numel()]);
                let mut dk = self.wants(*k).then(|| vec![0.0; self.value(*k).numel()]);
                kernels::conv2d_transpose_backward(
                    plan,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                self.bias_grad(*b, g, plan.c_out, grads);
                accumulate_owned(grads, *x, dx);
                accumulate_owned(grads, *k, dk);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                accumulate_owned(grads, *x, Some(dx));
            }
            Op::Relu(x) => {
                let dx = out.data().iter().zip(g).map(|(&y, &d)| if y > 0.0 { d } else { 0.0 });
                accumulate_iter(grads, *x, out.numel(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = out.data().iter().zip(g).map(|(&y, &d)| d * y * (1.0 - y));
                accumulate_iter(grads, *x, out.numel(), dx);
            }
            Op::SoftmaxRows(x) => {
                let cols = out.shape().c;
                let mut dx = vec![0.0; out.numel()];
                if cols > 0 {
                    for ((y, d), o) in out
                        .data()
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                    {
                        let inner: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                        for ((o, &y), &d) in o.iter_mut().zip(y).zip(d) {
                            *o = y * (d - inner);
                        }
                    }
                }
                accumulate_owned(grads, *x, Some(dx));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let gm = MatRef::new(g, sa.rows(), sb.c);
                if self.wants(*a) {
                    let mut da = vec![0.0; sa.numel()];
                    kernels::gemm(gm, MatRef::new(self.value(*b).data(), sb.rows(), sb.c).t(), &mut da, false);
                    accumulate_owned(grads, *a, Some(da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; sb.numel()];
                    kernels::gemm(MatRef::new(self.value(*a).data(), sa.rows(), sa.c).t(), gm, &mut db, false);
                    accumulate_owned(grads, *b, Some(db));
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                accumulate_owned(grads, *x, Some(transposed(g, s.rows(), s.c)));
            }
            Op::Reshape(x) => accumulate_iter(grads, *x, g.len(), g.iter().copied()),
            Op::Add(a, b) => {
                accumulate_iter(grads, *a, g.len(), g.iter().copied());
                accumulate_iter(grads, *b, g.len(), g.iter().copied());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate_iter(grads, *a, g.len(), g.iter().zip(vb).map(|(d, y)| d * y));
                accumulate_iter(grads, *b, g.len(), g.iter().zip(va).map(|(d, x)| d * x));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).c).collect();
                let total: usize = widths.iter().sum();
                let rows = out.shape().rows();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..][..w]);
                    }
                    accumulate_owned(grads, p, Some(dp));
                    offset += w;
                }
            }
            Op::Crop(x) => {
                let (sx, so) = (self.shape(*x), out.shape());
                let mut dx = vec![0.0; sx.numel()];
                let row = so.w * so.c;
                for n in 0..so.n {
                    for y in 0..so.h {
                        let from = ((n * so.h + y) * so.w) * so.c;
                        let to = ((n * sx.h + y) * sx.w) * sx.c;
                        dx[to..to + row].copy_from_slice(&g[from..from + row]);
                    }
                }
                accumulate_owned(grads, *x, Some(dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate_iter(grads, *x, n, std::iter::repeat_n(g[0], n));
            }
            Op::CrossEntropy { s, target, eps } => {
                let d = g[0];
                let eps = *eps;
                let dx = self.value(*s).data().iter().zip(target).map(|(&p, &t)| {
                    if p <= eps || p >= 1.0 - eps {
                        0.0
                    } else {
                        d * (-(t / p) + (1.0 - t) / (1.0 - p))
                    }
                });
                let n = target.len();
                accumulate_iter(grads, *s, n, dx);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn bias_grad(&self, b: Option<Var>, g: &[f64], c_out: usize, grads: &mut [Option<Vec<f64>>]) {
        if let Some(b) = b.filter(|&b| self.wants(b)) {
            let mut db = vec![0.0; c_out];
            kernels::bias_grad_add(g, &mut db);
            accumulate_owned(grads, b, Some(db));
        }
    }
}

fn check_bias(tape: &Tape, b: Option<Var>, c_out: usize) -> Result<()> {
    if let Some(b) = b {
        let n = tape.value(b).numel();
        if n != c_out {
            return Err(Error::shape(format!("bias of length {n} for {c_out} output channels")));
        }
    }
    Ok(())
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_iter(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, g: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => {
            let mut fresh = Vec::with_capacity(len);
            fresh.extend(g);
            *slot = Some(fresh);
        }
    }
}

pub(crate) fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
