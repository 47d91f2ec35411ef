use super::tensor::{axis_extents, Tensor};
use crate::error::{Error, Result};

/// Arguments of [`Tape::log`] are clamped to at least this value.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// A tape is meant to live for one forward/backward pass; build a fresh one
/// per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push_op(value, op, &[a])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_op(value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |v| v * v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    /// `ln(max(x, LOG_FLOOR))`.
    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over all elements. The mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.push_op(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for r in 0..inner {
                    out[o * inner + r] += src[base + r];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, Op::SumAxis(a, axis), &[a]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * len + i) * inner + r;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Softmax(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// Picks elements by flat (row-major) index into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let src = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", self.shape(a), &[bad]));
        }
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::vector(data);
        Ok(self.push_op(value, Op::Gather(a, indices), &[a]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape("backward", loss_value.shape(), &[]));
        }
        if !loss_value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {}",
                loss_value.data()[0]
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }

        grads.resize(self.nodes.len(), None);
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    // dA = dC . B^T
                    let bd = self.data(*b);
                    let acc = accum(grads, *a, m * k);
                    for i in 0..m {
                        let up_row = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &bd[p * n..(p + 1) * n];
                            acc[i * k + p] += dot(up_row, b_row);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    // dB = A^T . dC
                    let ad = self.data(*a);
                    let acc = accum(grads, *b, k * n);
                    for i in 0..m {
                        let up_row = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let acc_row = &mut acc[p * n..(p + 1) * n];
                            for (g, &u) in acc_row.iter_mut().zip(up_row) {
                                *g += av * u;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum_unary(grads, *a, up, |_, u| u);
                self.accum_unary(grads, *b, up, |_, u| u);
            }
            Op::Sub(a, b) => {
                self.accum_unary(grads, *a, up, |_, u| u);
                self.accum_unary(grads, *b, up, |_, u| -u);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accum_unary(grads, *a, up, |i, u| u * bd[i]);
                self.accum_unary(grads, *b, up, |i, u| u * ad[i]);
            }
            Op::AddBias(a, bias) => {
                self.accum_unary(grads, *a, up, |_, u| u);
                if self.requires_grad(*bias) {
                    let n = self.shape(*bias)[0];
                    let acc = accum(grads, *bias, n);
                    for (i, &u) in up.iter().enumerate() {
                        acc[i % n] += u;
                    }
                }
            }
            Op::Scale(a, factor) => self.accum_unary(grads, *a, up, |_, u| u * factor),
            Op::Square(a) => {
                let ad = self.data(*a);
                self.accum_unary(grads, *a, up, |i, u| 2.0 * ad[i] * u);
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                self.accum_unary(grads, *a, up, |i, u| if ad[i] > 0.0 { u } else { 0.0 });
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                self.accum_unary(grads, *a, up, |i, u| {
                    if ad[i] > LOG_FLOOR {
                        u / ad[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Exp(a) => self.accum_unary(grads, *a, up, |i, u| u * out[i]),
            Op::Sum(a) => self.accum_unary(grads, *a, up, |_, _| up[0]),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accum_unary(grads, *a, up, |_, _| up[0] / n);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                if self.requires_grad(*a) {
                    let acc = accum(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for i in 0..len {
                            for r in 0..inner {
                                acc[(o * len + i) * inner + r] += up[o * inner + r];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                if self.requires_grad(*a) {
                    let acc = accum(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + r;
                            let weighted: f64 = (0..len).map(|i| up[at(i)] * out[at(i)]).sum();
                            for i in 0..len {
                                acc[at(i)] += out[at(i)] * (up[at(i)] - weighted);
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accum_unary(grads, *a, up, |_, u| u),
            Op::Gather(a, indices) => {
                if self.requires_grad(*a) {
                    let acc = accum(grads, *a, self.value(*a).numel());
                    for (&src, &u) in indices.iter().zip(up) {
                        acc[src] += u;
                    }
                }
            }
        }
    }

    /// Accumulates an elementwise gradient `f(i, up[i])` into an input of
    /// the same length as `up`.
    fn accum_unary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        input: Var,
        up: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.requires_grad(input) {
            return;
        }
        let n = self.value(input).numel();
        let acc = accum(grads, input, n);
        if up.len() == n {
            for (i, (g, &u)) in acc.iter_mut().zip(up).enumerate() {
                *g += f(i, u);
            }
        } else {
            // Reductions: upstream is a scalar broadcast to every input.
            for (i, g) in acc.iter_mut().enumerate() {
                *g += f(i, up[0]);
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
