//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is built fresh for each forward pass. Every operation appends a
//! node holding its output value and the ids of its inputs, so node ids are
//! topologically ordered by construction. [`Tape::backward`] walks the nodes
//! once in reverse id order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{column_moments, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Max { x: Var, argmax: Vec<usize> },
    Sum(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
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

    /// Ids of the trainable leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// A leaf that receives a gradient without being listed as a parameter,
    /// used to chain a pass on one tape into a pass on another.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b), ta, tb)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, g))
    }

    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).bmm(self.value(b), ta, tb)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let g = self.grad_of(&[x]);
        self.push(value, Op::Scale(x, factor), g)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), g))
    }

    pub fn mul_row(&mut self, x: Var, factor: Var) -> Result<Var> {
        let value = self.value(x).mul_row(self.value(factor))?;
        let g = self.grad_of(&[x, factor]);
        Ok(self.push(value, Op::MulRow(x, factor), g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let g = self.grad_of(&[x]);
        self.push(value, Op::Relu(x), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).exp();
        let g = self.grad_of(&[x]);
        self.push(value, Op::Exp(x), g)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).ln()?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Ln(x), g))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax_axis(axis)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), g))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).log_softmax_axis(axis)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x, axis), g))
    }

    /// Max over `axis`; the gradient goes to the first maximal element.
    pub fn max_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (value, argmax) = self.value(x).max_over_axis_with_argmax(axis)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Max { x, argmax }, g))
    }

    pub fn sum_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).sum_over_axis(axis)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Sum(x, axis), g))
    }

    pub fn mean_over(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_over", format!("axis {axis} out of range")))?;
        let s = self.sum_over(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_all());
        let g = self.grad_of(&[x]);
        self.push(value, Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat(&values, axis)?;
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), g))
    }

    /// Row gather of a matrix. Differentiable in the source values only.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(indices)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let value = self.value(x).reshape(shape)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Transpose(x), g))
    }

    /// Per-column standardization of a matrix using its own batch moments:
    /// `(x - mean) / sqrt(var + eps)`. Returns the output together with the
    /// moments so callers can maintain running statistics.
    pub fn standardize_columns(&mut self, x: Var, eps: f64) -> Result<(Var, Tensor, Tensor)> {
        let xv = self.value(x);
        let (mean, var) = column_moments(xv)?;
        let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let cols = inv_std.len();
        let mut out = xv.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let j = i % cols;
            *v = (*v - mean.data()[j]) * inv_std[j];
        }
        let value = Tensor::new(xv.shape(), out)?;
        let g = self.grad_of(&[x]);
        let v = self.push(value, Op::Standardize { x, inv_std }, g);
        Ok((v, mean, var))
    }

    /// `x · w (+ b)` for a matrix `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        if value.numel() != 1 || value.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_from(loss, Tensor::full(value.shape(), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::Contract(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, mut g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Tensor| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = if *ta {
                        bv.matmul_t(&g, *tb, true)?
                    } else {
                        g.matmul_t(bv, false, !*tb)?
                    };
                    acc(*a, d)?;
                }
                if wants(*b) {
                    let d = if *tb {
                        g.matmul_t(av, true, *ta)?
                    } else {
                        av.matmul_t(&g, !*ta, false)?
                    };
                    acc(*b, d)?;
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let d = if *ta {
                        bv.bmm(&g, *tb, true)?
                    } else {
                        g.bmm(bv, false, !*tb)?
                    };
                    acc(*a, d)?;
                }
                if wants(*b) {
                    let d = if *tb {
                        g.bmm(av, true, *ta)?
                    } else {
                        av.bmm(&g, !*ta, false)?
                    };
                    acc(*b, d)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone())?;
                }
                acc(*b, g)?;
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone())?;
                }
                g.data_mut().iter_mut().for_each(|v| *v = -*v);
                acc(*b, g)?;
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.mul(val(*b))?)?;
                }
                if wants(*b) {
                    acc(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(x, s) => {
                g.data_mut().iter_mut().for_each(|v| *v *= *s);
                acc(*x, g)?;
            }
            Op::AddRow(x, bias) => {
                if wants(*bias) {
                    let bshape = val(*bias).shape().to_vec();
                    acc(*bias, row_sums(&g)?.reshape(&bshape)?)?;
                }
                acc(*x, g)?;
            }
            Op::MulRow(x, factor) => {
                let fv = val(*factor);
                if wants(*x) {
                    acc(*x, g.mul_row(fv)?)?;
                }
                if wants(*factor) {
                    let prod = g.mul(val(*x))?;
                    acc(*factor, row_sums(&prod)?.reshape(fv.shape())?)?;
                }
            }
            Op::Relu(x) => {
                for (gi, &xi) in g.data_mut().iter_mut().zip(val(*x).data()) {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                acc(*x, g)?;
            }
            Op::Exp(x) => acc(*x, g.mul(&node.value)?)?,
            Op::Ln(x) => {
                let xv = val(*x);
                let data = g.data().iter().zip(xv.data()).map(|(gi, xi)| gi / xi).collect();
                acc(*x, Tensor::new(xv.shape(), data)?)?;
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let gy = g.mul(y)?;
                let s = gy.sum_over_axis(*axis)?;
                let d = broadcast_axis_apply(y, &s, *axis, |yi, si, gi| yi * (gi - si), &g);
                acc(*x, d)?;
            }
            Op::LogSoftmax(x, axis) => {
                let y = &node.value;
                let s = g.sum_over_axis(*axis)?;
                let d = broadcast_axis_apply(y, &s, *axis, |yi, si, gi| gi - yi.exp() * si, &g);
                acc(*x, d)?;
            }
            Op::Max { x, argmax } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.shape());
                for (gi, &src) in g.data().iter().zip(argmax) {
                    d.data_mut()[src] += gi;
                }
                acc(*x, d)?;
            }
            Op::Sum(x, axis) => {
                let xv = val(*x);
                let d = broadcast_axis_apply(xv, &g, *axis, |_, si, _| si, xv);
                acc(*x, d)?;
            }
            Op::SumAll(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape(), g.item()))?;
            }
            Op::Concat(parts, axis) => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let pshape = val(*p).shape().to_vec();
                    let len = pshape[*axis];
                    if wants(*p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        acc(*p, Tensor::new(&pshape, data)?)?;
                    }
                    offset += len;
                }
            }
            Op::Gather { x, indices } => {
                let xv = val(*x);
                let cols = xv.shape()[1];
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for (r, &src) in indices.iter().enumerate() {
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    for (t, s) in dd[src * cols..(src + 1) * cols].iter_mut().zip(grow) {
                        *t += s;
                    }
                }
                acc(*x, d)?;
            }
            Op::Reshape(x) => acc(*x, Tensor::new(val(*x).shape(), g.into_data())?)?,
            Op::Transpose(x) => acc(*x, g.transpose()?)?,
            Op::Standardize { x, inv_std } => {
                let xhat = &node.value;
                let rows = xhat.shape()[0];
                let cols = inv_std.len();
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for (i, (gi, xi)) in g.data().iter().zip(xhat.data()).enumerate() {
                    sum_g[i % cols] += gi;
                    sum_gx[i % cols] += gi * xi;
                }
                let n = rows as f64;
                let data = g
                    .data()
                    .iter()
                    .zip(xhat.data())
                    .enumerate()
                    .map(|(i, (gi, xi))| {
                        let j = i % cols;
                        inv_std[j] / n * (n * gi - sum_g[j] - xi * sum_gx[j])
                    })
                    .collect();
                acc(*x, Tensor::new(xhat.shape(), data)?)?;
            }
        }
        Ok(())
    }
}

/// Sum over all leading axes, leaving the last axis.
fn row_sums(g: &Tensor) -> Result<Tensor> {
    let n = *g.shape().last().unwrap_or(&1);
    let rows = g.numel() / n;
    g.reshape(&[rows, n])?.sum_over_axis(0)
}

/// Builds a tensor shaped like `full` where each element is
/// `f(full[i], reduced[i without axis], other[i])`.
fn broadcast_axis_apply(
    full: &Tensor,
    reduced: &Tensor,
    axis: usize,
    f: impl Fn(f64, f64, f64) -> f64,
    other: &Tensor,
) -> Tensor {
    let shape = full.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; full.numel()];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let idx = (o * len + l) * inner + i;
                out[idx] = f(full.data()[idx], reduced.data()[o * inner + i], other.data()[idx]);
            }
        }
    }
    Tensor::new(shape, out).expect("shape preserved")
}

/// Leaf adjoints produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient of a leaf reached by the pass.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Map from parameter id to gradient for every trainable leaf on the tape.
    pub fn into_param_map(mut self, tape: &Tape) -> BTreeMap<usize, Tensor> {
        self.params
            .iter()
            .map(|p| {
                let g = self
                    .grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(*p)));
                (p.0, g)
            })
            .collect()
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum was seen.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn eval_loss<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!("objective returned shape {:?}", value.shape())));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` at `params` with central differences.
///
/// The error at each coordinate is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`;
/// the report carries the maximum over all coordinates of all tensors.
pub fn check_gradients<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("objective is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, params[pi].shape());
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval_loss(&f, &work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval_loss(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.data()[c];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// Single-tensor form of [`check_gradients`]; returns the max relative error.
pub fn finite_difference_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), eps)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        // small LCG so these tests do not depend on the rng crates
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss = tape.sum_all(theta);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(theta, theta).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(theta).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(theta), Err(Error::Contract(_))));
    }

    #[test]
    fn fd_check_examples() {
        let e = finite_difference_check(|t, x| t.mul(x, x), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!(e < 1e-9, "{e}");
        let e = finite_difference_check(
            |t, x| {
                let c = t.constant(Tensor::scalar(4.0));
                let z = t.scale(x, 0.0);
                t.add(z, c)
            },
            &Tensor::scalar(1.0),
            1e-5,
        )
        .unwrap();
        assert_eq!(e, 0.0);
        assert!(matches!(
            finite_difference_check(|t, x| Ok(t.sum_all(x)), &Tensor::scalar(1.0), 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic() {
        let logits = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let ce = |t: &mut Tape, x: Var| {
            let ls = t.log_softmax(x, 0)?;
            let col = t.reshape(ls, &[3, 1])?;
            let picked = t.gather_rows(col, &[1])?;
            let s = t.sum_all(picked);
            Ok(t.scale(s, -1.0))
        };
        let err = finite_difference_check(ce, &logits, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        // analytic: softmax - onehot
        let mut tape = Tape::new();
        let x = tape.param(logits.clone());
        let loss = ce(&mut tape, x).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap().clone();
        let p = logits.softmax_axis(0).unwrap();
        for i in 0..3 {
            let want = p.data()[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Vec<Tensor>, Objective)> = vec![
            (
                "matmul",
                vec![rand_tensor(&[3, 4], 1), rand_tensor(&[4, 2], 2)],
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                }),
            ),
            (
                "matmul_transposed",
                vec![rand_tensor(&[4, 3], 3), rand_tensor(&[2, 4], 4)],
                Box::new(|t, v| {
                    let y = t.matmul_t(v[0], v[1], true, true)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                }),
            ),
            (
                "bmm",
                vec![rand_tensor(&[2, 3, 4], 5), rand_tensor(&[2, 3, 5], 6)],
                Box::new(|t, v| {
                    let y = t.bmm(v[0], v[1], true, false)?;
                    let e = t.exp(y);
                    Ok(t.sum_all(e))
                }),
            ),
            (
                "bmm_tb",
                vec![rand_tensor(&[2, 3, 4], 7), rand_tensor(&[2, 5, 4], 8)],
                Box::new(|t, v| {
                    let y = t.bmm(v[0], v[1], false, true)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum_all(y2))
                }),
            ),
            (
                "softmax_axis1",
                vec![rand_tensor(&[2, 4, 3], 9), rand_tensor(&[2, 4, 3], 10)],
                Box::new(|t, v| {
                    let s = t.softmax(v[0], 1)?;
                    let w = t.mul(s, v[1])?;
                    Ok(t.sum_all(w))
                }),
            ),
            (
                "log_softmax",
                vec![rand_tensor(&[3, 4], 11), rand_tensor(&[3, 4], 12)],
                Box::new(|t, v| {
                    let s = t.log_softmax(v[0], 1)?;
                    let w = t.mul(s, v[1])?;
                    Ok(t.sum_all(w))
                }),
            ),
            (
                "relu_max_mean",
                vec![rand_tensor(&[3, 5, 2], 13)],
                Box::new(|t, v| {
                    let r = t.relu(v[0]);
                    let m = t.max_over(r, 1)?;
                    let mm = t.mean_over(m, 0)?;
                    let sq = t.mul(mm, mm)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "concat_gather_sub",
                vec![rand_tensor(&[4, 2], 14), rand_tensor(&[4, 3], 15)],
                Box::new(|t, v| {
                    let c = t.concat(&[v[0], v[1]], 1)?;
                    let g1 = t.gather_rows(c, &[3, 0, 0, 2])?;
                    let g2 = t.gather_rows(c, &[1, 1, 2, 3])?;
                    let d = t.sub(g1, g2)?;
                    let d2 = t.mul(d, d)?;
                    let e = t.exp(d);
                    let s = t.add(d2, e)?;
                    Ok(t.sum_all(s))
                }),
            ),
            (
                "rows_broadcast",
                vec![rand_tensor(&[5, 3], 16), rand_tensor(&[3], 17), rand_tensor(&[3], 18)],
                Box::new(|t, v| {
                    let a = t.add_row(v[0], v[1])?;
                    let b = t.mul_row(a, v[2])?;
                    let b2 = t.mul(b, b)?;
                    Ok(t.sum_all(b2))
                }),
            ),
            (
                "standardize",
                vec![rand_tensor(&[6, 3], 19), rand_tensor(&[6, 3], 20)],
                Box::new(|t, v| {
                    let (s, _, _) = t.standardize_columns(v[0], 1e-5)?;
                    let w = t.mul(s, v[1])?;
                    let w2 = t.mul(w, w)?;
                    Ok(t.sum_all(w2))
                }),
            ),
            (
                "ln_exp_scale_transpose_reshape",
                vec![rand_tensor(&[2, 3], 21)],
                Box::new(|t, v| {
                    let e = t.exp(v[0]);
                    let l = t.ln(e)?;
                    let s = t.scale(l, 0.5);
                    let tr = t.transpose(s)?;
                    let r = t.reshape(tr, &[6])?;
                    let sq = t.mul(r, r)?;
                    let sq = t.mul(sq, r)?;
                    Ok(t.sum_all(sq))
                }),
            ),
            (
                "sum_over",
                vec![rand_tensor(&[2, 3, 4], 22)],
                Box::new(|t, v| {
                    let s = t.sum_over(v[0], 2)?;
                    let s2 = t.mul(s, s)?;
                    Ok(t.sum_all(s2))
                }),
            ),
        ];
        for (name, params, f) in cases {
            let report = check_gradients(|t, v| f(t, v), &params, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
        }
    }

    #[test]
    fn max_routes_gradient_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap());
        let m = tape.max_over(x, 1).unwrap();
        let s = tape.sum_all(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(rand_tensor(&[4, 6], 30));
            let b = tape.param(rand_tensor(&[6, 3], 31));
            let y = tape.matmul(a, b).unwrap();
            let s = tape.softmax(y, 1).unwrap();
            let l = tape.sum_all(s);
            let l = tape.mul(l, l).unwrap();
            let grads = tape.backward(l).unwrap();
            grads.into_param_map(&tape)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let _unused = tape.param(Tensor::zeros(&[2]));
        let l = tape.mul(a, a).unwrap();
        let map = tape.backward(l).unwrap().into_param_map(&tape);
        assert_eq!(map.len(), 2);
        assert_eq!(map[&1].data(), &[0.0, 0.0]);
    }
}
