//! Dense row-major `f64` tensors and the numeric kernels used by the tape.
//!
//! Every kernel here is a pure function of its inputs. The autodiff tape in
//! [`crate::autodiff`] calls these for the forward values and records what it
//! needs for the adjoints.

use std::fmt;

use crate::error::{Error, Result};
use crate::flops;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into `(outer, len, inner)` strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("new", format!("zero-length axis in {shape:?}")));
        }
        if numel_of(shape) != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "zero-length axis in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel_of(shape);
        let data = (0..n).map(&mut f).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &len)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < len, "index {ix} out of range on axis {i}");
            flat = flat * len + ix;
        }
        self.data[flat]
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| **v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric(format!("log of non-positive value {v}")));
        }
        Ok(self.map(f64::ln))
    }

    fn row_vector_len(&self, vec: &Tensor, op: &'static str) -> Result<usize> {
        let n = *self.shape.last().unwrap_or(&1);
        if vec.numel() != n || vec.rank() > 2 || (vec.rank() == 2 && vec.shape[0] != 1) {
            return Err(Error::dim(
                op,
                format!("row vector {:?} does not match last axis of {:?}", vec.shape, self.shape),
            ));
        }
        Ok(n)
    }

    /// Adds a vector of length `shape[-1]` to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let n = self.row_vector_len(bias, "add_row")?;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiplies every row elementwise by a vector of length `shape[-1]`.
    pub fn mul_row(&self, factor: &Tensor) -> Result<Tensor> {
        let n = self.row_vector_len(factor, "mul_row")?;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(n) {
            for (v, s) in chunk.iter_mut().zip(&factor.data) {
                *v *= s;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected matrices, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (m, ka) = if trans_a {
            (self.shape[1], self.shape[0])
        } else {
            (self.shape[0], self.shape[1])
        };
        let (kb, n) = if trans_b {
            (other.shape[1], other.shape[0])
        } else {
            (other.shape[0], other.shape[1])
        };
        if ka != kb {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions differ: {:?}{} x {:?}{}",
                    self.shape,
                    if trans_a { "^T" } else { "" },
                    other.shape,
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, &self.data, trans_a, &other.data, trans_b, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Batched matrix product over the leading axis of two rank-3 tensors.
    pub fn bmm(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        if self.rank() != 3 || other.rank() != 3 || self.shape[0] != other.shape[0] {
            return Err(Error::dim(
                "bmm",
                format!("expected equal-batch rank-3 tensors, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let batch = self.shape[0];
        let (m, ka) = if trans_a {
            (self.shape[2], self.shape[1])
        } else {
            (self.shape[1], self.shape[2])
        };
        let (kb, n) = if trans_b {
            (other.shape[2], other.shape[1])
        } else {
            (other.shape[1], other.shape[2])
        };
        if ka != kb {
            return Err(Error::dim(
                "bmm",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let a_stride = self.shape[1] * self.shape[2];
        let b_stride = other.shape[1] * other.shape[2];
        let mut out = vec![0.0; batch * m * n];
        for b in 0..batch {
            gemm(
                m,
                ka,
                n,
                &self.data[b * a_stride..(b + 1) * a_stride],
                trans_a,
                &other.data[b * b_stride..(b + 1) * b_stride],
                trans_b,
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        Ok(Tensor {
            shape: vec![batch, m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(self.data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (self.data[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "log_softmax")?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(self.data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (self.data[base + l * inner] - max).exp();
                }
                let lse = max + sum.ln();
                for l in 0..len {
                    out[base + l * inner] = self.data[base + l * inner] - lse;
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    fn reduced_shape(&self, axis: usize) -> Vec<usize> {
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        shape
    }

    /// Maximum along `axis` together with the flat source index of each
    /// winner. Ties go to the first maximal element.
    pub fn max_over_axis_with_argmax(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        self.check_axis(axis, "max_over_axis")?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    if self.data[idx] > self.data[best] {
                        best = idx;
                    }
                }
                out.push(self.data[best]);
                arg.push(best);
            }
        }
        Ok((
            Tensor {
                shape: self.reduced_shape(axis),
                data: out,
            },
            arg,
        ))
    }

    pub fn max_over_axis(&self, axis: usize) -> Result<Tensor> {
        Ok(self.max_over_axis_with_argmax(axis)?.0)
    }

    pub fn sum_over_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_over_axis")?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(Tensor {
            shape: self.reduced_shape(axis),
            data: out,
        })
    }

    pub fn mean_over_axis(&self, axis: usize) -> Result<Tensor> {
        let len = self.shape.get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_over_axis(axis)?.scale(1.0 / len))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        first.check_axis(axis, "concat")?;
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shape {:?} not conformable with {:?} on axis {axis}", p.shape, first.shape),
                ));
            }
            shape[axis] += p.shape[axis];
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Selects rows of a rank-2 tensor by index; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("gather_rows", format!("expected matrix, got {:?}", self.shape)));
        }
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Ok(Tensor {
            shape: vec![indices.len(), cols],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Column statistics of a rank-2 tensor: per-column mean and biased variance.
pub fn column_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 {
        return Err(Error::dim("column_moments", format!("expected matrix, got {:?}", x.shape())));
    }
    let mean = x.mean_over_axis(0)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let d = x.data()[i * c + j] - mean.data()[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= r as f64;
    }
    Ok((mean, Tensor::new(&[c], var)?))
}

/// `out[m×n] = op(a)[m×k] · op(b)[k×n]`, row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, out: &mut [f64]) {
    flops::record(m * k * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the pointers cover m*k, k*n and m*n elements with the strides
    // given above, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
