//! Dense row-major tensors of rank 1 through 5.
//!
//! Video volumes use the layout `[N, C, T, H, W]`. Lower-rank tensors are used
//! for logits (`[N, K]`), matrices and vectors. Broadcasting is limited to a
//! scalar operand and a per-channel vector on axis 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};

pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Binary elementwise operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(shape_err!("rank must be 1..={MAX_RANK}, got {:?}", shape));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err!("all extents must be >= 1, got {:?}", shape));
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {:?} needs {} elements, got {}", shape, n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    /// Elements drawn independently from `U(lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(shape, data)
    }

    /// Elements drawn independently from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
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

    /// True when every extent is 1.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Extents of a rank-5 tensor as `[n, c, t, h, w]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[n, c, t, h, w] => Ok([n, c, t, h, w]),
            s => Err(shape_err!("expected a rank-5 [N,C,T,H,W] tensor, got {:?}", s)),
        }
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!("elementwise operands differ: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn elementwise(&self, op: BinaryOp, rhs: Operand<'_>) -> Result<Tensor> {
        let f = match op {
            BinaryOp::Add => |a: f64, b: f64| a + b,
            BinaryOp::Sub => |a: f64, b: f64| a - b,
            BinaryOp::Mul => |a: f64, b: f64| a * b,
        };
        match rhs {
            Operand::Tensor(t) => self.zip_with(t, f),
            Operand::Scalar(s) => Ok(self.map(|a| f(a, s))),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|a| a * factor)
    }

    pub fn square(&self) -> Tensor {
        self.map(|a| a * a)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("cannot accumulate {:?} into {:?}", other.shape, self.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `values[c]` to every element of channel `c` (axis 1).
    pub fn add_per_channel(&self, values: &[f64]) -> Result<Tensor> {
        if self.rank() < 2 || self.shape[1] != values.len() {
            return Err(shape_err!(
                "per-channel operand of length {} does not match {:?}",
                values.len(),
                self.shape
            ));
        }
        let inner: usize = self.shape[2..].iter().product();
        let c = self.shape[1];
        let mut out = self.clone();
        for (i, chunk) in out.data.chunks_mut(inner).enumerate() {
            let v = values[i % c];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        Ok(out)
    }

    pub fn reduce(&self, op: Reduce, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
        let rank = self.rank();
        if let Some(&a) = axes.iter().find(|&&a| a >= rank) {
            return Err(shape_err!("axis {a} out of range for rank {rank}"));
        }
        let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
        let kept_shape: Vec<usize> = self.shape.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let out_strides = strides_of(&kept_shape);
        let out_len: usize = kept_shape.iter().product();
        let init = if op == Reduce::Max { f64::NEG_INFINITY } else { 0.0 };
        let mut out = vec![init; out_len];

        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..rank {
                if !reduced[d] {
                    o += idx[d] * out_strides[d];
                }
            }
            match op {
                Reduce::Max => out[o] = out[o].max(v),
                _ => out[o] += v,
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if op == Reduce::Mean {
            let count = (self.data.len() / out_len) as f64;
            out.iter_mut().for_each(|x| *x /= count);
        }

        let shape = if keep_dims {
            kept_shape
        } else {
            let s: Vec<usize> = self.shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        Tensor::from_vec(&shape, out)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    pub fn max_all(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.data.iter().fold(0.0f64, |m, x| m.max(x.abs())))
    }

    /// Concatenates along the channel axis (axis 1); `a`'s channels come first.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || a.rank() != b.rank() || a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(shape_err!(
                "concat_channels needs matching non-channel extents: {:?} vs {:?}",
                a.shape,
                b.shape
            ));
        }
        let inner: usize = a.shape[2..].iter().product();
        let (ca, cb) = (a.shape[1], b.shape[1]);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..a.shape[0] {
            data.extend_from_slice(&a.data[n * ca * inner..(n + 1) * ca * inner]);
            data.extend_from_slice(&b.data[n * cb * inner..(n + 1) * cb * inner]);
        }
        let mut shape = a.shape.clone();
        shape[1] = ca + cb;
        Tensor::from_vec(&shape, data)
    }

    /// Channels `start..end` (axis 1).
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() < 2 || start >= end || end > self.shape[1] {
            return Err(shape_err!("channel range {start}..{end} invalid for {:?}", self.shape));
        }
        let inner: usize = self.shape[2..].iter().product();
        let c = self.shape[1];
        let mut data = Vec::with_capacity(self.shape[0] * (end - start) * inner);
        for n in 0..self.shape[0] {
            data.extend_from_slice(&self.data[(n * c + start) * inner..(n * c + end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = end - start;
        Tensor::from_vec(&shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<T: std::borrow::Borrow<Tensor>>(items: &[T]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err!("cannot stack an empty list"))?.borrow();
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            let t = t.borrow();
            if t.shape != first.shape {
                return Err(shape_err!("stack operands differ: {:?} vs {:?}", first.shape, t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }

    /// The `i`-th slice along axis 0, with that axis removed.
    pub fn index_outer(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(shape_err!("outer index {i} invalid for {:?}", self.shape));
        }
        let inner = self.len() / self.shape[0];
        Tensor::from_vec(&self.shape[1..], self.data[i * inner..(i + 1) * inner].to_vec())
    }

    /// Matrix-vector product for a rank-2 tensor.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self.shape.as_slice() {
            &[rows, cols] if cols == v.len() => Ok((0..rows)
                .map(|r| self.data[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()),
            s => Err(shape_err!("matvec: matrix {:?} vs vector of length {}", s, v.len())),
        }
    }
}
