//! Dense row-major `f64` tensors of rank 1 to 4 (NHWC for images).
//!
//! NaN and Inf flow through every operation untouched. Nothing here traps on
//! non-finite values; the detector is the only place they are interpreted.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Multiplication by a scalar (or elementwise, when given a tensor).
    Scale,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul | BinaryOp::Scale => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "tensor",
                format!("rank {} outside 1..={MAX_RANK}", shape.len()),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= MAX_RANK,
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Zero-length placeholder used for the parameters of parameterless layers.
    pub fn empty() -> Self {
        Self {
            shape: vec![0],
            data: Vec::new(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape(
                "from_rows",
                format!("ragged rows: expected {cols} columns, found {}", bad.len()),
            ));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Leading dimension (batch size for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all non-leading dimensions.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.rows() {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} invalid for {} rows",
                self.rows()
            )));
        }
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * n..end * n].to_vec())
    }

    /// Gathers the given rows of the leading dimension, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::Contract(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn elementwise(&self, op: BinaryOp, rhs: Operand<'_>) -> Result<Tensor> {
        match rhs {
            Operand::Scalar(s) => Ok(self.map(|v| op.apply(v, s))),
            Operand::Tensor(t) => self.zip_map(t, &format!("{op:?}").to_lowercase(), |a, b| {
                op.apply(a, b)
            }),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Mul, Operand::Tensor(other))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Div, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Arithmetic mean over all elements. Non-finite values propagate.
    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        Ok(self.sum() / self.data.len() as f64)
    }

    /// Population standard deviation (divides by n).
    pub fn std(&self) -> Result<f64> {
        let mean = self
            .mean()
            .map_err(|_| Error::Contract("std of an empty tensor".into()))?;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.len() as f64;
        Ok(var.sqrt())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not rank 2", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Sum over the leading dimension: `[rows, cols] -> [cols]`.
    pub fn sum_rows(&self) -> Tensor {
        let n = self.row_len();
        let mut out = vec![0.0; n];
        for r in 0..self.rows() {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    /// Index of the largest value in each row; ties resolve to the first.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Concatenates the flattened data of several tensors into one vector.
    pub fn concat_flat(parts: &[&Tensor]) -> Tensor {
        Tensor::vector(parts.iter().flat_map(|t| t.data.iter().copied()).collect())
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}
