//! Dense row-major f64 tensors.
//!
//! Tensors are plain values. Rank-2 is the working rank for the tape; a scalar is `[1, 1]`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Panics on length mismatch; for literals in code and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            shape: vec![1, v.len()],
            data: v.to_vec(),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, x: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![x; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent for rank-2 tensors, 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        let c = self.cols();
        self.data[i * c + j] = x;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let r = self.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Self {
            shape: vec![r, len],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let r = first.rows();
        if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
            return Err(Error::shape(
                "concat",
                format!("row extents {r} vs {}", bad.rows()),
            ));
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![r, total],
            data,
        })
    }
}

/// Max-shifted softmax of one row. Entries with `mask[j] == false` get exactly zero.
pub fn softmax_row(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let mx = x
        .iter()
        .enumerate()
        .filter(|(j, _)| on(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, &v)| if on(j) { (v - mx).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for (j, o) in out.iter_mut().enumerate() {
        *o = if on(j) { *o / z } else { 0.0 };
    }
    out
}

pub fn logsumexp_row(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
}

/// Cross-entropy of one logit row against a class index.
pub fn cross_entropy_row(logits: &[f64], target: usize) -> f64 {
    logsumexp_row(logits) - logits[target]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_shape_error_names_extents() {
        let a = Tensor::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let p = softmax_row(&[0.0, 0.0, 0.0], None);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_row(&[1.0, f64::MIN, 2.0], Some(&[true, false, true]));
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-100.0) >= 0.0 && softplus(-100.0) < 1e-40);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((sigmoid(-800.0)).is_finite());
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let x = Tensor::matrix(2, 5, (0..10).map(f64::from).collect()).unwrap();
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[&a, &b]).unwrap(), x);
    }
}
