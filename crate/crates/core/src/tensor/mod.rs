//! Dense row-major f64 tensors and the small set of kernels the model needs.
//!
//! Everything downstream (forward passes, the gradient tape, the optimizer)
//! is built on this type. All math is 64-bit; the hot matmul path is written
//! so the autovectorizer can turn the inner loop into fused multiply-adds.

pub mod linalg;
pub mod tape;

use crate::error::{Result, SnapError};

/// Dense row-major tensor. Rank is dynamic but almost everything in the
/// pipeline is 1-D or 2-D; images are carried as rank-4 `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when viewed as a matrix (rank-2 only).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let w = self.shape[1];
        self.data[r * w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Treat the scalar case: exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise op on mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// C = A · B. Checked wrapper around the raw kernel.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || b.shape.len() != 2 {
            return Err(SnapError::shape("matmul", "operands must be rank-2"));
        }
        if self.cols() != b.rows() {
            return Err(SnapError::shape(
                "matmul",
                format!("inner dims {} vs {}", self.cols(), b.rows()),
            ));
        }
        let (m, k, n) = (self.rows(), self.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn_into(&self.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// C = A · Bᵀ.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols() != b.cols() {
            return Err(SnapError::shape(
                "matmul_nt",
                format!("inner dims {} vs {}", self.cols(), b.cols()),
            ));
        }
        let bt = b.transpose();
        let (m, k, n) = (self.rows(), self.cols(), b.rows());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn_into(&self.data, &bt.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// C = Aᵀ · B.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        if self.rows() != b.rows() {
            return Err(SnapError::shape(
                "matmul_tn",
                format!("inner dims {} vs {}", self.rows(), b.rows()),
            ));
        }
        let at = self.transpose();
        let (m, k, n) = (self.cols(), self.rows(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn_into(&at.data, &b.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// Row-wise numerically stable softmax (max-shifted).
    pub fn softmax_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.clone();
        for i in 0..m {
            softmax_in_place(&mut out.data[i * n..(i + 1) * n]);
        }
        out
    }

    /// Row-wise layer normalization: per row, subtract the mean and divide by
    /// the population standard deviation (plus eps), then apply scale/shift.
    pub fn layernorm_rows(&self, scale: &[f64], shift: &[f64], eps: f64) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(scale.len(), n);
        assert_eq!(shift.len(), n);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let x = &self.data[i * n..(i + 1) * n];
            let y = &mut out.data[i * n..(i + 1) * n];
            let (mean, var) = mean_var(x);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                y[j] = (x[j] - mean) * inv * scale[j] + shift[j];
            }
        }
        out
    }

    pub fn l2_normalize_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = self.clone();
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        out
    }
}

/// Raw GEMM kernel, C += A·B with A (m×k), B (k×n), all row-major.
/// The j-loop is a contiguous axpy over a row of B, which the compiler
/// vectorizes with FMA when a wide target is enabled.
pub fn matmul_nn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Zero rows of A contribute nothing (masked structures produce exact
    // zeros), so gather the non-zero terms per output row, then accumulate
    // four at a time. The chained adds below associate left to right, so the
    // result is bit-identical to adding each term in its own pass.
    let mut nz: Vec<(f64, usize)> = Vec::with_capacity(k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        nz.clear();
        nz.extend(a_row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(kk, &v)| (v, kk)));
        let mut chunks = nz.chunks_exact(4);
        for ch in &mut chunks {
            let [(a0, k0), (a1, k1), (a2, k2), (a3, k3)] = *ch else { unreachable!() };
            let b0 = &b[k0 * n..k0 * n + n];
            let b1 = &b[k1 * n..k1 * n + n];
            let b2 = &b[k2 * n..k2 * n + n];
            let b3 = &b[k3 * n..k3 * n + n];
            for j in 0..n {
                let s = c_row[j] + a0 * b0[j];
                let s = s + a1 * b1[j];
                let s = s + a2 * b2[j];
                c_row[j] = s + a3 * b3[j];
            }
        }
        for &(a_ik, kk) in chunks.remainder() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += a_ik * b_row[j];
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// GELU with the tanh approximation, matching the transformer convention.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of `gelu` above.
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
