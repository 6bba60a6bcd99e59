//! Small dense helpers. Matrices are row-major `f64`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Mat { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                axpy(ar, b, self.row_mut(r));
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform Glorot weights, zero bias.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Linear {
            weight: Mat {
                rows: out_dim,
                cols: in_dim,
                data,
            },
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.add_outer(dy, x);
        axpy(1.0, dy, &mut grad.bias);
        self.weight.matvec_t(dy)
    }

    pub fn check_input(&self, x: &[f64], context: &str) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::dim(context, self.in_dim(), x.len()));
        }
        Ok(())
    }
}
