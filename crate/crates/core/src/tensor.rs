//! Dense row-major tensors and the raw kernels the graph and the streaming
//! paths share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense tensor of `f64` values stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix; vectors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// First `n` rows as a new matrix.
    pub fn head_rows(&self, n: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![n, c],
            data: self.data[..n * c].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// `c = a · b (+ c if accumulate)` for row-major slices, with optional
/// transposition of either operand. `a` is `m×k` after transposition,
/// `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul lhs")?;
    let (k2, n) = b.require_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::matrix(m, n, out)
}

/// Affine map `x · weight + bias` with `bias` broadcast over rows.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut out = matmul(x, weight)?;
    if bias.numel() != out.cols() {
        return Err(Error::Shape(format!(
            "bias of length {} for output width {}",
            bias.numel(),
            out.cols()
        )));
    }
    let cols = out.cols();
    for r in 0..out.rows() {
        for (o, b) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilised by subtracting the row maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input contains NaN or infinity".into()));
    }
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        softmax_in_place(&mut out.data[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise `log softmax`.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation over each row; returns the output together with the
/// normalised input and per-row reciprocal standard deviation.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let cols = x.cols();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::Shape(format!(
            "layer norm parameters of length {}/{} for width {cols}",
            gamma.numel(),
            beta.numel()
        )));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; rows * cols];
    let mut out = vec![0.0; rows * cols];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma.data[c] + beta.data[c];
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), out)?,
        Tensor::new(x.shape.clone(), xhat)?,
        rstd,
    ))
}
