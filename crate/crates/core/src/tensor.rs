//! Dense row-major `f32` arrays and the kernels the transformer needs.
//!
//! Accumulation precision: matrix products and elementwise kernels
//! accumulate in `f32`. Scalar reductions (`l1_norm`, `sum`, `mean_rows`)
//! accumulate in `f64`. Every caller in the crate goes through these two
//! paths, so results are reproducible for a fixed build.

use std::fmt;

use crate::error::{Error, Result};
use crate::parallel;

/// Products smaller than this many multiply-adds stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::InvalidTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Shorthand for a rank-2 tensor; panics on inconsistent sizes.
    pub fn from_vec2(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Tensor::new(vec![rows, cols], data).expect("from_vec2: bad dimensions")
    }

    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec2(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: bad shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("full: bad shape")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension (rows for matrices, length for vectors).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension; 1 for vectors treated as column.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[self.shape.len() - 1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self[m×k] · other[k×n]`, rows computed in parallel for large products.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = self.matmul_dims(other)?;
        let mut out = vec![0.0f32; m * n];
        if m > 1 && m * k * n >= PAR_THRESHOLD && parallel::is_parallel() {
            parallel::for_each_row(&mut out, n, |i, row| {
                gemm_row(&self.data[i * k..(i + 1) * k], &other.data, n, row)
            });
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                gemm_row(&self.data[i * k..(i + 1) * k], &other.data, n, row);
            }
        }
        Ok(Tensor::from_vec2(m, n, out))
    }

    /// Single-threaded matmul with the same per-row kernel as [`Tensor::matmul`].
    pub fn matmul_seq(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = self.matmul_dims(other)?;
        let mut out = vec![0.0f32; m * n];
        for (i, row) in out.chunks_mut(n).enumerate() {
            gemm_row(&self.data[i * k..(i + 1) * k], &other.data, n, row);
        }
        Ok(Tensor::from_vec2(m, n, out))
    }

    fn matmul_dims(&self, other: &Tensor) -> Result<(usize, usize, usize)> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok((m, k, n))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul(&other.transpose()?)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.transpose()?.matmul(other)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_vec2(n, m, out))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, n) = self.expect_matrix("softmax_rows")?;
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn silu(&self) -> Tensor {
        self.map(silu)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f32) -> Tensor {
        self.map(|x| x * alpha)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64).abs()).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    /// Mean over the leading axis: `[m×n] -> [n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("mean_rows")?;
        let mut acc = vec![0.0f64; n];
        for row in self.data.chunks(n) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / m as f64) as f32).collect();
        Tensor::new(vec![n], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Contiguous column block `[start, start + width)` of a matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("column_block")?;
        if width == 0 || start + width > n {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: start + width,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * width);
        for row in self.data.chunks(n) {
            out.extend_from_slice(&row[start..start + width]);
        }
        Ok(Tensor::from_vec2(m, width, out))
    }

    /// Contiguous row block `[start, start + height)` of a matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("row_block")?;
        if height == 0 || start + height > m {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: start + height,
                len: m,
            });
        }
        Ok(Tensor::from_vec2(
            height,
            n,
            self.data[start * n..(start + height) * n].to_vec(),
        ))
    }

    /// Overwrites columns `[start, start + src.cols())` with `src`.
    pub fn write_column_block(&mut self, start: usize, src: &Tensor) -> Result<()> {
        let (m, n) = self.expect_matrix("write_column_block")?;
        let (sm, sn) = src.expect_matrix("write_column_block")?;
        if sm != m || start + sn > n {
            return Err(Error::Shape {
                op: "write_column_block",
                left: self.shape.clone(),
                right: src.shape.clone(),
            });
        }
        for i in 0..m {
            self.data[i * n + start..i * n + start + sn].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("select_columns")?;
        if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: bad,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * keep.len());
        for row in self.data.chunks(n) {
            out.extend(keep.iter().map(|&c| row[c]));
        }
        Tensor::new(vec![m, keep.len()], out)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("select_rows")?;
        if let Some(&bad) = keep.iter().find(|&&r| r >= m) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                len: m,
            });
        }
        let mut out = Vec::with_capacity(n * keep.len());
        for &r in keep {
            out.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        Tensor::new(vec![keep.len(), n], out)
    }

    /// Horizontal concatenation of equally tall matrices.
    pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument(
            "concat_columns of zero tensors".into(),
        ))?;
        let (m, _) = first.expect_matrix("concat_columns")?;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.expect_matrix("concat_columns")?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_columns",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(vec![m, total], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `row += a_row · b` for a row-major `b` with `n` columns.
#[inline]
pub(crate) fn gemm_row(a_row: &[f32], b: &[f32], n: usize, out: &mut [f32]) {
    for (kk, &av) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place softmax of one row. The row must not contain NaN.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in row.iter_mut() {
        *x *= inv;
    }
}
