//! Dense row-major tensors and the small set of numerical kernels the rest
//! of the crate is built on.

mod fd;
mod linalg;
mod ops;
mod ytf;

pub use fd::{finite_diff_grad, finite_diff_partials};
pub use linalg::{matmul, pinv, svd_thin, SvdFactors, SVD_OFF_DIAGONAL_TOL, SVD_SWEEP_CAP};
pub use ops::{relu, rms_norm, softmax, NORM_EPS};
pub use ytf::{read_ytf, read_ytf_from, write_ytf, write_ytf_to};

pub(crate) use linalg::matmul_into;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};

/// N-dimensional array with row-major storage.
///
/// Values are kept in `f64` in memory; the on-disk YTF format stores `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged rows");
        }
        Self::new(
            vec![r, c],
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.ndim(), 2);
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn require_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return shape_err(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
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

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("axpy: {:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("dot: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.shape[1];
        Tensor::from_parts(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::from_parts(vec![r, w], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return invalid("concat_rows of nothing");
        };
        let c = first.shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.ndim() != 2 || p.shape[1] != c {
                return shape_err(format!("concat_rows: {:?} vs {:?}", p.shape, first.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(vec![rows, c], data))
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return invalid("concat_cols of nothing");
        };
        let r = first.shape[0];
        if parts.iter().any(|p| p.ndim() != 2 || p.shape[0] != r) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::from_parts(vec![r, total], data))
    }

    /// Values rounded through `f32`, matching what a YTF round trip yields.
    pub fn round_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}
