//! Separable 2-D blur operator `A(x) = A_H x A_Wᵀ` with SVD pseudoinverse,
//! and the range / null-space projections built from it.
//!
//! Application goes through the stored SVD factors rather than the dense
//! banded matrices. Tensors may carry any number of leading axes; the last
//! two must be `(H, W)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{matmul, svd_thin, SvdFactors, Tensor};

pub const DEFAULT_PINV_THRESHOLD: f64 = 1e-6;

/// Banded matrix with `m[i][j] = kernel[j - i + len/2]` inside the band and
/// zeros elsewhere; rows near the border are simply truncated.
pub fn build_banded(kernel: &[f64], n: usize) -> Result<Tensor> {
    let len = kernel.len();
    if len.is_multiple_of(2) {
        return invalid(format!("kernel length {len} must be odd"));
    }
    let half = len / 2;
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n.saturating_sub(1));
        for j in lo..=hi {
            m.set(i, j, kernel[j + half - i]);
        }
    }
    Ok(m)
}

/// Kernel description accepted by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel_h: Vec<f64>,
    pub kernel_w: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_PINV_THRESHOLD
}

#[derive(Clone, Debug)]
pub struct SeparableOperator2D {
    pub h: usize,
    pub w: usize,
    pub kernel_h: Vec<f64>,
    pub kernel_w: Vec<f64>,
    pub svd_h: SvdFactors,
    pub svd_w: SvdFactors,
    pub s_pinv_h: Vec<f64>,
    pub s_pinv_w: Vec<f64>,
}

fn pinv_values(s: &[f64], threshold: f64) -> Vec<f64> {
    s.iter()
        .map(|&v| if v > threshold { 1.0 / v } else { 0.0 })
        .collect()
}

impl SeparableOperator2D {
    pub fn new(kernel_h: &[f64], kernel_w: &[f64], h: usize, w: usize) -> Result<Self> {
        Self::with_threshold(kernel_h, kernel_w, h, w, DEFAULT_PINV_THRESHOLD)
    }

    pub fn with_threshold(
        kernel_h: &[f64],
        kernel_w: &[f64],
        h: usize,
        w: usize,
        threshold: f64,
    ) -> Result<Self> {
        if h == 0 || w == 0 {
            return invalid("operator dims must be positive");
        }
        if threshold < 0.0 {
            return invalid("pseudoinverse threshold must be non-negative");
        }
        let svd_h = svd_thin(&build_banded(kernel_h, h)?)?;
        let svd_w = svd_thin(&build_banded(kernel_w, w)?)?;
        Ok(Self {
            h,
            w,
            kernel_h: kernel_h.to_vec(),
            kernel_w: kernel_w.to_vec(),
            s_pinv_h: pinv_values(&svd_h.s, threshold),
            s_pinv_w: pinv_values(&svd_w.s, threshold),
            svd_h,
            svd_w,
        })
    }

    pub fn from_spec(spec: &KernelSpec, h: usize, w: usize) -> Result<Self> {
        Self::with_threshold(&spec.kernel_h, &spec.kernel_w, h, w, spec.threshold)
    }

    /// Dense `A_H`, rebuilt from the kernel.
    pub fn dense_h(&self) -> Tensor {
        build_banded(&self.kernel_h, self.h).expect("validated at construction")
    }

    pub fn dense_w(&self) -> Tensor {
        build_banded(&self.kernel_w, self.w).expect("validated at construction")
    }

    fn slices(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] != self.h || s[s.len() - 1] != self.w {
            return shape_err(format!(
                "trailing dims of {:?} must be ({}, {})",
                s, self.h, self.w
            ));
        }
        Ok(x.numel() / (self.h * self.w))
    }
}

/// `x · diag(s)` for a row-major `x`.
fn scale_cols(x: &Tensor, s: &[f64]) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= s[i % c];
    }
    out
}

fn per_slice(
    op: &SeparableOperator2D,
    x: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let n = op.slices(x)?;
    let plane = op.h * op.w;
    let mut out = Vec::with_capacity(x.numel());
    for k in 0..n {
        let slice = Tensor::new(
            vec![op.h, op.w],
            x.data()[k * plane..(k + 1) * plane].to_vec(),
        )?;
        out.extend_from_slice(f(&slice)?.data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `A_H x A_Wᵀ`, height pass then width pass, each as `· Vtᵀ · diag(S) · Uᵀ`.
pub fn op_apply(op: &SeparableOperator2D, x: &Tensor) -> Result<Tensor> {
    let (uh, vth) = (op.svd_h.u.transpose(), op.svd_h.vt.transpose());
    let (uw, vtw) = (op.svd_w.u.transpose(), op.svd_w.vt.transpose());
    per_slice(op, x, |s| {
        let xh = s.transpose();
        let xh = scale_cols(&matmul(&xh, &vth)?, &op.svd_h.s);
        let xh = matmul(&xh, &uh)?.transpose();
        let xw = scale_cols(&matmul(&xh, &vtw)?, &op.svd_w.s);
        matmul(&xw, &uw)
    })
}

/// `A_H⁺ y (A_W⁺)ᵀ`, width pass then height pass, each as `· U · diag(S⁺) · Vt`.
pub fn op_pinv_apply(op: &SeparableOperator2D, y: &Tensor) -> Result<Tensor> {
    per_slice(op, y, |s| {
        let yw = scale_cols(&matmul(s, &op.svd_w.u)?, &op.s_pinv_w);
        let yw = matmul(&yw, &op.svd_w.vt)?;
        let yh = yw.transpose();
        let yh = scale_cols(&matmul(&yh, &op.svd_h.u)?, &op.s_pinv_h);
        Ok(matmul(&yh, &op.svd_h.vt)?.transpose())
    })
}

/// `A⁺ A z`.
pub fn project_range(op: &SeparableOperator2D, z: &Tensor) -> Result<Tensor> {
    op_pinv_apply(op, &op_apply(op, z)?)
}

/// `x - A⁺ A x`.
pub fn project_null(op: &SeparableOperator2D, x: &Tensor) -> Result<Tensor> {
    x.sub(&project_range(op, x)?)
}
