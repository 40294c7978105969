use super::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Jacobi sweeps before [`svd_thin`] gives up.
pub const SVD_SWEEP_CAP: usize = 60;
/// Relative off-diagonal tolerance `|g_p . g_q| / (|g_p| |g_q|)` at convergence.
pub const SVD_OFF_DIAGONAL_TOL: f64 = 1e-10;

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_2d("matmul lhs")?;
    let (k2, n) = b.require_2d("matmul rhs")?;
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

/// `out += a (m x k) * b (k x n)`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: slices hold m·k, k·n and m·n row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Thin singular value decomposition `M = U diag(S) Vt`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// m x r, orthonormal columns.
    pub u: Tensor,
    /// r values, non-increasing, non-negative.
    pub s: Vec<f64>,
    /// r x n, orthonormal rows.
    pub vt: Tensor,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Tensor {
        let mut us = self.u.clone();
        let r = self.s.len();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate().take(r) {
                let v = us.at(i, j) * s;
                us.set(i, j, v);
            }
        }
        matmul(&us, &self.vt).expect("factor shapes agree")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
pub fn svd_thin(m: &Tensor) -> Result<SvdFactors> {
    let (rows, cols) = m.require_2d("svd_thin")?;
    if rows == 0 || cols == 0 {
        return invalid("svd_thin needs a non-empty matrix");
    }
    if rows < cols {
        let t = svd_tall(&m.transpose())?;
        return Ok(SvdFactors {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    svd_tall(m)
}

fn svd_tall(m: &Tensor) -> Result<SvdFactors> {
    let (rows, n) = (m.rows(), m.cols());
    // Columns of M (and of V) stored contiguously.
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..rows).map(|i| m.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    let mut residual = 0.0;
    for _ in 0..SVD_SWEEP_CAP {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&g[p], &g[q]);
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= SVD_OFF_DIAGONAL_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: SVD_SWEEP_CAP,
            residual,
        });
    }

    let mut order: Vec<(f64, usize)> = g
        .iter()
        .enumerate()
        .map(|(j, col)| (dot(col, col).sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let smax = order[0].0;
    let zero_cut = smax * (rows.max(n) as f64) * f64::EPSILON;

    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vt = Tensor::zeros(&[n, n]);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(&v[j]);
        if sigma > zero_cut && sigma > 0.0 {
            s.push(sigma);
            ucols.push(g[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            ucols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut ucols, rows);

    let mut u = Tensor::zeros(&[rows, n]);
    for (j, col) in ucols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, j, x);
        }
    }
    Ok(SvdFactors { u, s, vt })
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `rel_threshold * s_max` are treated as zero.
pub fn pinv(m: &Tensor, rel_threshold: f64) -> Result<Tensor> {
    let f = svd_thin(m)?;
    let smax = f.s.first().copied().unwrap_or(0.0);
    let r = f.s.len();
    // V diag(1/s) U^T
    let mut v_scaled = f.vt.transpose();
    for i in 0..v_scaled.rows() {
        for j in 0..r {
            let s = f.s[j];
            let inv = if s > rel_threshold * smax && s > 0.0 {
                1.0 / s
            } else {
                0.0
            };
            let cur = v_scaled.at(i, j);
            v_scaled.set(i, j, cur * inv);
        }
    }
    matmul(&v_scaled, &f.u.transpose())
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills empty columns with unit vectors orthogonal to all others.
fn complete_orthonormal(cols: &mut [Vec<f64>], m: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < m {
            let mut w = vec![0.0; m];
            w[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(&w, other);
                    for (wi, oi) in w.iter_mut().zip(other) {
                        *wi -= d * oi;
                    }
                }
            }
            let nrm = dot(&w, &w).sqrt();
            if nrm > 0.5 {
                cols[j] = w.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}
