//! Softmax attention and ReLU-kernel linear attention.
//!
//! All functions take row-per-token matrices (`N x d`). Multi-head variants
//! split the feature axis into `n_heads` contiguous blocks of `d / n_heads`.
//! The `*_counted` variants return the number of multiply-adds performed,
//! counted inside the loops that do the work.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{matmul, matmul_into, rms_norm, Tensor, NORM_EPS};

/// Guard added to the linear-attention denominator, which ReLU can drive to
/// exactly zero.
pub const EPS_DENOM: f64 = 1e-6;

pub const ROPE_BASE: f64 = 10_000.0;

/// Projection weights for one attention layer (`x W` convention).
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub eps_denom: f64,
}

impl AttentionParams {
    pub fn new(n_heads: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let (_, d_model) = wq.require_2d("wq")?;
        if n_heads == 0 || d_model % n_heads != 0 {
            return invalid(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            ));
        }
        for (name, w) in [("wk", &wk), ("wv", &wv)] {
            if w.ndim() != 2 || w.cols() != d_model {
                return shape_err(format!("{name} has shape {:?}", w.shape()));
            }
        }
        if wo.shape() != [d_model, d_model] {
            return shape_err(format!("wo has shape {:?}", wo.shape()));
        }
        Ok(Self {
            d_model,
            n_heads,
            wq,
            wk,
            wv,
            wo,
            eps_denom: EPS_DENOM,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct RopeConfig {
    pub base: f64,
    pub positions: Vec<usize>,
}

impl RopeConfig {
    pub fn sequential(n: usize) -> Self {
        Self {
            base: ROPE_BASE,
            positions: (0..n).collect(),
        }
    }
}

/// Which `q`, `k` feed the linear-attention numerator. The denominator always
/// uses the un-rotated features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumeratorRope {
    /// Numerator uses rotated features, denominator un-rotated ones.
    #[default]
    PostRope,
    /// Numerator and denominator both use un-rotated features.
    PreRope,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (nq, d) = q.require_2d("q")?;
    let (nk, dk) = k.require_2d("k")?;
    let (nv, dv) = v.require_2d("v")?;
    if dk != d || nk != nv {
        return shape_err(format!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((nq, nk, dv))
}

fn check_heads(d: usize, dv: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !d.is_multiple_of(n_heads) || !dv.is_multiple_of(n_heads) {
        return invalid(format!(
            "feature dims {d}/{dv} not divisible by {n_heads} heads"
        ));
    }
    Ok(())
}

fn head_cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let mut out = Vec::with_capacity(t.rows() * width);
    for i in 0..t.rows() {
        out.extend_from_slice(&t.row(i)[start..start + width]);
    }
    Tensor::from_parts(vec![t.rows(), width], out)
}

/// Single-head `softmax(q k^T / sqrt(d)) v`.
pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(standard_attention_counted(q, k, v, 1)?.0)
}

/// Multi-head softmax attention; `q` may have a different row count than `k`/`v`.
pub fn standard_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
) -> Result<(Tensor, u64)> {
    let (nq, nk, dv) = check_qkv(q, k, v)?;
    let d = q.cols();
    check_heads(d, dv, n_heads)?;
    let (hd, hv) = (d / n_heads, dv / n_heads);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; nq * dv];
    let mut scores = vec![0.0; nq * nk];
    let mut oh = vec![0.0; nq * hv];
    for h in 0..n_heads {
        let qh = head_cols(q, h * hd, hd);
        let kt = head_cols(k, h * hd, hd).transpose();
        let vh = head_cols(v, h * hv, hv);
        scores.fill(0.0);
        matmul_into(qh.data(), kt.data(), nq, hd, nk, &mut scores);
        for row in scores.chunks_exact_mut(nk) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        oh.fill(0.0);
        matmul_into(&scores, vh.data(), nq, nk, hv, &mut oh);
        for (i, o) in oh.chunks_exact(hv).enumerate() {
            out[i * dv + h * hv..i * dv + (h + 1) * hv].copy_from_slice(o);
        }
    }
    let madds = (n_heads * nq * nk * (hd + hv)) as u64;
    Ok((
        Tensor::from_parts(vec![nq, dv], out).ensure_finite("standard_attention")?,
        madds,
    ))
}

/// Multiply-adds of [`standard_attention_counted`] for `n` queries and keys.
pub fn standard_attention_madds(n: usize, d: usize) -> u64 {
    2 * (n as u64) * (n as u64) * d as u64
}

/// Single-head ReLU-kernel linear attention:
/// `o_i = (sum_j v_j phi(k_j)^T) phi(q_i) / ((sum_j phi(k_j))^T phi(q_i) + eps)`,
/// evaluated through the `d x d` summary so no `N x N` matrix is formed.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, eps_denom: f64) -> Result<Tensor> {
    Ok(linear_attention_counted(q, k, v, 1, eps_denom)?.0)
}

pub fn linear_attention_counted(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    eps_denom: f64,
) -> Result<(Tensor, u64)> {
    let phi = |t: &Tensor| t.map(|x| x.max(0.0));
    let (qf, kf) = (phi(q), phi(k));
    linear_kernel_counted(&qf, &kf, &qf, &kf, v, n_heads, eps_denom)
}

/// Multiply-adds of [`linear_attention_counted`] for `n` tokens.
pub fn linear_attention_madds(n: usize, d: usize, n_heads: usize) -> u64 {
    let hd = (d / n_heads) as u64;
    let (n, d) = (n as u64, d as u64);
    2 * n * d * hd + 2 * n * d
}

/// Core factored evaluation. `qn`/`kn` feed the numerator, `qd`/`kd` the
/// denominator; all four are already feature-mapped.
fn linear_kernel_counted(
    qn: &Tensor,
    kn: &Tensor,
    qd: &Tensor,
    kd: &Tensor,
    v: &Tensor,
    n_heads: usize,
    eps_denom: f64,
) -> Result<(Tensor, u64)> {
    let (nq, nk, dv) = check_qkv(qn, kn, v)?;
    let d = qn.cols();
    check_heads(d, dv, n_heads)?;
    if eps_denom <= 0.0 {
        return invalid("eps_denom must be positive");
    }
    let (hd, hv) = (d / n_heads, dv / n_heads);
    let mut out = vec![0.0; nq * dv];
    let mut madds = 0u64;
    for h in 0..n_heads {
        // summary[a][b] = sum_j phi(k_j)[a] v_j[b]
        let mut summary = vec![0.0; hd * hv];
        let mut ksum = vec![0.0; hd];
        for j in 0..nk {
            let kj = &kn.row(j)[h * hd..(h + 1) * hd];
            let vj = &v.row(j)[h * hv..(h + 1) * hv];
            for (a, &ka) in kj.iter().enumerate() {
                let srow = &mut summary[a * hv..(a + 1) * hv];
                for (s, &vb) in srow.iter_mut().zip(vj) {
                    *s += ka * vb;
                }
            }
            for (s, &ka) in ksum.iter_mut().zip(&kd.row(j)[h * hd..(h + 1) * hd]) {
                *s += ka;
            }
        }
        madds += (nk * hd * hv + nk * hd) as u64;
        for i in 0..nq {
            let qi = &qn.row(i)[h * hd..(h + 1) * hd];
            let qdi = &qd.row(i)[h * hd..(h + 1) * hd];
            let denom: f64 = qdi.iter().zip(&ksum).map(|(a, b)| a * b).sum::<f64>() + eps_denom;
            let orow = &mut out[i * dv + h * hv..i * dv + (h + 1) * hv];
            for (a, &qa) in qi.iter().enumerate() {
                let srow = &summary[a * hv..(a + 1) * hv];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o += qa * s;
                }
            }
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        madds += (nq * hd * hv + nq * hd) as u64;
    }
    Ok((
        Tensor::from_parts(vec![nq, dv], out).ensure_finite("linear_attention")?,
        madds,
    ))
}

/// Linear attention with rotary positions: ReLU features, denominator from
/// the un-rotated features, numerator from rotated ones (per `variant`).
/// `q` and `k` are expected to be normalized already (see [`qk_norm`]).
pub fn linear_attention_rope(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rope: &RopeConfig,
    n_heads: usize,
    eps_denom: f64,
    variant: NumeratorRope,
) -> Result<Tensor> {
    let phi = |t: &Tensor| t.map(|x| x.max(0.0));
    let (qf, kf) = (phi(q), phi(k));
    let hd = q.cols() / n_heads.max(1);
    let (qn, kn) = match variant {
        NumeratorRope::PostRope => (rope_apply(&qf, rope, hd)?, rope_apply(&kf, rope, hd)?),
        NumeratorRope::PreRope => (qf.clone(), kf.clone()),
    };
    Ok(linear_kernel_counted(&qn, &kn, &qf, &kf, v, n_heads, eps_denom)?.0)
}

/// Per-token RMS normalization of `q` and `k`, applied independently to each
/// `head_dim`-wide block.
pub fn qk_norm(q: &Tensor, k: &Tensor, head_dim: usize) -> Result<(Tensor, Tensor)> {
    Ok((norm_groups(q, head_dim)?, norm_groups(k, head_dim)?))
}

pub(crate) fn norm_groups(x: &Tensor, group: usize) -> Result<Tensor> {
    let (n, d) = x.require_2d("qk_norm")?;
    if group == 0 || d % group != 0 {
        return invalid(format!("group {group} does not divide {d}"));
    }
    let g = x.clone().reshape(&[n * d / group, group])?;
    rms_norm(&g, 1, NORM_EPS)?.reshape(&[n, d])
}

/// `Norm(o) Wo`: normalize first, then project.
pub fn attention_output(o: &Tensor, wo: &Tensor) -> Result<Tensor> {
    o.require_2d("attention_output")?;
    matmul(&rms_norm(o, 1, NORM_EPS)?, wo)
}

/// Rotary embedding on adjacent feature pairs within each `head_dim` block.
pub fn rope_apply(x: &Tensor, cfg: &RopeConfig, head_dim: usize) -> Result<Tensor> {
    let (n, d) = x.require_2d("rope_apply")?;
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return invalid(format!("rope needs an even head_dim, got {head_dim}"));
    }
    if d % head_dim != 0 {
        return invalid(format!("head_dim {head_dim} does not divide {d}"));
    }
    if cfg.positions.len() != n {
        return shape_err(format!("{} positions for {} rows", cfg.positions.len(), n));
    }
    let mut out = x.clone();
    rotate_rows(out.data_mut(), d, head_dim, &cfg.positions, cfg.base, 1.0);
    Ok(out)
}

/// Rotates pairs in place; `sign = -1` applies the inverse rotation.
pub(crate) fn rotate_rows(
    data: &mut [f64],
    d: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    sign: f64,
) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let row = &mut data[r * d..(r + 1) * d];
        for head in row.chunks_mut(head_dim) {
            for (i, f) in freqs.iter().enumerate() {
                let (s, c) = (sign * pos as f64 * f).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Dense O(N^2) softmax attention.
    fn dense_softmax(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let d = q.cols() as f64;
        let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|a| q.at(i, a) * k.at(j, a)).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..k.rows() {
                for b in 0..v.cols() {
                    let cur = out.at(i, b);
                    out.set(i, b, cur + w[j] / z * v.at(j, b));
                }
            }
        }
        out
    }

    /// Explicit N x N kernel-matrix evaluation of linear attention.
    fn dense_linear(q: &Tensor, k: &Tensor, v: &Tensor, eps: f64) -> Tensor {
        let (qf, kf) = (relu_t(q), relu_t(k));
        let kern = matmul(&qf, &kf.transpose()).unwrap();
        let mut out = matmul(&kern, v).unwrap();
        for i in 0..out.rows() {
            let denom: f64 = kern.row(i).iter().sum::<f64>() + eps;
            for x in out.row_mut(i) {
                *x /= denom;
            }
        }
        out
    }

    fn relu_t(t: &Tensor) -> Tensor {
        t.map(|x| x.max(0.0))
    }

    #[test]
    fn standard_single_token_returns_v() {
        let mut r = rng(0);
        let (q, k, v) = (
            Tensor::randn(&[1, 4], 1.0, &mut r),
            Tensor::randn(&[1, 4], 1.0, &mut r),
            Tensor::randn(&[1, 4], 1.0, &mut r),
        );
        assert!(standard_attention(&q, &k, &v).unwrap().max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn standard_identical_keys_average_values() {
        let mut r = rng(1);
        let q = Tensor::randn(&[3, 4], 1.0, &mut r);
        let krow = Tensor::randn(&[1, 4], 1.0, &mut r);
        let k = Tensor::concat_rows(&[&krow, &krow, &krow, &krow]).unwrap();
        let v = Tensor::randn(&[4, 2], 1.0, &mut r);
        let out = standard_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for b in 0..2 {
                let mean = (0..4).map(|j| v.at(j, b)).sum::<f64>() / 4.0;
                assert!((out.at(i, b) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_matches_dense_oracle() {
        let mut r = rng(2);
        let (q, k, v) = (
            Tensor::randn(&[6, 4], 1.0, &mut r),
            Tensor::randn(&[6, 4], 1.0, &mut r),
            Tensor::randn(&[6, 4], 1.0, &mut r),
        );
        let out = standard_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&dense_softmax(&q, &k, &v)) < 1e-6);
    }

    #[test]
    fn multi_head_is_per_head_single() {
        let mut r = rng(3);
        let (q, k, v) = (
            Tensor::randn(&[5, 8], 1.0, &mut r),
            Tensor::randn(&[7, 8], 1.0, &mut r),
            Tensor::randn(&[7, 8], 1.0, &mut r),
        );
        let (out, _) = standard_attention_counted(&q, &k, &v, 2).unwrap();
        for h in 0..2 {
            let s = |t: &Tensor| t.slice_cols(4 * h, 4 * h + 4);
            let head = standard_attention(&s(&q), &s(&k), &s(&v)).unwrap();
            assert!(s(&out).max_abs_diff(&head) < 1e-12);
        }
    }

    #[test]
    fn linear_single_token_returns_v() {
        let q = Tensor::from_rows(&[&[1.0, 0.5, 0.0, 2.0]]).unwrap();
        let k = Tensor::from_rows(&[&[0.3, 1.0, 0.2, 0.1]]).unwrap();
        let v = Tensor::from_rows(&[&[4.0, -1.0, 0.5, 2.0]]).unwrap();
        let out = linear_attention(&q, &k, &v, EPS_DENOM).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-5);
    }

    #[test]
    fn linear_negative_query_yields_zero() {
        let mut r = rng(4);
        let q = Tensor::full(&[2, 4], -1.0);
        let k = Tensor::randn(&[5, 4], 1.0, &mut r);
        let v = Tensor::randn(&[5, 4], 1.0, &mut r);
        let out = linear_attention(&q, &k, &v, EPS_DENOM).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn linear_matches_kernel_matrix_oracle() {
        let mut r = rng(5);
        let (q, k, v) = (
            Tensor::randn(&[8, 4], 1.0, &mut r),
            Tensor::randn(&[8, 4], 1.0, &mut r),
            Tensor::randn(&[8, 4], 1.0, &mut r),
        );
        let out = linear_attention(&q, &k, &v, EPS_DENOM).unwrap();
        assert!(out.max_abs_diff(&dense_linear(&q, &k, &v, EPS_DENOM)) < 1e-6);
    }

    #[test]
    fn counted_madds_match_cost_model() {
        let mut r = rng(6);
        let (n, d) = (10, 8);
        let (q, k, v) = (
            Tensor::randn(&[n, d], 1.0, &mut r),
            Tensor::randn(&[n, d], 1.0, &mut r),
            Tensor::randn(&[n, d], 1.0, &mut r),
        );
        assert_eq!(
            standard_attention_counted(&q, &k, &v, 2).unwrap().1,
            standard_attention_madds(n, d)
        );
        assert_eq!(
            linear_attention_counted(&q, &k, &v, 2, EPS_DENOM)
                .unwrap()
                .1,
            linear_attention_madds(n, d, 2)
        );
    }

    #[test]
    fn linear_summary_order_robust() {
        let mut r = rng(7);
        let (q, k, v) = (
            Tensor::randn(&[4, 6], 1.0, &mut r),
            Tensor::randn(&[12, 6], 1.0, &mut r),
            Tensor::randn(&[12, 6], 1.0, &mut r),
        );
        let rev = |t: &Tensor| {
            let rows: Vec<Tensor> = (0..t.rows())
                .rev()
                .map(|i| t.slice_rows(i, i + 1))
                .collect();
            Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap()
        };
        let a = linear_attention(&q, &k, &v, EPS_DENOM).unwrap();
        let b = linear_attention(&q, &rev(&k), &rev(&v), EPS_DENOM).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn qk_norm_scale_invariant_and_zero_safe() {
        let mut r = rng(8);
        let q = Tensor::randn(&[3, 8], 1.0, &mut r);
        let (a, _) = qk_norm(&q, &q, 8).unwrap();
        let (b, _) = qk_norm(&q.scale(10.0), &q, 8).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
        let z = Tensor::zeros(&[2, 8]);
        assert_eq!(qk_norm(&z, &z, 4).unwrap().0, z);
        let unit = Tensor::full(&[1, 4], 1.0);
        assert!(qk_norm(&unit, &unit, 4).unwrap().0.max_abs_diff(&unit) < 1e-5);
    }

    #[test]
    fn attention_output_is_norm_then_project() {
        let mut r = rng(9);
        let o = Tensor::randn(&[5, 6], 2.0, &mut r);
        let wo = Tensor::randn(&[6, 6], 1.0, &mut r);
        let manual = matmul(&rms_norm(&o, 1, NORM_EPS).unwrap(), &wo).unwrap();
        assert_eq!(attention_output(&o, &wo).unwrap(), manual);
        assert!(
            attention_output(&o, &Tensor::eye(6))
                .unwrap()
                .max_abs_diff(&rms_norm(&o, 1, NORM_EPS).unwrap())
                < 1e-15
        );
        assert_eq!(
            attention_output(&Tensor::zeros(&[2, 6]), &wo)
                .unwrap()
                .max_abs(),
            0.0
        );
    }

    #[test]
    fn rope_position_zero_identity_and_isometry() {
        let mut r = rng(10);
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        let zero = RopeConfig {
            base: ROPE_BASE,
            positions: vec![0; 3],
        };
        assert_eq!(rope_apply(&x, &zero, 4).unwrap(), x);
        let y = rope_apply(&x, &RopeConfig::sequential(3), 4).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let n0 = x.at(i, 2 * p).hypot(x.at(i, 2 * p + 1));
                let n1 = y.at(i, 2 * p).hypot(y.at(i, 2 * p + 1));
                assert!((n0 - n1).abs() < 1e-6);
            }
        }
        assert!(rope_apply(&Tensor::zeros(&[1, 3]), &RopeConfig::sequential(1), 3).is_err());
    }

    #[test]
    fn rope_inner_product_depends_on_offset_only() {
        let mut r = rng(11);
        let q = Tensor::randn(&[1, 8], 1.0, &mut r);
        let k = Tensor::randn(&[1, 8], 1.0, &mut r);
        let at = |t: &Tensor, p: usize| {
            rope_apply(
                t,
                &RopeConfig {
                    base: ROPE_BASE,
                    positions: vec![p],
                },
                8,
            )
            .unwrap()
        };
        for i in 0..=8 {
            for j in 0..=8 {
                if i < j {
                    continue;
                }
                let a = at(&q, i).dot(&at(&k, j)).unwrap();
                let b = at(&q, i - j).dot(&k).unwrap();
                assert!((a - b).abs() < 1e-9, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn rope_pre_variant_equals_plain_linear() {
        let mut r = rng(12);
        let (q, k, v) = (
            Tensor::randn(&[6, 8], 1.0, &mut r),
            Tensor::randn(&[6, 8], 1.0, &mut r),
            Tensor::randn(&[6, 8], 1.0, &mut r),
        );
        let rope = RopeConfig::sequential(6);
        let pre =
            linear_attention_rope(&q, &k, &v, &rope, 2, EPS_DENOM, NumeratorRope::PreRope).unwrap();
        let (plain, _) = linear_attention_counted(&q, &k, &v, 2, EPS_DENOM).unwrap();
        assert!(pre.max_abs_diff(&plain) < 1e-12);
        let post = linear_attention_rope(&q, &k, &v, &rope, 2, EPS_DENOM, NumeratorRope::PostRope)
            .unwrap();
        assert!(post.max_abs_diff(&plain) > 1e-6);
    }
}
