//! Variable-rate patch embedding.
//!
//! A patch at rate `(pt, ph, pw)` is flattened in `(c, dt, dy, dx)` order
//! and embedded as the row vector `patch · kernel + bias`, so the kernel
//! has shape `[C·pt·ph·pw, d]`. Regions whose extent is not a multiple of
//! the rate are padded by replicating the last frame, row and column.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::latent::dims4;
use crate::tensor::{matmul, pinv, read_ytf, write_ytf, Tensor};

/// Singular values below this fraction of the largest are dropped when
/// inverting a patch kernel.
pub const PINV_RCOND: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct PatchRate {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PatchRate {
    pub const BASE: PatchRate = PatchRate {
        pt: 1,
        ph: 2,
        pw: 2,
    };

    pub fn new(pt: usize, ph: usize, pw: usize) -> Result<Self> {
        if pt == 0 || ph == 0 || pw == 0 {
            return invalid(format!("patch rate ({pt},{ph},{pw}) must be positive"));
        }
        Ok(Self { pt, ph, pw })
    }

    pub fn volume(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    /// Flattened patch length for `channels` input channels.
    pub fn patch_dim(&self, channels: usize) -> usize {
        channels * self.volume()
    }
}

impl TryFrom<[usize; 3]> for PatchRate {
    type Error = Error;

    fn try_from(v: [usize; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<PatchRate> for [usize; 3] {
    fn from(r: PatchRate) -> Self {
        [r.pt, r.ph, r.pw]
    }
}

impl fmt::Display for PatchRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.pt, self.ph, self.pw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchWeights {
    pub rate: PatchRate,
    /// Rate these weights were derived from; equal to `rate` for trained weights.
    pub base: PatchRate,
    pub channels: usize,
    /// `[C·pt·ph·pw, d]`.
    pub kernel: Tensor,
    /// `[1, d]`.
    pub bias: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rate: PatchRate,
    base: PatchRate,
}

impl PatchWeights {
    pub fn new(rate: PatchRate, channels: usize, kernel: Tensor, bias: Tensor) -> Result<Self> {
        let (p, d) = kernel.require_2d("patch kernel")?;
        if p != rate.patch_dim(channels) {
            return shape_err(format!(
                "kernel has {p} rows, rate {rate} with {channels} channels needs {}",
                rate.patch_dim(channels)
            ));
        }
        if bias.shape() != [1, d] {
            return shape_err(format!("bias shape {:?}, expected [1, {d}]", bias.shape()));
        }
        if !kernel.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("PatchWeights::new"));
        }
        Ok(Self {
            rate,
            base: rate,
            channels,
            kernel,
            bias,
        })
    }

    pub fn d_model(&self) -> usize {
        self.kernel.cols()
    }

    /// Writes `<stem>.kernel.ytf`, `<stem>.bias.ytf` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        write_ytf(&self.kernel, dir.join(format!("{stem}.kernel.ytf")))?;
        write_ytf(&self.bias, dir.join(format!("{stem}.bias.ytf")))?;
        let side = Sidecar {
            rate: self.rate,
            base: self.base,
        };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec(&side)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let side: Sidecar =
            serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let kernel = read_ytf(dir.join(format!("{stem}.kernel.ytf")))?;
        let bias = read_ytf(dir.join(format!("{stem}.bias.ytf")))?;
        let (p, _) = kernel.require_2d("patch kernel")?;
        if p % side.rate.volume() != 0 {
            return shape_err(format!(
                "kernel rows {p} not a multiple of rate {}",
                side.rate
            ));
        }
        let mut w = Self::new(side.rate, p / side.rate.volume(), kernel, bias)?;
        w.base = side.base;
        Ok(w)
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenMeta {
    /// Frame age; 0 marks the chunk being predicted.
    pub age: usize,
    pub rate: PatchRate,
    /// Block coordinates `(t, y, x)` inside the patchified region.
    pub index: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub meta: Vec<TokenMeta>,
}

impl TokenSequence {
    pub fn empty(d: usize) -> Self {
        Self {
            tokens: Tensor::zeros(&[0, d]),
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn with_age(mut self, age: usize) -> Self {
        for m in &mut self.meta {
            m.age = age;
        }
        self
    }

    pub fn concat(parts: &[TokenSequence]) -> Result<TokenSequence> {
        let Some(first) = parts.first() else {
            return invalid("concat of no token sequences");
        };
        let rows: Vec<&Tensor> = parts.iter().map(|p| &p.tokens).collect();
        let d = first.tokens.cols();
        let tokens = if rows.iter().all(|r| r.rows() == 0) {
            Tensor::zeros(&[0, d])
        } else {
            Tensor::concat_rows(&rows)?
        };
        Ok(Self {
            tokens,
            meta: parts.iter().flat_map(|p| p.meta.iter().copied()).collect(),
        })
    }

    /// Row indices of predicted-chunk tokens (age 0).
    pub fn predicted_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.meta[i].age == 0).collect()
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

pub fn token_count(frames: usize, h: usize, w: usize, rate: PatchRate) -> usize {
    ceil_div(frames, rate.pt) * ceil_div(h, rate.ph) * ceil_div(w, rate.pw)
}

/// Rearranges a `[C, f, h, w]` region into `[N, C·pt·ph·pw]` patch rows,
/// padding by edge replication.
pub fn extract_patches(region: &Tensor, rate: PatchRate) -> Result<Tensor> {
    let (c, f, h, w) = dims4(region)?;
    let (nt, ny, nx) = (
        ceil_div(f, rate.pt),
        ceil_div(h, rate.ph),
        ceil_div(w, rate.pw),
    );
    let p = rate.patch_dim(c);
    let n = nt * ny * nx;
    let src = region.data();
    let mut out = vec![0.0; n * p];
    for bt in 0..nt {
        for by in 0..ny {
            for bx in 0..nx {
                let row = (bt * ny + by) * nx + bx;
                let dst = &mut out[row * p..(row + 1) * p];
                let mut k = 0;
                for ch in 0..c {
                    for dt in 0..rate.pt {
                        let tt = (bt * rate.pt + dt).min(f - 1);
                        for dy in 0..rate.ph {
                            let yy = (by * rate.ph + dy).min(h - 1);
                            for dx in 0..rate.pw {
                                let xx = (bx * rate.pw + dx).min(w - 1);
                                dst[k] = src[((ch * f + tt) * h + yy) * w + xx];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, p], out))
}

/// Inverse of [`extract_patches`]; padded positions are discarded.
pub fn fold_patches(
    patches: &Tensor,
    dims: (usize, usize, usize, usize),
    rate: PatchRate,
) -> Result<Tensor> {
    let (c, f, h, w) = dims;
    let (nt, ny, nx) = (
        ceil_div(f, rate.pt),
        ceil_div(h, rate.ph),
        ceil_div(w, rate.pw),
    );
    let p = rate.patch_dim(c);
    if patches.shape() != [nt * ny * nx, p] {
        return shape_err(format!(
            "{:?} patches cannot fold into {:?} at rate {rate}",
            patches.shape(),
            [c, f, h, w]
        ));
    }
    let mut out = vec![0.0; c * f * h * w];
    for bt in 0..nt {
        for by in 0..ny {
            for bx in 0..nx {
                let row = patches.row((bt * ny + by) * nx + bx);
                let mut k = 0;
                for ch in 0..c {
                    for dt in 0..rate.pt {
                        for dy in 0..rate.ph {
                            for dx in 0..rate.pw {
                                let (tt, yy, xx) =
                                    (bt * rate.pt + dt, by * rate.ph + dy, bx * rate.pw + dx);
                                if tt < f && yy < h && xx < w {
                                    out[((ch * f + tt) * h + yy) * w + xx] = row[k];
                                }
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, f, h, w], out)
}

/// Embeds a `[C, f, h, w]` region; every token gets age 0.
pub fn patchify(region: &Tensor, rate: PatchRate, weights: &PatchWeights) -> Result<TokenSequence> {
    if weights.rate != rate {
        return invalid(format!(
            "weights are for rate {}, asked for {rate}",
            weights.rate
        ));
    }
    let (c, f, h, w) = dims4(region)?;
    if c != weights.channels {
        return shape_err(format!(
            "region has {c} channels, weights expect {}",
            weights.channels
        ));
    }
    let patches = extract_patches(region, rate)?;
    let mut tokens = matmul(&patches, &weights.kernel)?;
    for i in 0..tokens.rows() {
        for (t, b) in tokens.row_mut(i).iter_mut().zip(weights.bias.data()) {
            *t += b;
        }
    }
    let (nt, ny, nx) = (
        ceil_div(f, rate.pt),
        ceil_div(h, rate.ph),
        ceil_div(w, rate.pw),
    );
    let mut meta = Vec::with_capacity(nt * ny * nx);
    for t in 0..nt {
        for y in 0..ny {
            for x in 0..nx {
                meta.push(TokenMeta {
                    age: 0,
                    rate,
                    index: (t, y, x),
                });
            }
        }
    }
    Ok(TokenSequence { tokens, meta })
}

/// Least-squares inverse of [`patchify`] onto a region of `dims`.
pub fn unpatchify(
    tokens: &Tensor,
    rate: PatchRate,
    weights: &PatchWeights,
    dims: (usize, usize, usize, usize),
) -> Result<Tensor> {
    if weights.rate != rate {
        return invalid(format!(
            "weights are for rate {}, asked for {rate}",
            weights.rate
        ));
    }
    let (n, d) = tokens.require_2d("unpatchify tokens")?;
    let expected = token_count(dims.1, dims.2, dims.3, rate);
    if n != expected || d != weights.d_model() || dims.0 != weights.channels {
        return shape_err(format!(
            "{:?} tokens inconsistent with region {:?} at rate {rate}",
            tokens.shape(),
            dims
        ));
    }
    let mut centered = tokens.clone();
    for i in 0..n {
        for (t, b) in centered.row_mut(i).iter_mut().zip(weights.bias.data()) {
            *t -= b;
        }
    }
    let k_pinv = pinv(&weights.kernel, PINV_RCOND)?;
    let patches = matmul(&centered, &k_pinv)?;
    fold_patches(&patches, dims, rate)
}

/// Derives weights at `target` from weights at a finer rate by spreading
/// each base entry over its ratio block and dividing by the block volume.
pub fn interpolate_patch_weights(base: &PatchWeights, target: PatchRate) -> Result<PatchWeights> {
    let b = base.rate;
    let ratio = |t: usize, s: usize, axis: &str| -> Result<usize> {
        if t < s || !t.is_multiple_of(s) {
            return invalid(format!(
                "non-integer {axis} ratio {t}/{s} from {b} to {target}"
            ));
        }
        Ok(t / s)
    };
    let rt = ratio(target.pt, b.pt, "temporal")?;
    let ry = ratio(target.ph, b.ph, "height")?;
    let rx = ratio(target.pw, b.pw, "width")?;
    let scale = 1.0 / (rt * ry * rx) as f64;
    let c = base.channels;
    let d = base.d_model();
    let mut kernel = Tensor::zeros(&[target.patch_dim(c), d]);
    let mut k = 0;
    for ch in 0..c {
        for dt in 0..target.pt {
            for dy in 0..target.ph {
                for dx in 0..target.pw {
                    let src = ((ch * b.pt + dt / rt) * b.ph + dy / ry) * b.pw + dx / rx;
                    for (o, v) in kernel.row_mut(k).iter_mut().zip(base.kernel.row(src)) {
                        *o = v * scale;
                    }
                    k += 1;
                }
            }
        }
    }
    Ok(PatchWeights {
        rate: target,
        base: base.base,
        channels: c,
        kernel,
        bias: base.bias.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_fold_round_trip_with_padding() {
        let x = Tensor::from_fn(&[2, 3, 5, 3], |i| i as f64);
        let r = PatchRate::new(2, 2, 2).unwrap();
        let p = extract_patches(&x, r).unwrap();
        assert_eq!(p.rows(), token_count(3, 5, 3, r));
        assert_eq!(fold_patches(&p, (2, 3, 5, 3), r).unwrap(), x);
    }

    #[test]
    fn padding_replicates_edge() {
        let x = Tensor::from_fn(&[1, 1, 1, 3], |i| i as f64 + 1.0);
        let p = extract_patches(&x, PatchRate::BASE).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn rate_rejects_zero() {
        assert!(PatchRate::new(1, 0, 2).is_err());
        assert!(serde_json::from_str::<PatchRate>("[1,0,2]").is_err());
        assert_eq!(serde_json::to_string(&PatchRate::BASE).unwrap(), "[1,2,2]");
    }
}
