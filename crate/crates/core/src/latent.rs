//! Video latents `[C, f, h, w]` with a binary condition mask `[1, f, h, w]`.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    data: Tensor,
    mask: Tensor,
}

impl VideoLatent {
    pub fn new(data: Tensor, mask: Tensor) -> Result<Self> {
        let (_, f, h, w) = dims4(&data)?;
        if mask.shape() != [1, f, h, w] {
            return shape_err(format!(
                "mask shape {:?} does not match latent {:?}",
                mask.shape(),
                data.shape()
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return invalid("mask must be binary");
        }
        Ok(Self { data, mask })
    }

    /// Latent with an all-zero mask (nothing preserved).
    pub fn unmasked(data: Tensor) -> Result<Self> {
        let (_, f, h, w) = dims4(&data)?;
        Self::new(data, Tensor::zeros(&[1, f, h, w]))
    }

    pub fn zeros(c: usize, f: usize, h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[c, f, h, w]),
            mask: Tensor::zeros(&[1, f, h, w]),
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// Frames at the given indices, in that order.
    pub fn select_frames(&self, idx: &[usize]) -> Result<VideoLatent> {
        Ok(Self {
            data: select_frames(&self.data, idx)?,
            mask: select_frames(&self.mask, idx)?,
        })
    }

    /// Frames `[start, end)`.
    pub fn frame_range(&self, start: usize, end: usize) -> Result<VideoLatent> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_frames(&idx)
    }

    /// Concatenates latents along the frame axis.
    pub fn concat_frames(parts: &[&VideoLatent]) -> Result<VideoLatent> {
        let data: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        let mask: Vec<&Tensor> = parts.iter().map(|p| &p.mask).collect();
        Ok(Self {
            data: concat_frames(&data)?,
            mask: concat_frames(&mask)?,
        })
    }
}

pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [c, f, h, w] => Ok((c, f, h, w)),
        _ => shape_err(format!("expected [C, f, h, w], got {:?}", t.shape())),
    }
}

/// Picks frames (axis 1) of a `[C, f, h, w]` tensor.
pub fn select_frames(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (c, f, h, w) = dims4(t)?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= f) {
        return invalid(format!("frame {bad} out of range for {f} frames"));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c * idx.len() * plane);
    for ch in 0..c {
        for &i in idx {
            let at = (ch * f + i) * plane;
            out.extend_from_slice(&t.data()[at..at + plane]);
        }
    }
    Tensor::new(vec![c, idx.len(), h, w], out)
}

/// Concatenates `[C, f_i, h, w]` tensors along the frame axis.
pub fn concat_frames(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return invalid("concat_frames of nothing");
    };
    let (c, _, h, w) = dims4(first)?;
    let mut total = 0;
    for p in parts {
        let (pc, pf, ph, pw) = dims4(p)?;
        if (pc, ph, pw) != (c, h, w) {
            return shape_err(format!(
                "concat_frames: {:?} vs {:?}",
                p.shape(),
                first.shape()
            ));
        }
        total += pf;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c * total * plane);
    for ch in 0..c {
        for p in parts {
            let pf = p.shape()[1];
            let at = ch * pf * plane;
            out.extend_from_slice(&p.data()[at..at + pf * plane]);
        }
    }
    Tensor::new(vec![c, total, h, w], out)
}

/// `M * z_c + (1 - M) * z`, with the `[1, f, h, w]` mask broadcast over channels.
pub fn mask_fuse(z: &Tensor, z_c: &Tensor, mask: &Tensor) -> Result<VideoLatent> {
    let (c, f, h, w) = dims4(z)?;
    if z_c.shape() != z.shape() {
        return shape_err(format!("mask_fuse: {:?} vs {:?}", z.shape(), z_c.shape()));
    }
    if mask.shape() != [1, f, h, w] {
        return shape_err(format!(
            "mask_fuse: mask {:?} for latent {:?}",
            mask.shape(),
            z.shape()
        ));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return invalid("mask must be binary");
    }
    let n = f * h * w;
    let m = mask.data();
    let out = Tensor::from_fn(&[c, f, h, w], |i| {
        if m[i % n] == 1.0 {
            z_c.data()[i]
        } else {
            z.data()[i]
        }
    });
    VideoLatent::new(out, mask.clone())
}
