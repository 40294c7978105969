//! History compression for chunked generation.
//!
//! Two branches work over the frames that precede the chunk being predicted:
//!
//! * the spatial branch patchifies every kept frame at a rate chosen by its
//!   age (older frames get coarser patches), producing tokens that join the
//!   self-attention sequence;
//! * the channel branch patchifies the same frames at `(8,4,4)` into a
//!   96-wide space and mixes them with the predicted tokens through a
//!   linear-attention adapter inside every block.
//!
//! Frame `i` of an `L`-frame history has age `L - i`; frame 0 is the initial
//! frame and is always kept. Frames older than the window are thinned by
//! stratified sampling: they are split into consecutive strata of `den`
//! frames starting from the oldest, and `num` frames are drawn from each
//! complete stratum. Strata never move as the history grows, so a frame that
//! was kept stays kept.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::EPS_DENOM;
use crate::autograd::{Backend, Eval};
use crate::error::{invalid, shape_err, Error, Result};
use crate::latent::VideoLatent;
use crate::patchify::{
    interpolate_patch_weights, patchify, PatchRate, PatchWeights, TokenSequence,
};
use crate::tensor::Tensor;

/// Width of the channel branch.
pub const CHANNEL_DIM: usize = 96;

/// A rational in `(0, 1]`, written `"num/den"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return invalid(format!("rate {num}/{den} must lie in (0, 1]"));
        }
        Ok(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse {
            position: 0,
            message: format!("expected \"num/den\", got {s:?}"),
        };
        let (a, b) = s.split_once('/').ok_or_else(bad)?;
        let num = a.trim().parse().map_err(|_| bad())?;
        let den = b.trim().parse().map_err(|_| bad())?;
        Self::new(num, den)
    }
}

impl TryFrom<String> for Rational {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Rational> for String {
    fn from(r: Rational) -> Self {
        r.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderBucket {
    pub age_min: usize,
    pub age_max: usize,
    pub rate: PatchRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderSchedule {
    pub buckets: Vec<LadderBucket>,
    pub initial_frame_rate: PatchRate,
    pub temporal_sample_rate: Rational,
    pub window: usize,
    /// Rate for frames older than the window.
    #[serde(default = "default_sampled_rate")]
    pub sampled_rate: PatchRate,
}

fn default_sampled_rate() -> PatchRate {
    PatchRate {
        pt: 1,
        ph: 8,
        pw: 8,
    }
}

impl Default for LadderSchedule {
    fn default() -> Self {
        let r = |ph| PatchRate { pt: 1, ph, pw: ph };
        Self {
            buckets: vec![
                LadderBucket {
                    age_min: 1,
                    age_max: 2,
                    rate: r(2),
                },
                LadderBucket {
                    age_min: 3,
                    age_max: 6,
                    rate: r(4),
                },
                LadderBucket {
                    age_min: 7,
                    age_max: 23,
                    rate: r(8),
                },
            ],
            initial_frame_rate: r(2),
            temporal_sample_rate: Rational { num: 1, den: 32 },
            window: 23,
            sampled_rate: default_sampled_rate(),
        }
    }
}

impl LadderSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut next = 1;
        for b in &self.buckets {
            if b.age_min != next || b.age_max < b.age_min {
                return invalid(format!(
                    "bucket {}..{} leaves a gap or overlap at age {next}",
                    b.age_min, b.age_max
                ));
            }
            next = b.age_max + 1;
        }
        if next != self.window + 1 {
            return invalid(format!(
                "buckets end at age {} but window is {}",
                next - 1,
                self.window
            ));
        }
        Ok(())
    }

    /// Every rate the schedule can assign.
    pub fn rates(&self) -> Vec<PatchRate> {
        let mut out = vec![self.initial_frame_rate, self.sampled_rate];
        out.extend(self.buckets.iter().map(|b| b.rate));
        out.sort_by_key(|r| (r.pt, r.ph, r.pw));
        out.dedup();
        out
    }

    fn rate_for_age(&self, age: usize) -> PatchRate {
        self.buckets
            .iter()
            .find(|b| (b.age_min..=b.age_max).contains(&age))
            .map_or(self.sampled_rate, |b| b.rate)
    }
}

/// A history frame selected for the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameAssignment {
    /// Index into the history, 0 = initial frame.
    pub frame: usize,
    pub age: usize,
    pub rate: PatchRate,
}

/// Keeps `rate.num` ages out of every complete stratum of `rate.den`,
/// strata counted from the oldest age. Returned ages are sorted oldest first.
pub fn temporal_sample(ages: &[usize], rate: Rational, seed: u64) -> Vec<usize> {
    let mut sorted = ages.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    if rate.num == rate.den {
        return sorted;
    }
    let (q, p) = (rate.den as usize, rate.num as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for stratum in sorted.chunks_exact(q) {
        let mut picks = index::sample(&mut rng, q, p).into_vec();
        picks.sort_unstable();
        kept.extend(picks.into_iter().map(|i| stratum[i]));
    }
    kept
}

/// Frames kept for an `history_len`-frame history, oldest first.
pub fn assign_ladder_buckets(
    history_len: usize,
    sched: &LadderSchedule,
    seed: u64,
) -> Vec<FrameAssignment> {
    if history_len == 0 {
        return Vec::new();
    }
    let l = history_len;
    let eligible: Vec<usize> = (sched.window + 1..l).collect();
    let sampled = temporal_sample(&eligible, sched.temporal_sample_rate, seed);
    let mut out = vec![FrameAssignment {
        frame: 0,
        age: l,
        rate: sched.initial_frame_rate,
    }];
    for age in sampled {
        out.push(FrameAssignment {
            frame: l - age,
            age,
            rate: sched.sampled_rate,
        });
    }
    for age in (1..=sched.window.min(l - 1)).rev() {
        out.push(FrameAssignment {
            frame: l - age,
            age,
            rate: sched.rate_for_age(age),
        });
    }
    out
}

/// Patch weights for every rate of `sched`, derived from `base`.
pub fn weights_for_schedule(
    base: &PatchWeights,
    sched: &LadderSchedule,
) -> Result<HashMap<PatchRate, PatchWeights>> {
    sched
        .rates()
        .into_iter()
        .map(|r| Ok((r, interpolate_patch_weights(base, r)?)))
        .collect()
}

/// Patchifies each assigned frame at its rate and concatenates the tokens
/// in assignment order. Token ages come from the assignments.
pub fn compress_frames(
    history: &VideoLatent,
    frames: &[FrameAssignment],
    weights: &HashMap<PatchRate, PatchWeights>,
) -> Result<TokenSequence> {
    let Some(any) = weights.values().next() else {
        return invalid("no patch weights supplied");
    };
    let mut parts = Vec::with_capacity(frames.len());
    for fa in frames {
        let w = weights.get(&fa.rate).ok_or_else(|| {
            Error::InvalidArgument(format!("no patch weights for rate {}", fa.rate))
        })?;
        let frame = history.frame_range(fa.frame, fa.frame + 1)?;
        parts.push(patchify(frame.data(), fa.rate, w)?.with_age(fa.age));
    }
    if parts.is_empty() {
        return Ok(TokenSequence::empty(any.d_model()));
    }
    TokenSequence::concat(&parts)
}

pub fn compress_history_spatial(
    history: &VideoLatent,
    sched: &LadderSchedule,
    weights: &HashMap<PatchRate, PatchWeights>,
    seed: u64,
) -> Result<TokenSequence> {
    let frames = assign_ladder_buckets(history.frames(), sched, seed);
    compress_frames(history, &frames, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBranchConfig {
    pub rate: PatchRate,
    pub channels: usize,
    /// Patch embedding into the channel space, `[C·8·4·4, 96]`.
    pub weights: PatchWeights,
}

impl ChannelBranchConfig {
    pub fn new(weights: PatchWeights) -> Result<Self> {
        let channels = weights.d_model();
        Ok(Self {
            rate: weights.rate,
            channels,
            weights,
        })
    }
}

/// Channel-branch tokens `[M, 96]`; the frame count is padded up to a
/// multiple of `pt` by repeating the newest frame.
pub fn compress_history_channel(
    history: &VideoLatent,
    cfg: &ChannelBranchConfig,
) -> Result<Tensor> {
    if history.frames() == 0 {
        return Ok(Tensor::zeros(&[0, cfg.channels]));
    }
    Ok(patchify(history.data(), cfg.rate, &cfg.weights)?.tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedContext {
    pub spatial_tokens: TokenSequence,
    pub channel_tokens: Tensor,
    pub frame_ages_used: Vec<usize>,
}

impl CompressedContext {
    pub fn empty(d_model: usize, channels: usize) -> Self {
        Self {
            spatial_tokens: TokenSequence::empty(d_model),
            channel_tokens: Tensor::zeros(&[0, channels]),
            frame_ages_used: Vec::new(),
        }
    }
}

/// Spatial tokens for `frames`, plus channel tokens over the same frames when
/// a channel branch is given.
pub fn build_context(
    history: &VideoLatent,
    frames: &[FrameAssignment],
    weights: &HashMap<PatchRate, PatchWeights>,
    channel: Option<&ChannelBranchConfig>,
) -> Result<CompressedContext> {
    let spatial_tokens = compress_frames(history, frames, weights)?;
    let idx: Vec<usize> = frames.iter().map(|f| f.frame).collect();
    let channel_tokens = match channel {
        Some(cfg) if !frames.is_empty() => {
            compress_history_channel(&history.select_frames(&idx)?, cfg)?
        }
        Some(cfg) => Tensor::zeros(&[0, cfg.channels]),
        None => Tensor::zeros(&[0, CHANNEL_DIM]),
    };
    Ok(CompressedContext {
        spatial_tokens,
        channel_tokens,
        frame_ages_used: frames.iter().map(|f| f.age).collect(),
    })
}

/// Ladder-compressed context with both branches.
pub fn compress_context(
    history: &VideoLatent,
    sched: &LadderSchedule,
    weights: &HashMap<PatchRate, PatchWeights>,
    channel: &ChannelBranchConfig,
    seed: u64,
) -> Result<CompressedContext> {
    let frames = assign_ladder_buckets(history.frames(), sched, seed);
    build_context(history, &frames, weights, Some(channel))
}

/// Fusion adapter weights for one block (`x W` convention).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    /// `[d, 96]`
    pub fc_down: T,
    /// `[96, 96]` each
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// `[96, d]`
    pub fc_up: T,
}

impl<T> FusionParams<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> FusionParams<U> {
        FusionParams {
            fc_down: f("fc_down", &self.fc_down),
            wq: f("wq", &self.wq),
            wk: f("wk", &self.wk),
            wv: f("wv", &self.wv),
            wo: f("wo", &self.wo),
            fc_up: f("fc_up", &self.fc_up),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        self.map(|n, t| f(n, t));
    }
}

/// Multi-head ReLU linear attention with rotary numerator, over a backend.
pub fn linear_attention_rope_with<B: Backend>(
    b: &mut B,
    q: &B::V,
    k: &B::V,
    v: &B::V,
    positions: &[usize],
    n_heads: usize,
) -> B::V {
    let (_, d) = b.shape(q);
    let (_, dv) = b.shape(v);
    let (hd, hv) = (d / n_heads, dv / n_heads);
    let qf = b.relu(q);
    let kf = b.relu(k);
    let qr = b.rope(&qf, positions, hd);
    let kr = b.rope(&kf, positions, hd);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qn = b.slice_cols(&qr, c0, c1);
        let kn = b.slice_cols(&kr, c0, c1);
        let qd = b.slice_cols(&qf, c0, c1);
        let kd = b.slice_cols(&kf, c0, c1);
        let vh = b.slice_cols(v, h * hv, (h + 1) * hv);
        let knt = b.transpose(&kn);
        let summary = b.matmul(&knt, &vh);
        let num = b.matmul(&qn, &summary);
        let ksum = b.col_sum(&kd);
        let ksum_t = b.transpose(&ksum);
        let den = b.matmul(&qd, &ksum_t);
        let den = b.add_scalar(&den, EPS_DENOM);
        heads.push(b.div_col(&num, &den));
    }
    if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        b.concat_cols(&heads)
    }
}

/// Fusion for the predicted rows `z_pred` `[N_l, d]`: returns
/// `z_pred + fc_up(tail(Norm(LinAttn(concat(z_linear, fc_down(z_pred)))) Wo))`.
pub fn fuse_predicted<B: Backend>(
    b: &mut B,
    z_pred: &B::V,
    z_linear: &B::V,
    p: &FusionParams<B::V>,
    n_heads: usize,
) -> B::V {
    let (n_l, _) = b.shape(z_pred);
    let (m, _) = b.shape(z_linear);
    let down = b.matmul(z_pred, &p.fc_down);
    let seq = if m == 0 {
        down
    } else {
        b.concat_rows(&[z_linear.clone(), down])
    };
    let q = b.matmul(&seq, &p.wq);
    let k = b.matmul(&seq, &p.wk);
    let v = b.matmul(&seq, &p.wv);
    let (_, c) = b.shape(&q);
    let hd = c / n_heads;
    let q = b.rms_norm_groups(&q, hd);
    let k = b.rms_norm_groups(&k, hd);
    let positions: Vec<usize> = (0..m + n_l).collect();
    let o = linear_attention_rope_with(b, &q, &k, &v, &positions, n_heads);
    let o = b.rms_norm_groups(&o, c);
    let o = b.matmul(&o, &p.wo);
    let tail = b.slice_rows(&o, m, m + n_l);
    let up = b.matmul(&tail, &p.fc_up);
    b.add(z_pred, &up)
}

/// Applies the fusion adapter to the predicted (age 0) rows of `z_l` and
/// returns the whole sequence; history rows are copied through untouched.
pub fn fuse_tscm(
    z_l: &TokenSequence,
    z_linear: &Tensor,
    p: &FusionParams<Tensor>,
    n_heads: usize,
) -> Result<Tensor> {
    let rows = z_l.predicted_rows();
    let n = z_l.len();
    let n_l = rows.len();
    if n_l == 0 {
        return invalid("no predicted tokens (age 0) in sequence");
    }
    if rows[0] != n - n_l || rows.iter().enumerate().any(|(i, &r)| r != n - n_l + i) {
        return invalid("predicted tokens must be contiguous at the sequence tail");
    }
    let (_, d) = z_l.tokens.require_2d("z_l")?;
    let (_, c) = z_linear.require_2d("z_linear")?;
    if p.fc_down.shape() != [d, c] || p.fc_up.shape() != [c, d] {
        return shape_err(format!(
            "fc_down {:?} / fc_up {:?} do not fit d={d}, channels={c}",
            p.fc_down.shape(),
            p.fc_up.shape()
        ));
    }
    for w in [&p.wq, &p.wk, &p.wv, &p.wo] {
        if w.shape() != [c, c] {
            return shape_err(format!(
                "fusion projection {:?}, expected [{c}, {c}]",
                w.shape()
            ));
        }
    }
    if n_heads == 0 || c % n_heads != 0 || !(c / n_heads).is_multiple_of(2) {
        return invalid(format!(
            "{n_heads} heads do not split {c} channels into even blocks"
        ));
    }
    let mut e = Eval;
    let pred = z_l.tokens.slice_rows(n - n_l, n);
    let fused = fuse_predicted(&mut e, &pred, z_linear, p, n_heads);
    let out = if n_l == n {
        fused
    } else {
        Tensor::concat_rows(&[&z_l.tokens.slice_rows(0, n - n_l), &fused])?
    };
    out.ensure_finite("fuse_tscm")
}
