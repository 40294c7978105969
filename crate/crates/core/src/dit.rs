//! Toy diffusion transformer over a predicted chunk plus compressed history.
//!
//! Sequence layout is `[history tokens | predicted tokens]`. Each block runs
//! self-attention over the whole sequence, cross-attention to the text, the
//! channel-branch fusion on the predicted rows and an MLP, all residual.
//! Timestep shift/scale only modulates the predicted rows.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backend, Eval, Gradients, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::latent::VideoLatent;
use crate::patchify::{extract_patches, fold_patches, PatchRate, PatchWeights, PINV_RCOND};
use crate::tensor::{matmul, pinv, read_ytf, write_ytf, Tensor};
use crate::tscm::{
    build_context, fuse_predicted, weights_for_schedule, ChannelBranchConfig, CompressedContext,
    FrameAssignment, FusionParams, LadderSchedule, CHANNEL_DIM,
};

/// Channel-branch patch rate.
pub const CHANNEL_RATE: PatchRate = PatchRate {
    pt: 8,
    ph: 4,
    pw: 4,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitConfig {
    pub channels: usize,
    pub chunk_frames: usize,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub d_text: usize,
    pub mlp_ratio: usize,
    pub t_embed_dim: usize,
    pub event_len: usize,
    pub action_len: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            chunk_frames: 4,
            height: 16,
            width: 16,
            d_model: 64,
            n_heads: 4,
            depth: 4,
            d_text: 32,
            mlp_ratio: 4,
            t_embed_dim: 32,
            event_len: 8,
            action_len: 16,
        }
    }
}

impl DitConfig {
    /// Small enough for finite-difference checks and short training runs.
    pub fn tiny() -> Self {
        Self {
            channels: 4,
            chunk_frames: 2,
            height: 8,
            width: 8,
            d_model: 32,
            n_heads: 2,
            depth: 2,
            d_text: 16,
            mlp_ratio: 2,
            t_embed_dim: 16,
            event_len: 4,
            action_len: 8,
        }
    }

    /// `depth` may be zero; every other field must be positive.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("channels", self.channels),
            ("chunk_frames", self.chunk_frames),
            ("height", self.height),
            ("width", self.width),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_text", self.d_text),
            ("mlp_ratio", self.mlp_ratio),
            ("t_embed_dim", self.t_embed_dim),
            ("event_len", self.event_len),
            ("action_len", self.action_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return invalid(format!("config field {name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads)
            || !(self.d_model / self.n_heads).is_multiple_of(2)
        {
            return invalid(format!(
                "d_model {} must split into {} even-width heads",
                self.d_model, self.n_heads
            ));
        }
        if !CHANNEL_DIM.is_multiple_of(self.n_heads)
            || !(CHANNEL_DIM / self.n_heads).is_multiple_of(2)
        {
            return invalid(format!(
                "{} heads do not split the {CHANNEL_DIM}-wide channel branch evenly",
                self.n_heads
            ));
        }
        if !self.height.is_multiple_of(2)
            || !self.width.is_multiple_of(2)
            || !self.t_embed_dim.is_multiple_of(2)
        {
            return invalid("height, width and t_embed_dim must be even");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flattened `(1,2,2)` patch width.
    pub fn patch_dim(&self) -> usize {
        PatchRate::BASE.patch_dim(self.channels)
    }

    /// Tokens in one predicted chunk.
    pub fn chunk_tokens(&self) -> usize {
        self.chunk_frames * (self.height / 2) * (self.width / 2)
    }

    pub fn chunk_dims(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.chunk_frames, self.height, self.width)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    /// `[d, 4d]`: shift and scale for the attention and MLP inputs.
    pub ada_w: T,
    pub ada_b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    /// Cross-attention; keys and values read `[L, d_text]` text rows.
    pub cq: T,
    pub ck: T,
    pub cv: T,
    pub co: T,
    pub fusion: FusionParams<T>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> BlockParams<U> {
        BlockParams {
            ada_w: f("ada_w", &self.ada_w),
            ada_b: f("ada_b", &self.ada_b),
            wq: f("attn.wq", &self.wq),
            wk: f("attn.wk", &self.wk),
            wv: f("attn.wv", &self.wv),
            wo: f("attn.wo", &self.wo),
            cq: f("cross.wq", &self.cq),
            ck: f("cross.wk", &self.ck),
            cv: f("cross.wv", &self.cv),
            co: f("cross.wo", &self.co),
            fusion: self.fusion.map(|n, t| f(&format!("fusion.{n}"), t)),
            w1: f("mlp.w1", &self.w1),
            b1: f("mlp.b1", &self.b1),
            w2: f("mlp.w2", &self.w2),
            b2: f("mlp.b2", &self.b2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<T> {
    /// `[C·4, d]` embedding at `(1,2,2)`; history rates interpolate from it.
    pub patch_kernel: T,
    pub patch_bias: T,
    /// `[C·128, 96]` channel-branch embedding at `(8,4,4)`.
    pub channel_kernel: T,
    pub channel_bias: T,
    pub t_w1: T,
    pub t_b1: T,
    pub t_w2: T,
    pub t_b2: T,
    pub blocks: Vec<BlockParams<T>>,
    /// `[d, C·4]`
    pub out_w: T,
    pub out_b: T,
}

impl<T> DitParams<T> {
    /// Visits every tensor in a fixed order with a dotted name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> DitParams<U> {
        let patch_kernel = f("patch.kernel", &self.patch_kernel);
        let patch_bias = f("patch.bias", &self.patch_bias);
        let channel_kernel = f("channel.kernel", &self.channel_kernel);
        let channel_bias = f("channel.bias", &self.channel_bias);
        let t_w1 = f("time.w1", &self.t_w1);
        let t_b1 = f("time.b1", &self.t_b1);
        let t_w2 = f("time.w2", &self.t_w2);
        let t_b2 = f("time.b2", &self.t_b2);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, bp)| bp.map(|n, t| f(&format!("blocks.{i}.{n}"), t)))
            .collect();
        DitParams {
            patch_kernel,
            patch_bias,
            channel_kernel,
            channel_bias,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            blocks,
            out_w: f("out.w", &self.out_w),
            out_b: f("out.b", &self.out_b),
        }
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a T)) {
        self.map(|n, t| f(n, t));
    }

    pub fn flatten(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    /// Rebuilds the same structure from values listed in visit order.
    pub fn with_values<U>(&self, values: Vec<U>) -> DitParams<U> {
        let mut it = values.into_iter();
        let out = self.map(|n, _| it.next().unwrap_or_else(|| panic!("missing value for {n}")));
        assert!(it.next().is_none(), "too many values");
        out
    }
}

impl DitParams<Tensor> {
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn sum_sq(&self) -> f64 {
        let mut s = 0.0;
        self.visit(|_, t| s += t.sum_sq());
        s
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.is_finite());
        ok
    }

    /// `self + s · other`, field by field.
    pub fn axpy(&mut self, s: f64, other: &DitParams<Tensor>) -> Result<()> {
        let others = other.flatten();
        let mut i = 0;
        let mut err = None;
        let updated = self.map(|_, t| {
            let mut t = t.clone();
            if let Err(e) = t.axpy(s, others[i]) {
                err.get_or_insert(e);
            }
            i += 1;
            t
        });
        if let Some(e) = err {
            return Err(e);
        }
        *self = updated;
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|_, t| t.scale(s))
    }

    pub fn max_abs_diff(&self, other: &DitParams<Tensor>) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn leaves(&self, g: &mut Graph) -> DitParams<Var> {
        self.map(|_, t| g.leaf(t))
    }
}

impl DitParams<Var> {
    pub fn gradients(&self, grads: &Gradients) -> DitParams<Tensor> {
        self.map(|_, v| grads.get(*v))
    }
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::randn(&[rows, cols], std, rng)
}

fn lin(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    randn(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

/// Seeded initialization. The output head starts as the pseudoinverse of
/// the patch embedding so a zero-depth model reproduces its input patches;
/// `fc_up` and the timestep modulation start at zero.
pub fn init_params(cfg: &DitConfig, seed: u64) -> Result<DitParams<Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, p, c) = (cfg.d_model, cfg.patch_dim(), CHANNEL_DIM);
    let hidden = cfg.mlp_ratio * d;
    let patch_kernel = lin(&mut rng, p, d);
    let patch_bias = randn(&mut rng, 1, d, 0.02);
    let channel_in = CHANNEL_RATE.patch_dim(cfg.channels);
    let channel_kernel = lin(&mut rng, channel_in, c);
    let channel_bias = Tensor::zeros(&[1, c]);
    let t_w1 = lin(&mut rng, cfg.t_embed_dim, d);
    let t_b1 = Tensor::zeros(&[1, d]);
    let t_w2 = lin(&mut rng, d, d);
    let t_b2 = Tensor::zeros(&[1, d]);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        blocks.push(BlockParams {
            ada_w: Tensor::zeros(&[d, 4 * d]),
            ada_b: Tensor::zeros(&[1, 4 * d]),
            wq: lin(&mut rng, d, d),
            wk: lin(&mut rng, d, d),
            wv: lin(&mut rng, d, d),
            wo: lin(&mut rng, d, d).scale(0.5),
            cq: lin(&mut rng, d, d),
            ck: lin(&mut rng, cfg.d_text, d),
            cv: lin(&mut rng, cfg.d_text, d),
            co: lin(&mut rng, d, d).scale(0.5),
            fusion: FusionParams {
                fc_down: lin(&mut rng, d, c),
                wq: lin(&mut rng, c, c),
                wk: lin(&mut rng, c, c),
                wv: lin(&mut rng, c, c),
                wo: lin(&mut rng, c, c),
                fc_up: Tensor::zeros(&[c, d]),
            },
            w1: lin(&mut rng, d, hidden),
            b1: Tensor::zeros(&[1, hidden]),
            w2: lin(&mut rng, hidden, d).scale(0.5),
            b2: Tensor::zeros(&[1, d]),
        });
    }
    let out_w = pinv(&patch_kernel, PINV_RCOND)?;
    let out_b = matmul(&patch_bias, &out_w)?.scale(-1.0);
    Ok(DitParams {
        patch_kernel,
        patch_bias,
        channel_kernel,
        channel_bias,
        t_w1,
        t_b1,
        t_w2,
        t_b2,
        blocks,
        out_w,
        out_b,
    })
}

/// Sinusoidal features of `1000 t`, `[1, dim]` (sines then cosines).
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// Timestep embedding `[1, d]`.
pub fn timestep_embedding<B: Backend>(
    b: &mut B,
    cfg: &DitConfig,
    p: &DitParams<B::V>,
    t: f64,
) -> B::V {
    let f = b.constant(timestep_features(t, cfg.t_embed_dim));
    let h = b.matmul(&f, &p.t_w1);
    let h = b.add_row(&h, &p.t_b1);
    let h = b.silu(&h);
    let h = b.matmul(&h, &p.t_w2);
    b.add_row(&h, &p.t_b2)
}

/// RMS-normalizes every row; predicted rows (from `hist` on) additionally
/// get `· (1 + scale) + shift`.
fn modulate<B: Backend>(b: &mut B, x: &B::V, hist: usize, shift: &B::V, scale: &B::V) -> B::V {
    let (n, d) = b.shape(x);
    let norm = b.rms_norm_groups(x, d);
    let pred = if hist == 0 {
        norm.clone()
    } else {
        b.slice_rows(&norm, hist, n)
    };
    let gain = b.add_scalar(scale, 1.0);
    let pred = b.mul_row(&pred, &gain);
    let pred = b.add_row(&pred, shift);
    if hist == 0 {
        pred
    } else {
        let h = b.slice_rows(&norm, 0, hist);
        b.concat_rows(&[h, pred])
    }
}

/// One block over `tokens` `[N, d]` whose last `n_pred` rows are predicted.
/// `z_linear = None` skips the fusion stage entirely.
#[allow(clippy::too_many_arguments)]
pub fn dit_block_forward<B: Backend>(
    b: &mut B,
    cfg: &DitConfig,
    tokens: &B::V,
    n_pred: usize,
    text: &B::V,
    z_linear: Option<&B::V>,
    temb: &B::V,
    p: &BlockParams<B::V>,
) -> B::V {
    let (n, d) = b.shape(tokens);
    let hist = n - n_pred;
    let hd = cfg.head_dim();
    let mods = b.matmul(temb, &p.ada_w);
    let mods = b.add_row(&mods, &p.ada_b);
    let shift1 = b.slice_cols(&mods, 0, d);
    let scale1 = b.slice_cols(&mods, d, 2 * d);
    let shift2 = b.slice_cols(&mods, 2 * d, 3 * d);
    let scale2 = b.slice_cols(&mods, 3 * d, 4 * d);

    let a = modulate(b, tokens, hist, &shift1, &scale1);
    let q = b.matmul(&a, &p.wq);
    let k = b.matmul(&a, &p.wk);
    let v = b.matmul(&a, &p.wv);
    let q = b.rms_norm_groups(&q, hd);
    let k = b.rms_norm_groups(&k, hd);
    let positions: Vec<usize> = (0..n).collect();
    let q = b.rope(&q, &positions, hd);
    let k = b.rope(&k, &positions, hd);
    let o = b.sdpa(&q, &k, &v, cfg.n_heads);
    let o = b.matmul(&o, &p.wo);
    let mut x = b.add(tokens, &o);

    if b.shape(text).0 > 0 {
        let c = b.rms_norm_groups(&x, d);
        let q = b.matmul(&c, &p.cq);
        let k = b.matmul(text, &p.ck);
        let v = b.matmul(text, &p.cv);
        let o = b.sdpa(&q, &k, &v, cfg.n_heads);
        let o = b.matmul(&o, &p.co);
        x = b.add(&x, &o);
    }

    if let Some(zl) = z_linear {
        let pred = if hist == 0 {
            x.clone()
        } else {
            b.slice_rows(&x, hist, n)
        };
        let fused = fuse_predicted(b, &pred, zl, &p.fusion, cfg.n_heads);
        x = if hist == 0 {
            fused
        } else {
            let h = b.slice_rows(&x, 0, hist);
            b.concat_rows(&[h, fused])
        };
    }

    let m = modulate(b, &x, hist, &shift2, &scale2);
    let m = b.matmul(&m, &p.w1);
    let m = b.add_row(&m, &p.b1);
    let m = b.silu(&m);
    let m = b.matmul(&m, &p.w2);
    let m = b.add_row(&m, &p.b2);
    b.add(&x, &m)
}

/// Velocity prediction in patch space, `[N_l, C·4]`, from the noisy chunk's
/// `(1,2,2)` patches `[N_l, C·4]`. Context and text enter as constants.
pub fn forward_patches<B: Backend>(
    b: &mut B,
    cfg: &DitConfig,
    p: &DitParams<B::V>,
    patches: &B::V,
    t: f64,
    text: &Tensor,
    ctx: &CompressedContext,
) -> B::V {
    let (n_pred, _) = b.shape(patches);
    let temb = timestep_embedding(b, cfg, p, t);
    let pred = b.matmul(patches, &p.patch_kernel);
    let pred = b.add_row(&pred, &p.patch_bias);
    let hist = ctx.spatial_tokens.len();
    let mut x = if hist == 0 {
        pred
    } else {
        let h = b.constant(ctx.spatial_tokens.tokens.clone());
        b.concat_rows(&[h, pred])
    };
    let text = b.constant(text.clone());
    let zl = b.constant(ctx.channel_tokens.clone());
    for bp in &p.blocks {
        x = dit_block_forward(b, cfg, &x, n_pred, &text, Some(&zl), &temb, bp);
    }
    let n = hist + n_pred;
    let tail = if hist == 0 {
        x
    } else {
        b.slice_rows(&x, hist, n)
    };
    let out = b.matmul(&tail, &p.out_w);
    b.add_row(&out, &p.out_b)
}

fn check_inputs(
    cfg: &DitConfig,
    noisy: &Tensor,
    t: f64,
    text: &Tensor,
    ctx: &CompressedContext,
) -> Result<()> {
    let (c, f, h, w) = cfg.chunk_dims();
    if noisy.shape() != [c, f, h, w] {
        return shape_err(format!(
            "chunk {:?}, model expects {:?}",
            noisy.shape(),
            [c, f, h, w]
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("timestep {t} outside [0, 1]"));
    }
    if text.ndim() != 2 || text.cols() != cfg.d_text {
        return shape_err(format!(
            "text {:?}, expected [L, {}]",
            text.shape(),
            cfg.d_text
        ));
    }
    if ctx.spatial_tokens.tokens.cols() != cfg.d_model {
        return shape_err(format!(
            "context tokens are {} wide, model is {}",
            ctx.spatial_tokens.tokens.cols(),
            cfg.d_model
        ));
    }
    if ctx.channel_tokens.ndim() != 2 || ctx.channel_tokens.cols() != CHANNEL_DIM {
        return shape_err(format!(
            "channel tokens {:?}, expected [M, {CHANNEL_DIM}]",
            ctx.channel_tokens.shape()
        ));
    }
    Ok(())
}

/// Velocity field with the shape of the predicted chunk.
pub fn model_forward(
    cfg: &DitConfig,
    params: &DitParams<Tensor>,
    noisy: &VideoLatent,
    t: f64,
    text: &Tensor,
    ctx: &CompressedContext,
) -> Result<Tensor> {
    check_inputs(cfg, noisy.data(), t, text, ctx)?;
    let patches = extract_patches(noisy.data(), PatchRate::BASE)?;
    let v = forward_patches(&mut Eval, cfg, params, &patches, t, text, ctx);
    fold_patches(&v, cfg.chunk_dims(), PatchRate::BASE)
}

/// Configuration and parameters together, with checkpoint IO.
#[derive(Clone, Debug, PartialEq)]
pub struct DitModel {
    pub cfg: DitConfig,
    pub params: DitParams<Tensor>,
}

impl DitModel {
    pub fn init(cfg: DitConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn forward(
        &self,
        noisy: &VideoLatent,
        t: f64,
        text: &Tensor,
        ctx: &CompressedContext,
    ) -> Result<Tensor> {
        model_forward(&self.cfg, &self.params, noisy, t, text, ctx)
    }

    pub fn patch_weights(&self) -> Result<PatchWeights> {
        PatchWeights::new(
            PatchRate::BASE,
            self.cfg.channels,
            self.params.patch_kernel.clone(),
            self.params.patch_bias.clone(),
        )
    }

    pub fn weight_bank(&self, sched: &LadderSchedule) -> Result<HashMap<PatchRate, PatchWeights>> {
        weights_for_schedule(&self.patch_weights()?, sched)
    }

    pub fn channel_branch(&self) -> Result<ChannelBranchConfig> {
        ChannelBranchConfig::new(PatchWeights::new(
            CHANNEL_RATE,
            self.cfg.channels,
            self.params.channel_kernel.clone(),
            self.params.channel_bias.clone(),
        )?)
    }

    pub fn empty_context(&self) -> CompressedContext {
        CompressedContext::empty(self.cfg.d_model, CHANNEL_DIM)
    }

    /// Context from `history` for the given frame assignment, embedded with
    /// this model's patch weights.
    pub fn context(
        &self,
        history: &VideoLatent,
        frames: &[FrameAssignment],
        sched: &LadderSchedule,
        channel: bool,
    ) -> Result<CompressedContext> {
        let bank = self.weight_bank(sched)?;
        let branch = if channel {
            Some(self.channel_branch()?)
        } else {
            None
        };
        build_context(history, frames, &bank, branch.as_ref())
    }

    /// Writes `config.json` and one YTF file per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&self.cfg)?,
        )?;
        let mut res = Ok(());
        self.params.visit(|name, t| {
            if res.is_ok() {
                res = write_ytf(t, dir.join(format!("{name}.ytf")));
            }
        });
        res
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = DitConfig::load(dir.join("config.json"))?;
        let template = init_params(&cfg, 0)?;
        let mut values = Vec::new();
        let mut res = Ok(());
        template.visit(|name, t| {
            if res.is_err() {
                return;
            }
            match read_ytf(dir.join(format!("{name}.ytf"))) {
                Ok(v) if v.shape() == t.shape() => values.push(v),
                Ok(v) => {
                    res = shape_err(format!(
                        "checkpoint tensor {name} is {:?}, config implies {:?}",
                        v.shape(),
                        t.shape()
                    ))
                }
                Err(e) => res = Err(e),
            }
        });
        res?;
        Ok(Self {
            params: template.with_values(values),
            cfg,
        })
    }
}

/// Anything that predicts a velocity for a chunk and can embed history.
pub trait VelocityModel {
    fn config(&self) -> &DitConfig;

    fn velocity(
        &self,
        noisy: &VideoLatent,
        t: f64,
        text: &Tensor,
        ctx: &CompressedContext,
    ) -> Result<Tensor>;

    fn context(
        &self,
        history: &VideoLatent,
        frames: &[FrameAssignment],
        sched: &LadderSchedule,
        channel: bool,
    ) -> Result<CompressedContext>;
}

impl VelocityModel for DitModel {
    fn config(&self) -> &DitConfig {
        &self.cfg
    }

    fn velocity(
        &self,
        noisy: &VideoLatent,
        t: f64,
        text: &Tensor,
        ctx: &CompressedContext,
    ) -> Result<Tensor> {
        self.forward(noisy, t, text, ctx)
    }

    fn context(
        &self,
        history: &VideoLatent,
        frames: &[FrameAssignment],
        sched: &LadderSchedule,
        channel: bool,
    ) -> Result<CompressedContext> {
        DitModel::context(self, history, frames, sched, channel)
    }
}
