//! Rectified-flow training, DMD distillation and self-forcing rollouts.
//!
//! Conventions: `x_t = (1 − t)·x0 + t·ε`, velocity target `ε − x0`,
//! `α_t = 1 − t`, `σ_t = t`, and `x̂0 = x_t − t·v`. Sampling integrates
//! from `t = 1` down to `0` with explicit Euler steps of size `1/steps`.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{CameraToken, HumanToken};
use crate::autograd::{Backend, Eval, Graph};
use crate::dit::{forward_patches, DitConfig, DitModel, DitParams, VelocityModel};
use crate::error::{invalid, shape_err, Result};
use crate::latent::{mask_fuse, VideoLatent};
use crate::patchify::{extract_patches, fold_patches, PatchRate};
use crate::tensor::Tensor;
use crate::text::{build_with_event, ActionEmbeddingCache};
use crate::tscm::{assign_ladder_buckets, CompressedContext, LadderSchedule};

pub const DMD_T_MIN: f64 = 0.02;
pub const DMD_T_MAX: f64 = 0.98;
pub const FAKE_UPDATES_PER_GENERATOR_UPDATE: usize = 5;
pub const FEW_STEPS: usize = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// schedule

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    T2V,
    I2V,
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskTag::T2V => "t2v",
            TaskTag::I2V => "i2v",
        })
    }
}

/// Even steps train text-to-video, odd steps image-to-video.
pub fn alternating_schedule(step: u64) -> TaskTag {
    if step.is_multiple_of(2) {
        TaskTag::T2V
    } else {
        TaskTag::I2V
    }
}

/// Condition mask for a chunk: zero for T2V, the first frame for I2V.
pub fn task_mask(tag: TaskTag, frames: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[1, frames, h, w], |i| match tag {
        TaskTag::I2V if i < plane => 1.0,
        _ => 0.0,
    })
}

/// Linear rectified-flow schedule with descending sampling times.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: Vec<f64>,
}

impl DiffusionSchedule {
    /// `steps = [1, 1 − 1/n, …, 1/n]`.
    pub fn rectified_flow(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("schedule needs at least one step");
        }
        Ok(Self {
            steps: (0..n).map(|k| 1.0 - k as f64 / n as f64).collect(),
        })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("timestep {t} outside [0, 1]"));
    }
    Ok(())
}

pub fn rf_interpolate(x0: &Tensor, noise: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    let mut out = x0.scale(1.0 - t);
    out.axpy(t, noise)?;
    Ok(out)
}

/// `α_t·x + σ_t·noise`.
pub fn forward_diffuse(
    x: &Tensor,
    t: f64,
    noise: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    check_t(t)?;
    let mut out = x.scale(sched.alpha(t));
    out.axpy(sched.sigma(t), noise)?;
    Ok(out)
}

/// `−(z_t − α_t·x̂0) / σ_t²`.
pub fn score_from_pred(
    z_t: &Tensor,
    x0_hat: &Tensor,
    t: f64,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let s = sched.sigma(t);
    if s == 0.0 {
        return invalid("score undefined where sigma is zero");
    }
    let mut r = z_t.clone();
    r.axpy(-sched.alpha(t), x0_hat)?;
    Ok(r.scale(-1.0 / (s * s)))
}

/// `x̂0 = z_t − t·v`.
pub fn x0_from_velocity(z_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    let mut out = z_t.clone();
    out.axpy(-t, v)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSampler {
    pub lo: f64,
    pub hi: f64,
}

impl TimeSampler {
    pub const FULL: TimeSampler = TimeSampler { lo: 0.0, hi: 1.0 };
    pub const DMD: TimeSampler = TimeSampler {
        lo: DMD_T_MIN,
        hi: DMD_T_MAX,
    };

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.random::<f64>()
    }
}

// ---------------------------------------------------------------------------
// rectified-flow loss

/// One chunk-level training batch sharing text and context.
#[derive(Clone, Copy, Debug)]
pub struct FlowBatch<'a> {
    pub x0: &'a [Tensor],
    /// `[1, f, h, w]` condition mask; masked frames are fed clean and
    /// excluded from the loss.
    pub mask: Option<&'a Tensor>,
    pub text: &'a Tensor,
    pub ctx: &'a CompressedContext,
}

struct Draw {
    input: Tensor,
    target: Tensor,
    weight: Option<Tensor>,
    t: f64,
}

fn broadcast_mask(mask: &Tensor, channels: usize) -> Tensor {
    let mut data = Vec::with_capacity(mask.numel() * channels);
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    let s = mask.shape();
    Tensor::new(vec![channels, s[1], s[2], s[3]], data).expect("mask shape")
}

/// Noise and time for sample `i` come from stream `i` of `seed`.
fn draw(
    x0: &Tensor,
    mask: Option<&Tensor>,
    i: usize,
    sampler: TimeSampler,
    seed: u64,
) -> Result<Draw> {
    let mut rng = rng_for(seed, i as u64);
    let t = sampler.sample(&mut rng);
    let noise = Tensor::randn(x0.shape(), 1.0, &mut rng);
    let xt = rf_interpolate(x0, &noise, t)?;
    let target = noise.sub(x0)?;
    let (input, weight) = match mask {
        Some(m) => {
            let fused = mask_fuse(&xt, x0, m)?.into_data();
            let keep = broadcast_mask(m, x0.shape()[0]).map(|v| 1.0 - v);
            (fused, Some(keep))
        }
        None => (xt, None),
    };
    Ok(Draw {
        input,
        target,
        weight,
        t,
    })
}

fn check_batch(cfg: &DitConfig, batch: &FlowBatch) -> Result<()> {
    if batch.x0.is_empty() {
        return invalid("empty batch");
    }
    let (c, f, h, w) = cfg.chunk_dims();
    for x in batch.x0 {
        if x.shape() != [c, f, h, w] {
            return shape_err(format!(
                "sample {:?}, model expects {:?}",
                x.shape(),
                [c, f, h, w]
            ));
        }
    }
    Ok(())
}

/// `mean_b ‖w ⊙ (v − (ε − x0))‖²` for any velocity function.
pub fn rf_loss_value(
    mut velocity: impl FnMut(&VideoLatent, f64) -> Result<Tensor>,
    batch: &FlowBatch,
    sampler: TimeSampler,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, x0) in batch.x0.iter().enumerate() {
        let d = draw(x0, batch.mask, i, sampler, seed)?;
        let v = velocity(&VideoLatent::unmasked(d.input)?, d.t)?;
        let mut r = v.sub(&d.target)?;
        if let Some(w) = &d.weight {
            r = r.mul(w)?;
        }
        total += r.sum_sq();
    }
    Ok(total / batch.x0.len() as f64)
}

/// Loss and parameter gradients; samples are differentiated one at a time
/// and reduced in batch order.
pub fn rf_loss(
    model: &DitModel,
    batch: &FlowBatch,
    sampler: TimeSampler,
    seed: u64,
) -> Result<(f64, DitParams<Tensor>)> {
    rf_loss_streams(model, batch, sampler, seed, 0)
}

/// As [`rf_loss`], drawing sample `i` from stream `first_stream + i`.
fn rf_loss_streams(
    model: &DitModel,
    batch: &FlowBatch,
    sampler: TimeSampler,
    seed: u64,
    first_stream: usize,
) -> Result<(f64, DitParams<Tensor>)> {
    check_batch(&model.cfg, batch)?;
    let n = batch.x0.len() as f64;
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    for (i, x0) in batch.x0.iter().enumerate() {
        let d = draw(x0, batch.mask, first_stream + i, sampler, seed)?;
        let patches = extract_patches(&d.input, PatchRate::BASE)?;
        let target = extract_patches(&d.target, PatchRate::BASE)?;
        let mut g = Graph::new();
        let vars = model.params.leaves(&mut g);
        let pv = g.constant(patches);
        let out = forward_patches(&mut g, &model.cfg, &vars, &pv, d.t, batch.text, batch.ctx);
        let tv = g.constant(target);
        let mut r = g.sub(&out, &tv);
        if let Some(w) = d.weight {
            let wv = g.constant(extract_patches(&w, PatchRate::BASE)?);
            r = g.mul(&r, &wv);
        }
        let sq = g.sum_sq(&r);
        let loss = g.scale(&sq, 1.0 / n);
        total += g.value(&loss).data()[0];
        grads.axpy(1.0, &vars.gradients(&g.backward(loss)))?;
    }
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DitParams<Tensor>,
    v: DitParams<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &DitParams<Tensor>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one update and returns the norm of the parameter change.
    pub fn step(&mut self, params: &mut DitParams<Tensor>, grads: &DitParams<Tensor>) -> f64 {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g = grads.flatten();
        let mut m: Vec<Tensor> = self.m.flatten().into_iter().cloned().collect();
        let mut v: Vec<Tensor> = self.v.flatten().into_iter().cloned().collect();
        let mut p: Vec<Tensor> = params.flatten().into_iter().cloned().collect();
        let mut moved = 0.0;
        for k in 0..p.len() {
            let gd = g[k].data();
            let (md, vd, pd) = (m[k].data_mut(), v[k].data_mut(), p[k].data_mut());
            for i in 0..gd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let step = self.lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
                pd[i] -= step;
                moved += step * step;
            }
        }
        self.m = self.m.with_values(m);
        self.v = self.v.with_values(v);
        *params = params.with_values(p);
        moved.sqrt()
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Alternate T2V / I2V steps; otherwise every step is T2V.
    pub alternate: bool,
    /// Reuse the same noise and timesteps every step.
    pub pin_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-4,
            seed: 0,
            alternate: true,
            pin_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub task_tag: TaskTag,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Full-batch rectified-flow training of `model` on `data`.
pub fn train_rf(
    model: &mut DitModel,
    data: &[Tensor],
    text: &Tensor,
    ctx: &CompressedContext,
    tc: &TrainConfig,
) -> Result<Vec<LogRow>> {
    let cfg = model.cfg.clone();
    let mut opt = Adam::new(&model.params, tc.lr);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let start = Instant::now();
        let tag = if tc.alternate {
            alternating_schedule(step as u64)
        } else {
            TaskTag::T2V
        };
        let mask = task_mask(tag, cfg.chunk_frames, cfg.height, cfg.width);
        let batch = FlowBatch {
            x0: data,
            mask: (tag == TaskTag::I2V).then_some(&mask),
            text,
            ctx,
        };
        let seed = if tc.pin_noise {
            tc.seed
        } else {
            tc.seed.wrapping_add(step as u64 + 1)
        };
        let (loss, grads) = rf_loss(model, &batch, TimeSampler::FULL, seed)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(crate::Error::NonFinite("rectified-flow training"));
        }
        opt.step(&mut model.params, &grads);
        log.push(LogRow {
            step,
            task_tag: tag,
            loss,
            grad_norm: grads.norm(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// `n` unit-variance Gaussian chunks.
pub fn synthetic_dataset(cfg: &DitConfig, n: usize, seed: u64) -> Vec<Tensor> {
    let (c, f, h, w) = cfg.chunk_dims();
    (0..n)
        .map(|i| Tensor::randn(&[c, f, h, w], 1.0, &mut rng_for(seed, i as u64)))
        .collect()
}

/// Two-mode distribution `±μ + spread·ξ` with a fixed random pattern `μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoModeData {
    pub mean: Tensor,
    pub spread: f64,
}

impl TwoModeData {
    pub fn new(cfg: &DitConfig, spread: f64, seed: u64) -> Self {
        let (c, f, h, w) = cfg.chunk_dims();
        Self {
            mean: Tensor::randn(&[c, f, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)),
            spread,
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut x = Tensor::randn(self.mean.shape(), self.spread, &mut rng);
                x.axpy(sign, &self.mean).expect("same shape");
                x
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// sampling

/// Euler integration from `noise` at `t = 1` to `t = 0`.
pub fn euler_sample(
    model: &impl VelocityModel,
    noise: &Tensor,
    steps: usize,
    text: &Tensor,
    ctx: &CompressedContext,
) -> Result<Tensor> {
    let sched = DiffusionSchedule::rectified_flow(steps)?;
    let dt = 1.0 / steps as f64;
    let mut z = noise.clone();
    for &t in &sched.steps {
        let v = model.velocity(&VideoLatent::unmasked(z.clone())?, t, text, ctx)?;
        z.axpy(-dt, &v)?;
    }
    Ok(z)
}

/// Euler sampling in patch space whose final step is recorded on `b`;
/// earlier steps run eagerly on `values` (which must hold the values of
/// `params`).
#[allow(clippy::too_many_arguments)]
fn sample_last_step<B: Backend>(
    b: &mut B,
    cfg: &DitConfig,
    params: &DitParams<B::V>,
    values: &DitParams<Tensor>,
    noise: &Tensor,
    steps: usize,
    text: &Tensor,
    ctx: &CompressedContext,
) -> Result<B::V> {
    let sched = DiffusionSchedule::rectified_flow(steps)?;
    let dt = 1.0 / steps as f64;
    let mut z = extract_patches(noise, PatchRate::BASE)?;
    for &t in &sched.steps[..steps - 1] {
        let v = forward_patches(&mut Eval, cfg, values, &z, t, text, ctx);
        z.axpy(-dt, &v)?;
    }
    let t_last = sched.steps[steps - 1];
    let zc = b.constant(z);
    let v = forward_patches(b, cfg, params, &zc, t_last, text, ctx);
    let step = b.scale(&v, -dt);
    Ok(b.add(&zc, &step))
}

// ---------------------------------------------------------------------------
// self-forcing rollouts

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSpec {
    /// Event embedding shared by every chunk.
    pub event_part: Tensor,
    /// One action per chunk; the last one repeats if the list is short.
    pub actions: Vec<(HumanToken, CameraToken)>,
    pub n_chunks: usize,
    pub few_steps: usize,
    pub sched: LadderSchedule,
    pub channel: bool,
    pub seed: u64,
}

impl RolloutSpec {
    pub fn action(&self, i: usize) -> (HumanToken, CameraToken) {
        self.actions
            .get(i)
            .or(self.actions.last())
            .copied()
            .unwrap_or((HumanToken::None, CameraToken::Still))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrace {
    pub chunks: Vec<Tensor>,
    pub contexts: Vec<CompressedContext>,
    pub texts: Vec<Tensor>,
    /// Whether the context of each chunk was cut from the gradient tape.
    pub barriers: Vec<bool>,
}

/// Value of `v` with its gradient path cut.
pub fn gradient_barrier<B: Backend>(b: &mut B, v: &B::V) -> Tensor {
    let cut = b.detach(v);
    b.value(&cut).clone()
}

/// Noise for chunk `i` of a rollout.
pub fn chunk_noise(cfg: &DitConfig, seed: u64, i: usize) -> Tensor {
    let (c, f, h, w) = cfg.chunk_dims();
    Tensor::randn(
        &[c, f, h, w],
        1.0,
        &mut rng_for(seed, (1u64 << 32) + i as u64),
    )
}

/// Chunk `i`'s context from `history` (frames already generated).
pub fn rollout_context(
    model: &DitModel,
    history: Option<&VideoLatent>,
    spec: &RolloutSpec,
) -> Result<CompressedContext> {
    match history {
        None => Ok(model.empty_context()),
        Some(h) => {
            let frames = assign_ladder_buckets(h.frames(), &spec.sched, spec.seed);
            model.context(h, &frames, &spec.sched, spec.channel)
        }
    }
}

/// Generates `spec.n_chunks` chunks on backend `b`. Each chunk's last
/// denoising step is recorded on `b` and returned in patch space; contexts
/// are built from values taken through [`gradient_barrier`].
pub fn rollout_with<B: Backend>(
    b: &mut B,
    model: &DitModel,
    params: &DitParams<B::V>,
    init: Option<&VideoLatent>,
    spec: &RolloutSpec,
    cache: &mut ActionEmbeddingCache,
) -> Result<(Vec<B::V>, RolloutTrace)> {
    if spec.n_chunks == 0 || spec.few_steps == 0 {
        return invalid("rollout needs at least one chunk and one step");
    }
    let cfg = &model.cfg;
    let mut history = init.cloned();
    let mut outs = Vec::with_capacity(spec.n_chunks);
    let mut trace = RolloutTrace {
        chunks: Vec::new(),
        contexts: Vec::new(),
        texts: Vec::new(),
        barriers: Vec::new(),
    };
    for i in 0..spec.n_chunks {
        let ctx = rollout_context(model, history.as_ref(), spec)?;
        let text = build_with_event(spec.event_part.clone(), &[spec.action(i)], cache)?.combined;
        let noise = chunk_noise(cfg, spec.seed, i);
        let x = sample_last_step(
            b,
            cfg,
            params,
            &model.params,
            &noise,
            spec.few_steps,
            &text,
            &ctx,
        )?;
        let value = fold_patches(&gradient_barrier(b, &x), cfg.chunk_dims(), PatchRate::BASE)?;
        let chunk = VideoLatent::unmasked(value.clone())?;
        history = Some(match history {
            None => chunk,
            Some(h) => VideoLatent::concat_frames(&[&h, &chunk])?,
        });
        outs.push(x);
        trace.chunks.push(value);
        trace.contexts.push(ctx);
        trace.texts.push(text);
        trace.barriers.push(true);
    }
    Ok((outs, trace))
}

pub fn self_forcing_rollout(
    model: &DitModel,
    init: Option<&VideoLatent>,
    spec: &RolloutSpec,
    cache: &mut ActionEmbeddingCache,
) -> Result<RolloutTrace> {
    Ok(rollout_with(&mut Eval, model, &model.params, init, spec, cache)?.1)
}

// ---------------------------------------------------------------------------
// distribution matching distillation

#[derive(Clone, Debug)]
pub struct ModelTriplet {
    pub generator: DitModel,
    pub fake: DitModel,
    pub real: DitModel,
}

impl ModelTriplet {
    /// All three start from `teacher`.
    pub fn from_teacher(teacher: &DitModel) -> Self {
        Self {
            generator: teacher.clone(),
            fake: teacher.clone(),
            real: teacher.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator.cfg != self.fake.cfg || self.generator.cfg != self.real.cfg {
            return invalid("generator, fake and real models must share a config");
        }
        Ok(())
    }
}

/// `(s_fake − s_real)·σ²/α` at `z_t`; reduces to `x̂0_fake − x̂0_real`.
pub fn dmd_direction(
    z_t: &Tensor,
    x0_fake: &Tensor,
    x0_real: &Tensor,
    t: f64,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let s_fake = score_from_pred(z_t, x0_fake, t, sched)?;
    let s_real = score_from_pred(z_t, x0_real, t, sched)?;
    let w = sched.sigma(t).powi(2) / sched.alpha(t);
    Ok(s_fake.sub(&s_real)?.scale(w))
}

#[derive(Clone, Debug)]
pub struct DmdStep {
    pub grads: DitParams<Tensor>,
    /// Detached generator outputs, one list per rollout.
    pub traces: Vec<RolloutTrace>,
    /// Mean squared norm of the per-chunk directions.
    pub direction_sq: f64,
}

/// Generator gradient of the DMD objective averaged over one rollout per
/// seed. Score models are evaluated eagerly; only the generator's final
/// denoising step of each chunk is differentiated.
pub fn dmd_generator_grad(
    triplet: &ModelTriplet,
    spec: &RolloutSpec,
    seeds: &[u64],
    sampler: TimeSampler,
    cache: &mut ActionEmbeddingCache,
) -> Result<DmdStep> {
    triplet.validate()?;
    if seeds.is_empty() {
        return invalid("no rollout seeds");
    }
    let sched = DiffusionSchedule::rectified_flow(spec.few_steps)?;
    let cfg = &triplet.generator.cfg;
    let mut grads = triplet.generator.params.zeros_like();
    let mut traces = Vec::with_capacity(seeds.len());
    let mut direction_sq = 0.0;
    let scale = 1.0 / (seeds.len() * spec.n_chunks) as f64;
    for &seed in seeds {
        let spec = RolloutSpec {
            seed,
            ..spec.clone()
        };
        let mut g = Graph::new();
        let vars = triplet.generator.params.leaves(&mut g);
        let (outs, trace) = rollout_with(&mut g, &triplet.generator, &vars, None, &spec, cache)?;
        let mut rng = rng_for(seed, 7);
        let mut root = None;
        for (i, x) in outs.iter().enumerate() {
            let xh = g.value(x).clone();
            let t = sampler.sample(&mut rng);
            let eps = Tensor::randn(xh.shape(), 1.0, &mut rng);
            let zt = forward_diffuse(&xh, t, &eps, &sched)?;
            let (text, ctx) = (&trace.texts[i], &trace.contexts[i]);
            let v_fake = forward_patches(&mut Eval, cfg, &triplet.fake.params, &zt, t, text, ctx);
            let v_real = forward_patches(&mut Eval, cfg, &triplet.real.params, &zt, t, text, ctx);
            let dir = dmd_direction(
                &zt,
                &x0_from_velocity(&zt, &v_fake, t)?,
                &x0_from_velocity(&zt, &v_real, t)?,
                t,
                &sched,
            )?;
            direction_sq += dir.sum_sq() * scale;
            // ⟨dir, x⟩ has gradient dir·∂x/∂θ
            let dv = g.constant(dir.scale(scale));
            let prod = g.mul(x, &dv);
            let rows = g.col_sum(&prod);
            let ones = g.constant(Tensor::full(&[rows_len(&g, &rows), 1], 1.0));
            let s = g.matmul(&rows, &ones);
            root = Some(match root {
                None => s,
                Some(r) => g.add(&r, &s),
            });
        }
        let root = root.expect("at least one chunk");
        grads.axpy(1.0, &vars.gradients(&g.backward(root)))?;
        traces.push(trace);
    }
    Ok(DmdStep {
        grads,
        traces,
        direction_sq,
    })
}

fn rows_len(g: &Graph, v: &crate::autograd::Var) -> usize {
    g.value(v).cols()
}

/// Generated chunks with the context and text each was produced under.
#[derive(Clone, Debug)]
pub struct GeneratedBatch {
    pub chunks: Vec<Tensor>,
    pub texts: Vec<Tensor>,
    pub contexts: Vec<CompressedContext>,
}

impl GeneratedBatch {
    pub fn from_traces(traces: &[RolloutTrace]) -> Self {
        let mut out = Self {
            chunks: Vec::new(),
            texts: Vec::new(),
            contexts: Vec::new(),
        };
        for tr in traces {
            out.chunks.extend(tr.chunks.iter().cloned());
            out.texts.extend(tr.texts.iter().cloned());
            out.contexts.extend(tr.contexts.iter().cloned());
        }
        out
    }
}

/// Rectified-flow loss and gradients of the fake model on generated data;
/// sample `i` uses the same noise stream as in [`rf_loss`].
pub fn fake_model_grad(
    fake: &DitModel,
    batch: &GeneratedBatch,
    seed: u64,
) -> Result<(f64, DitParams<Tensor>)> {
    if batch.chunks.is_empty() {
        return invalid("empty generated batch");
    }
    let n = batch.chunks.len() as f64;
    let mut loss = 0.0;
    let mut grads = fake.params.zeros_like();
    for (i, x) in batch.chunks.iter().enumerate() {
        let fb = FlowBatch {
            x0: std::slice::from_ref(x),
            mask: None,
            text: &batch.texts[i],
            ctx: &batch.contexts[i],
        };
        let (l, g) = rf_loss_streams(fake, &fb, TimeSampler::FULL, seed, i)?;
        loss += l / n;
        grads.axpy(1.0 / n, &g)?;
    }
    Ok((loss, grads))
}

/// One denoising step of the fake model on generator samples; returns the
/// loss and the norm of the parameter change.
pub fn fake_model_update(
    triplet: &mut ModelTriplet,
    opt: &mut Adam,
    batch: &GeneratedBatch,
    seed: u64,
) -> Result<(f64, f64)> {
    let (loss, grads) = fake_model_grad(&triplet.fake, batch, seed)?;
    let moved = opt.step(&mut triplet.fake.params, &grads);
    Ok((loss, moved))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub iterations: usize,
    pub fake_updates: usize,
    pub batch: usize,
    pub few_steps: usize,
    pub n_chunks: usize,
    pub lr_generator: f64,
    pub lr_fake: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            fake_updates: FAKE_UPDATES_PER_GENERATOR_UPDATE,
            batch: 4,
            few_steps: FEW_STEPS,
            n_chunks: 1,
            lr_generator: 1e-4,
            lr_fake: 1e-4,
            seed: 0,
        }
    }
}

/// Alternates `fake_updates` fake-model steps with one generator step.
/// The real model never changes.
pub fn distill(
    triplet: &mut ModelTriplet,
    spec: &RolloutSpec,
    dc: &DistillConfig,
    cache: &mut ActionEmbeddingCache,
) -> Result<Vec<LogRow>> {
    triplet.validate()?;
    let mut opt_g = Adam::new(&triplet.generator.params, dc.lr_generator);
    let mut opt_f = Adam::new(&triplet.fake.params, dc.lr_fake);
    let spec = RolloutSpec {
        few_steps: dc.few_steps,
        n_chunks: dc.n_chunks,
        ..spec.clone()
    };
    let mut log = Vec::with_capacity(dc.iterations);
    let mut counter = 0u64;
    let mut next_seeds = |n: usize| -> Vec<u64> {
        let base = dc.seed.wrapping_mul(1_000_003).wrapping_add(counter);
        counter += n as u64;
        (0..n as u64).map(|k| base.wrapping_add(k)).collect()
    };
    for it in 0..dc.iterations {
        let start = Instant::now();
        for _ in 0..dc.fake_updates {
            let traces: Result<Vec<RolloutTrace>> = next_seeds(dc.batch)
                .into_iter()
                .map(|s| {
                    let sp = RolloutSpec {
                        seed: s,
                        ..spec.clone()
                    };
                    self_forcing_rollout(&triplet.generator, None, &sp, cache)
                })
                .collect();
            let batch = GeneratedBatch::from_traces(&traces?);
            let seed = next_seeds(1)[0];
            fake_model_update(triplet, &mut opt_f, &batch, seed)?;
        }
        let step = dmd_generator_grad(
            triplet,
            &spec,
            &next_seeds(dc.batch),
            TimeSampler::DMD,
            cache,
        )?;
        if !step.grads.is_finite() {
            return Err(crate::Error::NonFinite("distillation"));
        }
        opt_g.step(&mut triplet.generator.params, &step.grads);
        log.push(LogRow {
            step: it,
            task_tag: TaskTag::T2V,
            loss: step.direction_sq,
            grad_norm: step.grads.norm(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// sample statistics

/// Biased (V-statistic) squared MMD with a Gaussian kernel of bandwidth
/// `bw`: `mean k(x,x') + mean k(y,y') − 2 mean k(x,y)`.
pub fn mmd2(xs: &[Tensor], ys: &[Tensor], bw: f64) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return invalid("mmd of an empty sample");
    }
    let k = |a: &Tensor, b: &Tensor| -> Result<f64> {
        let d = a.sub(b)?.sum_sq();
        Ok((-d / (2.0 * bw * bw)).exp())
    };
    let mean = |a: &[Tensor], b: &[Tensor]| -> Result<f64> {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += k(x, y)?;
            }
        }
        Ok(s / (a.len() * b.len()) as f64)
    };
    Ok(mean(xs, xs)? + mean(ys, ys)? - 2.0 * mean(xs, ys)?)
}

/// Median pairwise distance over the pooled samples.
pub fn median_bandwidth(samples: &[Tensor]) -> Result<f64> {
    let mut d = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            d.push(samples[i].sub(&samples[j])?.norm());
        }
    }
    if d.is_empty() {
        return invalid("need at least two samples");
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2].max(1e-12))
}
