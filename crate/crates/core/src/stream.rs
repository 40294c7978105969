//! Chunked autoregressive generation with pluggable history strategies, and
//! the per-block context-cost benchmark.
//!
//! Block indices are 1-based: block `b` is generated with `b − 1` chunks of
//! history.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::action::{parse_action_text, render_action_text, CameraToken, HumanToken};
use crate::attention::{linear_attention_madds, standard_attention_madds};
use crate::dit::{DitConfig, VelocityModel, CHANNEL_RATE};
use crate::error::{invalid, shape_err, Error, Result};
use crate::latent::VideoLatent;
use crate::patchify::{token_count, PatchRate};
use crate::tensor::{write_ytf, Tensor};
use crate::text::{build_with_event, embed_text_toy, ActionEmbeddingCache};
use crate::training::{chunk_noise, euler_sample};
use crate::tscm::{assign_ladder_buckets, FrameAssignment, LadderSchedule, CHANNEL_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContextStrategy {
    /// Every history frame at the base rate.
    FullContext,
    /// The newest `w` chunks at the base rate.
    SlidingWindow(usize),
    /// The default ladder without the channel branch.
    SpatialCompression,
    /// Ladder plus channel branch.
    Tscm(LadderSchedule),
}

impl ContextStrategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            ContextStrategy::SlidingWindow(0) => invalid("sliding window needs w >= 1"),
            ContextStrategy::Tscm(s) => s.validate(),
            _ => Ok(()),
        }
    }

    /// Schedule whose rates cover every frame this strategy emits.
    pub fn schedule(&self) -> LadderSchedule {
        match self {
            ContextStrategy::Tscm(s) => s.clone(),
            _ => LadderSchedule::default(),
        }
    }

    pub fn uses_channel(&self) -> bool {
        matches!(self, ContextStrategy::Tscm(_))
    }

    /// History frames kept for a `history_len`-frame history.
    pub fn frames(
        &self,
        history_len: usize,
        chunk_frames: usize,
        seed: u64,
    ) -> Vec<FrameAssignment> {
        let base = |start: usize| {
            (start..history_len)
                .map(|frame| FrameAssignment {
                    frame,
                    age: history_len - frame,
                    rate: PatchRate::BASE,
                })
                .collect()
        };
        match self {
            ContextStrategy::FullContext => base(0),
            ContextStrategy::SlidingWindow(w) => base(history_len.saturating_sub(w * chunk_frames)),
            ContextStrategy::SpatialCompression => {
                assign_ladder_buckets(history_len, &LadderSchedule::default(), seed)
            }
            ContextStrategy::Tscm(s) => assign_ladder_buckets(history_len, s, seed),
        }
    }

    /// Spatial context tokens for a `history_len`-frame history.
    pub fn context_tokens(&self, cfg: &DitConfig, history_len: usize, seed: u64) -> usize {
        self.frames(history_len, cfg.chunk_frames, seed)
            .iter()
            .map(|fa| token_count(1, cfg.height, cfg.width, fa.rate))
            .sum()
    }

    /// Channel-branch tokens for a `history_len`-frame history.
    pub fn channel_tokens(&self, cfg: &DitConfig, history_len: usize, seed: u64) -> usize {
        if !self.uses_channel() {
            return 0;
        }
        let k = self.frames(history_len, cfg.chunk_frames, seed).len();
        if k == 0 {
            return 0;
        }
        let frames = k.div_ceil(CHANNEL_RATE.pt) * CHANNEL_RATE.pt;
        token_count(frames, cfg.height, cfg.width, CHANNEL_RATE)
    }

    /// Last block index before the token count stops changing, if it ever
    /// does: `w` for a sliding window, and for ladders the number of chunks
    /// needed to fill the window plus the initial frame. Ladder counts stay
    /// flat until the first complete temporal-sampling stratum.
    pub fn saturation_block(&self, chunk_frames: usize) -> Option<usize> {
        match self {
            ContextStrategy::FullContext => None,
            ContextStrategy::SlidingWindow(w) => Some(*w),
            ContextStrategy::SpatialCompression => {
                Some((LadderSchedule::default().window + 1).div_ceil(chunk_frames))
            }
            ContextStrategy::Tscm(s) => Some((s.window + 1).div_ceil(chunk_frames)),
        }
    }
}

impl fmt::Display for ContextStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextStrategy::FullContext => f.write_str("full"),
            ContextStrategy::SlidingWindow(w) => write!(f, "window:{w}"),
            ContextStrategy::SpatialCompression => f.write_str("spatial"),
            ContextStrategy::Tscm(_) => f.write_str("tscm"),
        }
    }
}

/// `full`, `window:<w>`, `spatial` or `tscm` (default ladder).
impl FromStr for ContextStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let out = match s {
            "full" => ContextStrategy::FullContext,
            "spatial" => ContextStrategy::SpatialCompression,
            "tscm" => ContextStrategy::Tscm(LadderSchedule::default()),
            _ => match s.strip_prefix("window:") {
                Some(w) => ContextStrategy::SlidingWindow(
                    w.parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad window size in {s:?}")))?,
                ),
                None => return invalid(format!("unknown context strategy {s:?}")),
            },
        };
        out.validate()?;
        Ok(out)
    }
}

/// Modeled multiply-adds of one forward pass: full softmax attention over
/// context plus predicted tokens in every block, and for the channel
/// branch a linear-attention pass over channel plus predicted tokens.
pub fn attn_cost_model(
    cfg: &DitConfig,
    context_tokens: usize,
    channel_tokens: Option<usize>,
) -> u64 {
    let n_pred = cfg.chunk_tokens();
    let mut per_block = standard_attention_madds(context_tokens + n_pred, cfg.d_model);
    if let Some(m) = channel_tokens {
        per_block += linear_attention_madds(m + n_pred, CHANNEL_DIM, cfg.n_heads);
    }
    cfg.depth as u64 * per_block
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub strategy: String,
    pub block_index: usize,
    pub context_tokens: usize,
    pub attn_madds: u64,
    pub wall_ms: f64,
}

pub const BENCH_HEADER: &str = "strategy,block_index,context_tokens,attn_madds,wall_ms";

pub fn write_bench_csv<W: Write>(records: &[BenchRecord], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv(text: &str) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ActionLine {
    Text {
        text: String,
    },
    Tokens {
        human: HumanToken,
        camera: CameraToken,
    },
}

/// One action per non-empty JSONL line, either `{"text": ...}` or
/// `{"human": ..., "camera": ...}`.
pub fn parse_action_script(jsonl: &str) -> Result<Vec<(HumanToken, CameraToken)>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match serde_json::from_str::<ActionLine>(l)? {
            ActionLine::Text { text } => parse_action_text(&text),
            ActionLine::Tokens { human, camera } => Ok((human, camera)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub human: HumanToken,
    pub camera: CameraToken,
    pub text: String,
}

/// `session.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub seed: u64,
    pub strategy: String,
    pub strategy_spec: ContextStrategy,
    pub event: String,
    pub steps: usize,
    pub actions: Vec<ActionEntry>,
    pub chunks: Vec<String>,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// A streaming generation run. Chunk `i` is denoised from
/// `chunk_noise(seed, i)` against the context of everything before it.
pub struct GenerationSession<'m, M: VelocityModel> {
    model: &'m M,
    pub strategy: ContextStrategy,
    pub seed: u64,
    pub event: String,
    event_part: Tensor,
    cache: ActionEmbeddingCache,
    history: Option<VideoLatent>,
    init_frames: usize,
    pub chunks: Vec<Tensor>,
    pub actions: Vec<(HumanToken, CameraToken)>,
    pub records: Vec<BenchRecord>,
    pub steps: Vec<usize>,
}

impl<'m, M: VelocityModel> GenerationSession<'m, M> {
    /// `init` frames, if any, seed the history.
    pub fn new(
        model: &'m M,
        strategy: ContextStrategy,
        event: &str,
        init: Option<VideoLatent>,
        seed: u64,
    ) -> Result<Self> {
        strategy.validate()?;
        let cfg = model.config();
        if let Some(init) = &init {
            if (init.channels(), init.height(), init.width())
                != (cfg.channels, cfg.height, cfg.width)
            {
                return shape_err(format!(
                    "init latent is {}x{}x{}, model expects {}x{}x{}",
                    init.channels(),
                    init.height(),
                    init.width(),
                    cfg.channels,
                    cfg.height,
                    cfg.width
                ));
            }
        }
        Ok(Self {
            model,
            strategy,
            seed,
            event: event.to_string(),
            event_part: embed_text_toy(event, cfg.d_text, cfg.event_len),
            cache: ActionEmbeddingCache::new(cfg.d_text, cfg.action_len),
            init_frames: init.as_ref().map_or(0, |v| v.frames()),
            history: init,
            chunks: Vec::new(),
            actions: Vec::new(),
            records: Vec::new(),
            steps: Vec::new(),
        })
    }

    pub fn cache(&self) -> &ActionEmbeddingCache {
        &self.cache
    }

    /// Every frame so far, init frames included.
    pub fn history(&self) -> Option<&VideoLatent> {
        self.history.as_ref()
    }

    pub fn history_len(&self) -> usize {
        self.history.as_ref().map_or(0, |h| h.frames())
    }

    pub fn generate_chunk(
        &mut self,
        action: (HumanToken, CameraToken),
        steps: usize,
    ) -> Result<Tensor> {
        let start = Instant::now();
        let cfg = self.model.config().clone();
        let i = self.chunks.len();
        let seed = self.seed.wrapping_add(i as u64);
        let ctx = match &self.history {
            None => crate::tscm::CompressedContext::empty(cfg.d_model, CHANNEL_DIM),
            Some(h) => {
                let frames = self.strategy.frames(h.frames(), cfg.chunk_frames, seed);
                self.model.context(
                    h,
                    &frames,
                    &self.strategy.schedule(),
                    self.strategy.uses_channel(),
                )?
            }
        };
        let text = build_with_event(self.event_part.clone(), &[action], &mut self.cache)?.combined;
        let chunk = euler_sample(
            self.model,
            &chunk_noise(&cfg, self.seed, i),
            steps,
            &text,
            &ctx,
        )?;
        let latent = VideoLatent::unmasked(chunk.clone())?;
        self.history = Some(match self.history.take() {
            None => latent,
            Some(h) => VideoLatent::concat_frames(&[&h, &latent])?,
        });
        let channel = self
            .strategy
            .uses_channel()
            .then(|| ctx.channel_tokens.rows());
        let context_tokens = ctx.spatial_tokens.len();
        self.records.push(BenchRecord {
            strategy: self.strategy.to_string(),
            block_index: i + 1,
            context_tokens,
            attn_madds: attn_cost_model(&cfg, context_tokens, channel),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        self.chunks.push(chunk.clone());
        self.actions.push(action);
        self.steps.push(steps);
        Ok(chunk)
    }

    /// Generates `n_chunks` chunks; action `i` comes from `script`, holding
    /// the last entry once the script runs out.
    pub fn run(
        &mut self,
        script: &[(HumanToken, CameraToken)],
        n_chunks: usize,
        steps: usize,
    ) -> Result<()> {
        if n_chunks == 0 {
            return invalid("a session needs at least one chunk");
        }
        for i in 0..n_chunks {
            let action = script
                .get(i)
                .or(script.last())
                .copied()
                .unwrap_or((HumanToken::None, CameraToken::Still));
            self.generate_chunk(action, steps)?;
        }
        Ok(())
    }

    /// Writes `chunk_NNN.ytf` per chunk and `session.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SessionManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut chunks = Vec::with_capacity(self.chunks.len());
        for (i, c) in self.chunks.iter().enumerate() {
            let name = format!("chunk_{i:03}.ytf");
            write_ytf(c, dir.join(&name))?;
            chunks.push(name);
        }
        let manifest = SessionManifest {
            seed: self.seed,
            strategy: self.strategy.to_string(),
            strategy_spec: self.strategy.clone(),
            event: self.event.clone(),
            steps: self.steps.first().copied().unwrap_or(0),
            actions: self
                .actions
                .iter()
                .map(|&(human, camera)| ActionEntry {
                    human,
                    camera,
                    text: render_action_text(human, camera),
                })
                .collect(),
            chunks,
            cache_hits: self.cache.hits(),
            cache_misses: self.cache.misses(),
        };
        fs::write(
            dir.join("session.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    pub fn init_frames(&self) -> usize {
        self.init_frames
    }
}

/// Runs `n_blocks` chunks per strategy, one worker thread per strategy, and
/// returns the per-block records grouped by strategy in input order.
pub fn bench_context<M: VelocityModel + Sync>(
    model: &M,
    strategies: &[ContextStrategy],
    n_blocks: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if n_blocks < 2 {
        return invalid("bench needs at least two blocks");
    }
    for s in strategies {
        s.validate()?;
    }
    let results: Vec<Result<Vec<BenchRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|s| {
                scope.spawn(move || {
                    let mut session =
                        GenerationSession::new(model, s.clone(), "context benchmark", None, seed)?;
                    session.run(&[(HumanToken::None, CameraToken::Still)], n_blocks, steps)?;
                    Ok(session.records)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
