//! `chunkflow` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use chunkflow_core::action::{
    quantize_trajectory, render_action_text, CameraToken, HumanToken, MotionSample,
    DEFAULT_DEAD_ZONE_R, DEFAULT_DEAD_ZONE_T,
};
use chunkflow_core::dit::{DitConfig, DitModel};
use chunkflow_core::latent::VideoLatent;
use chunkflow_core::nullspace::{
    project_null, project_range, KernelSpec, SeparableOperator2D, DEFAULT_PINV_THRESHOLD,
};
use chunkflow_core::stream::{
    bench_context, parse_action_script, write_bench_csv, ActionEntry, ContextStrategy,
    GenerationSession,
};
use chunkflow_core::tensor::{read_ytf, write_ytf};
use chunkflow_core::text::{build_text_embedding, embed_text_toy, ActionEmbeddingCache};
use chunkflow_core::training::{
    distill, synthetic_dataset, train_rf, write_log_csv, DistillConfig, ModelTriplet, RolloutSpec,
    TrainConfig, TwoModeData, FAKE_UPDATES_PER_GENERATOR_UPDATE, FEW_STEPS,
};
use chunkflow_core::tscm::LadderSchedule;

const DEFAULT_EVENT: &str = "A quiet street at dusk.";

#[derive(Parser)]
#[command(
    name = "chunkflow",
    version,
    about = "Chunked video latent generation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model with rectified flow on synthetic latents.
    TrainToy(TrainToyArgs),
    /// Distill a few-step generator from a trained teacher.
    Distill(DistillArgs),
    /// Generate chunks autoregressively from an action script.
    Generate(GenerateArgs),
    /// Per-block context size, modeled attention cost and wall time.
    BenchContext(BenchArgs),
    /// Quantize motion windows into action tokens.
    QuantizeActions(QuantizeArgs),
    /// Split a tensor into blur-range and null-space components.
    ProjectNullspace(NullspaceArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON with optional `model` and `ladder` objects overriding defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    TwoMode,
    Gaussian,
}

#[derive(Args)]
struct TrainToyArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "two-mode")]
    data: DataKind,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Every step is text-to-video instead of alternating with image-to-video.
    #[arg(long)]
    no_alternate: bool,
    /// Reuse the same noise and timesteps every step.
    #[arg(long)]
    pin_noise: bool,
    #[arg(long, default_value = DEFAULT_EVENT)]
    event: String,
    /// Training log CSV (default: <out>/train_log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    teacher: PathBuf,
    /// Generator checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value_t = FAKE_UPDATES_PER_GENERATOR_UPDATE)]
    fake_updates: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = FEW_STEPS)]
    few_steps: usize,
    #[arg(long, default_value_t = 1)]
    chunks: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr_generator: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_fake: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = DEFAULT_EVENT)]
    event: String,
    /// Optional action script for the rollouts.
    #[arg(long)]
    actions: Option<PathBuf>,
    /// Distillation log CSV (default: <out>/distill_log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL, one action per line.
    #[arg(long)]
    actions: PathBuf,
    #[arg(long, default_value_t = 1)]
    chunks: usize,
    #[arg(long, default_value_t = FEW_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// full, window:<w>, spatial or tscm.
    #[arg(long, default_value = "tscm")]
    strategy: ContextStrategy,
    #[arg(long, default_value = DEFAULT_EVENT)]
    event: String,
    /// Initial history frames, a YTF tensor `[C, F, H, W]`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "session")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated strategies.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,window:3,spatial,tscm"
    )]
    strategies: Vec<ContextStrategy>,
    #[arg(long, default_value_t = 12)]
    blocks: usize,
    /// Denoising steps per block.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use a trained model instead of a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// JSONL of `{"translation": [right, forward], "rotation": [yaw, pitch]}`.
    #[arg(long)]
    input: PathBuf,
    /// JSONL output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DEAD_ZONE_T)]
    dead_zone_t: f64,
    #[arg(long, default_value_t = DEFAULT_DEAD_ZONE_R)]
    dead_zone_r: f64,
    #[arg(long, default_value_t = 1)]
    window: usize,
}

#[derive(Args)]
struct NullspaceArgs {
    /// YTF tensor whose trailing two dims are `H, W`.
    #[arg(long)]
    input: PathBuf,
    /// JSON kernel spec with `kernel_h`, `kernel_w` and optional `threshold`.
    #[arg(long, conflicts_with_all = ["kernel_h", "kernel_w"])]
    kernel: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    kernel_h: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    kernel_w: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_PINV_THRESHOLD)]
    threshold: f64,
    /// Output directory (default: next to the input).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Runtime(chunkflow_core::Error),
}

impl From<chunkflow_core::Error> for CliError {
    fn from(e: chunkflow_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::TrainToy(a) => train_toy(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Generate(a) => generate(a),
        Command::BenchContext(a) => bench(a),
        Command::QuantizeActions(a) => quantize(a),
        Command::ProjectNullspace(a) => nullspace(a),
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

struct Settings {
    model: DitConfig,
    ladder: LadderSchedule,
}

fn load_settings(arg: &ConfigArg) -> CliResult<Settings> {
    let mut model = serde_json::to_value(DitConfig::default())?;
    let mut ladder = serde_json::to_value(LadderSchedule::default())?;
    if let Some(path) = &arg.config {
        let text = fs::read_to_string(path)?;
        let Value::Object(mut root) = serde_json::from_str(&text)? else {
            return Err(CliError::Usage(format!(
                "{} must hold a JSON object",
                path.display()
            )));
        };
        if let Some(m) = root.remove("model") {
            merge(&mut model, m);
        }
        if let Some(l) = root.remove("ladder") {
            merge(&mut ladder, l);
        }
        if let Some(k) = root.keys().next() {
            return Err(CliError::Usage(format!("unknown config section {k:?}")));
        }
    }
    let model: DitConfig = serde_json::from_value(model)?;
    let ladder: LadderSchedule = serde_json::from_value(ladder)?;
    model.validate()?;
    ladder.validate()?;
    Ok(Settings { model, ladder })
}

/// Strategies that carry a ladder pick up the configured one.
fn with_ladder(s: ContextStrategy, ladder: &LadderSchedule) -> ContextStrategy {
    match s {
        ContextStrategy::Tscm(_) => ContextStrategy::Tscm(ladder.clone()),
        other => other,
    }
}

fn read_actions(path: &Path) -> CliResult<Vec<(HumanToken, CameraToken)>> {
    Ok(parse_action_script(&fs::read_to_string(path)?)?)
}

fn train_toy(a: TrainToyArgs) -> CliResult<()> {
    let s = load_settings(&a.config)?;
    let cfg = s.model;
    let data = match a.data {
        DataKind::TwoMode => {
            TwoModeData::new(&cfg, 0.1, a.seed).sample(a.samples, a.seed.wrapping_add(1))
        }
        DataKind::Gaussian => synthetic_dataset(&cfg, a.samples, a.seed),
    };
    let mut cache = ActionEmbeddingCache::new(cfg.d_text, cfg.action_len);
    let text = build_text_embedding(
        &a.event,
        cfg.event_len,
        &[(HumanToken::None, CameraToken::Still)],
        &mut cache,
    )?
    .combined;
    let mut model = DitModel::init(cfg, a.seed)?;
    let ctx = model.empty_context();
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        alternate: !a.no_alternate,
        pin_noise: a.pin_noise,
    };
    let log = train_rf(&mut model, &data, &text, &ctx, &tc)?;
    model.save(&a.out)?;
    write_log_csv(&log, a.log.unwrap_or_else(|| a.out.join("train_log.csv")))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "loss {:.6} -> {:.6} over {} steps",
            first.loss,
            last.loss,
            log.len()
        );
    }
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> CliResult<()> {
    let s = load_settings(&a.config)?;
    let teacher = DitModel::load(&a.teacher)?;
    let cfg = teacher.cfg.clone();
    let actions = match &a.actions {
        Some(p) => read_actions(p)?,
        None => vec![(HumanToken::None, CameraToken::Still)],
    };
    let spec = RolloutSpec {
        event_part: embed_text_toy(&a.event, cfg.d_text, cfg.event_len),
        actions,
        n_chunks: a.chunks,
        few_steps: a.few_steps,
        sched: s.ladder,
        channel: true,
        seed: a.seed,
    };
    let dc = DistillConfig {
        iterations: a.iterations,
        fake_updates: a.fake_updates,
        batch: a.batch,
        few_steps: a.few_steps,
        n_chunks: a.chunks,
        lr_generator: a.lr_generator,
        lr_fake: a.lr_fake,
        seed: a.seed,
    };
    let mut triplet = ModelTriplet::from_teacher(&teacher);
    let mut cache = ActionEmbeddingCache::new(cfg.d_text, cfg.action_len);
    let log = distill(&mut triplet, &spec, &dc, &mut cache)?;
    triplet.generator.save(&a.out)?;
    write_log_csv(&log, a.log.unwrap_or_else(|| a.out.join("distill_log.csv")))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "score gap {:.6} -> {:.6} over {} iterations",
            first.loss,
            last.loss,
            log.len()
        );
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let s = load_settings(&a.config)?;
    let model = DitModel::load(&a.checkpoint)?;
    let script = read_actions(&a.actions)?;
    let init = match &a.init {
        Some(p) => Some(VideoLatent::unmasked(read_ytf(p)?)?),
        None => None,
    };
    let strategy = with_ladder(a.strategy, &s.ladder);
    let mut session = GenerationSession::new(&model, strategy, &a.event, init, a.seed)?;
    session.run(&script, a.chunks, a.steps)?;
    let manifest = session.write(&a.out)?;
    println!(
        "{} chunks -> {} (action embeddings computed {}, reused {})",
        manifest.chunks.len(),
        a.out.display(),
        manifest.cache_misses,
        manifest.cache_hits
    );
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let s = load_settings(&a.config)?;
    let model = match &a.checkpoint {
        Some(dir) => DitModel::load(dir)?,
        None => DitModel::init(s.model, a.seed)?,
    };
    let strategies: Vec<ContextStrategy> = a
        .strategies
        .into_iter()
        .map(|st| with_ladder(st, &s.ladder))
        .collect();
    if strategies.is_empty() {
        return Err(CliError::Usage("no strategies given".into()));
    }
    let records = bench_context(&model, &strategies, a.blocks, a.steps, a.seed)?;
    match &a.out {
        Some(p) => write_bench_csv(&records, fs::File::create(p)?)?,
        None => write_bench_csv(&records, io::stdout().lock())?,
    }
    for st in &strategies {
        if let Some(b) = st.saturation_block(model.cfg.chunk_frames) {
            eprintln!("{st}: context size flat after block {b}");
        }
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.input)?;
    let samples: Vec<MotionSample> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    let tokens = quantize_trajectory(&samples, a.window, a.dead_zone_t, a.dead_zone_r)?;
    let mut out = String::new();
    for (human, camera) in tokens {
        let entry = ActionEntry {
            human,
            camera,
            text: render_action_text(human, camera),
        };
        out.push_str(&serde_json::to_string(&entry)?);
        out.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, out)?,
        None => io::stdout().lock().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn nullspace(a: NullspaceArgs) -> CliResult<()> {
    let spec = match &a.kernel {
        Some(p) => serde_json::from_str::<KernelSpec>(&fs::read_to_string(p)?)?,
        None => {
            if a.kernel_h.is_empty() || a.kernel_w.is_empty() {
                return Err(CliError::Usage(
                    "give --kernel or both --kernel-h and --kernel-w".into(),
                ));
            }
            KernelSpec {
                kernel_h: a.kernel_h,
                kernel_w: a.kernel_w,
                threshold: a.threshold,
            }
        }
    };
    let x = read_ytf(&a.input)?;
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(chunkflow_core::Error::Shape(format!(
            "input needs at least 2 dims, got {shape:?}"
        ))
        .into());
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let op = SeparableOperator2D::from_spec(&spec, h, w)?;
    let range = project_range(&op, &x)?;
    let null = project_null(&op, &x)?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    let stem = a
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input");
    let (rp, np) = (
        dir.join(format!("{stem}.range.ytf")),
        dir.join(format!("{stem}.null.ytf")),
    );
    write_ytf(&range, &rp)?;
    write_ytf(&null, &np)?;
    println!("{}\n{}", rp.display(), np.display());
    Ok(())
}
