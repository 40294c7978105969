use chunkflow_core::action::{render_action_text, CameraToken, HumanToken};
use chunkflow_core::dit::{DitConfig, DitModel, VelocityModel};
use chunkflow_core::latent::VideoLatent;
use chunkflow_core::stream::*;
use chunkflow_core::tensor::Tensor;
use chunkflow_core::text::embed_text_toy;
use chunkflow_core::training::{chunk_noise, synthetic_dataset, train_rf, TrainConfig};
use chunkflow_core::tscm::{CompressedContext, FrameAssignment, LadderSchedule, CHANNEL_DIM};
use proptest::prelude::*;

/// 16x16 frames and 4-frame chunks like the default, with a tiny network.
fn slim() -> DitConfig {
    DitConfig {
        channels: 2,
        chunk_frames: 4,
        height: 16,
        width: 16,
        d_model: 16,
        n_heads: 2,
        depth: 1,
        d_text: 8,
        mlp_ratio: 2,
        t_embed_dim: 8,
        event_len: 2,
        action_len: 4,
    }
}

fn micro() -> DitConfig {
    DitConfig {
        channels: 2,
        chunk_frames: 1,
        height: 4,
        width: 4,
        d_model: 16,
        n_heads: 2,
        depth: 1,
        d_text: 8,
        mlp_ratio: 2,
        t_embed_dim: 8,
        event_len: 2,
        action_len: 4,
    }
}

const STILL: (HumanToken, CameraToken) = (HumanToken::None, CameraToken::Still);

/// `v(z) = 0.5 z + 1`, independent of time, text and history.
struct AffineVelocity(DitConfig);

impl VelocityModel for AffineVelocity {
    fn config(&self) -> &DitConfig {
        &self.0
    }

    fn velocity(
        &self,
        noisy: &VideoLatent,
        _t: f64,
        _text: &Tensor,
        _ctx: &CompressedContext,
    ) -> chunkflow_core::Result<Tensor> {
        Ok(noisy.data().map(|z| 0.5 * z + 1.0))
    }

    fn context(
        &self,
        _history: &VideoLatent,
        _frames: &[FrameAssignment],
        _sched: &LadderSchedule,
        _channel: bool,
    ) -> chunkflow_core::Result<CompressedContext> {
        Ok(CompressedContext::empty(self.0.d_model, CHANNEL_DIM))
    }
}

#[test]
fn one_step_matches_hand_euler() {
    let cfg = micro();
    let m = AffineVelocity(cfg.clone());
    let mut s = GenerationSession::new(&m, ContextStrategy::FullContext, "e", None, 3).unwrap();
    let chunk = s.generate_chunk(STILL, 1).unwrap();
    let noise = chunk_noise(&cfg, 3, 0);
    for (c, e) in chunk.data().iter().zip(noise.data()) {
        assert!((c - (e - (0.5 * e + 1.0))).abs() < 1e-12);
    }
    // second chunk uses its own noise stream
    let second = s.generate_chunk(STILL, 2).unwrap();
    let e1 = chunk_noise(&cfg, 3, 1);
    for (c, e) in second.data().iter().zip(e1.data()) {
        let half = e - 0.5 * (0.5 * e + 1.0);
        let want = half - 0.5 * (0.5 * half + 1.0);
        assert!((c - want).abs() < 1e-12);
    }
}

#[test]
fn same_seed_same_chunks() {
    let m = DitModel::init(micro(), 1).unwrap();
    let run = |seed| {
        let mut s = GenerationSession::new(
            &m,
            ContextStrategy::Tscm(LadderSchedule::default()),
            "walk",
            None,
            seed,
        )
        .unwrap();
        s.run(&[STILL, (HumanToken::W, CameraToken::Right)], 4, 2)
            .unwrap();
        s.chunks
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn single_chunk_session_is_one_generate_call() {
    let m = DitModel::init(micro(), 2).unwrap();
    let mut a =
        GenerationSession::new(&m, ContextStrategy::SpatialCompression, "x", None, 9).unwrap();
    a.run(&[STILL], 1, 3).unwrap();
    let mut b =
        GenerationSession::new(&m, ContextStrategy::SpatialCompression, "x", None, 9).unwrap();
    let c = b.generate_chunk(STILL, 3).unwrap();
    assert_eq!(a.chunks, vec![c]);
    assert!(a.run(&[STILL], 0, 3).is_err());
}

#[test]
fn action_change_alters_trained_model_output() {
    let cfg = micro();
    let mut m = DitModel::init(cfg.clone(), 4).unwrap();
    let data = synthetic_dataset(&cfg, 4, 4);
    let text = embed_text_toy("scene", cfg.d_text, cfg.event_len + cfg.action_len);
    let ctx = m.empty_context();
    let tc = TrainConfig {
        steps: 20,
        lr: 1e-3,
        seed: 4,
        alternate: false,
        pin_noise: false,
    };
    train_rf(&mut m, &data, &text, &ctx, &tc).unwrap();
    let gen = |a| {
        let mut s =
            GenerationSession::new(&m, ContextStrategy::FullContext, "scene", None, 1).unwrap();
        s.generate_chunk(a, 4).unwrap()
    };
    let d = gen(STILL).max_abs_diff(&gen((HumanToken::S, CameraToken::Left)));
    assert!(d > 0.0, "diff {d}");
}

#[test]
fn history_feeds_next_chunk() {
    let m = DitModel::init(micro(), 5).unwrap();
    let init_a = VideoLatent::unmasked(Tensor::zeros(&[2, 1, 4, 4])).unwrap();
    let init_b = VideoLatent::unmasked(Tensor::full(&[2, 1, 4, 4], 1.0)).unwrap();
    let first = |init| {
        let mut s =
            GenerationSession::new(&m, ContextStrategy::FullContext, "e", Some(init), 2).unwrap();
        s.generate_chunk(STILL, 2).unwrap()
    };
    assert!(first(init_a).max_abs_diff(&first(init_b)) > 0.0);
}

#[test]
fn init_latent_shape_checked() {
    let m = DitModel::init(micro(), 5).unwrap();
    let bad = VideoLatent::unmasked(Tensor::zeros(&[3, 1, 4, 4])).unwrap();
    assert!(GenerationSession::new(&m, ContextStrategy::FullContext, "e", Some(bad), 0).is_err());
}

/// Spatial tokens per 16x16 frame by age under the default ladder.
fn ladder_oracle(history_len: usize) -> usize {
    if history_len == 0 {
        return 0;
    }
    let per_age = |age: usize| match age {
        1..=2 => 64,
        3..=6 => 16,
        _ => 4,
    };
    64 + (1..=23.min(history_len - 1)).map(per_age).sum::<usize>()
}

#[test]
fn ladder_oracle_sanity() {
    assert_eq!(ladder_oracle(24), 324);
    assert_eq!(ladder_oracle(1), 64);
    assert_eq!(ladder_oracle(4), 64 + 64 + 64 + 16);
}

#[test]
fn twelve_chunk_tscm_session_saturates() {
    let cfg = slim();
    let m = DitModel::init(cfg.clone(), 6).unwrap();
    let strat = ContextStrategy::Tscm(LadderSchedule::default());
    let mut s = GenerationSession::new(&m, strat.clone(), "long walk", None, 11).unwrap();
    s.run(&[(HumanToken::W, CameraToken::Still)], 12, 1)
        .unwrap();
    let sat = strat.saturation_block(cfg.chunk_frames).unwrap();
    assert_eq!(sat, 6);
    for r in &s.records {
        assert_eq!(
            r.context_tokens,
            ladder_oracle((r.block_index - 1) * 4),
            "block {}",
            r.block_index
        );
        if r.block_index > sat {
            assert_eq!(r.context_tokens, 324);
            assert_eq!(r.attn_madds, s.records[sat].attn_madds);
        }
    }
    assert!(s.records[sat - 1].context_tokens < 324);
    // one distinct action, embedded once
    assert_eq!(s.cache().misses(), 1);
    assert_eq!(s.cache().hits(), 11);
}

#[test]
fn record_tokens_match_strategy_arithmetic() {
    let cfg = slim();
    let m = DitModel::init(cfg.clone(), 7).unwrap();
    for strat in [
        ContextStrategy::FullContext,
        ContextStrategy::SlidingWindow(2),
    ] {
        let mut s = GenerationSession::new(&m, strat.clone(), "e", None, 0).unwrap();
        s.run(&[STILL], 5, 1).unwrap();
        for r in &s.records {
            let chunks = match strat {
                ContextStrategy::SlidingWindow(w) => (r.block_index - 1).min(w),
                _ => r.block_index - 1,
            };
            assert_eq!(r.context_tokens, chunks * 4 * 64);
            assert_eq!(r.strategy, strat.to_string());
            assert!(r.wall_ms >= 0.0);
        }
    }
}

#[test]
fn channel_tokens_match_built_context() {
    let cfg = slim();
    let m = DitModel::init(cfg.clone(), 8).unwrap();
    let strat = ContextStrategy::Tscm(LadderSchedule::default());
    for len in [1, 5, 9, 24, 40] {
        let h = VideoLatent::unmasked(Tensor::zeros(&[2, len, 16, 16])).unwrap();
        let frames = strat.frames(len, 4, 3);
        let ctx = m.context(&h, &frames, &strat.schedule(), true).unwrap();
        assert_eq!(
            ctx.channel_tokens.rows(),
            strat.channel_tokens(&cfg, len, 3),
            "len {len}"
        );
        assert_eq!(ctx.spatial_tokens.len(), strat.context_tokens(&cfg, len, 3));
    }
    assert_eq!(
        ContextStrategy::SpatialCompression.channel_tokens(&cfg, 10, 0),
        0
    );
}

#[test]
fn cost_model_shapes() {
    let cfg = DitConfig::default();
    let full = ContextStrategy::FullContext;
    let tscm = ContextStrategy::Tscm(LadderSchedule::default());
    let cost = |s: &ContextStrategy, b: usize| {
        let l = (b - 1) * cfg.chunk_frames;
        let ch = s.uses_channel().then(|| s.channel_tokens(&cfg, l, 0));
        attn_cost_model(&cfg, s.context_tokens(&cfg, l, 0), ch)
    };
    for b in 2..=12 {
        assert!(cost(&full, b) > cost(&full, b - 1));
    }
    let sat = tscm.saturation_block(cfg.chunk_frames).unwrap();
    for b in sat + 1..=12 {
        assert_eq!(cost(&tscm, b), cost(&tscm, sat + 1));
    }
    // hand count: 256 predicted tokens, no history, 4 blocks of 2·N²·d
    assert_eq!(cost(&full, 1), 4 * 2 * 256 * 256 * 64);
}

#[test]
fn bench_rows_and_csv_round_trip() {
    let m = DitModel::init(micro(), 1).unwrap();
    let strategies: Vec<ContextStrategy> = ["full", "window:2", "spatial", "tscm"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let recs = bench_context(&m, &strategies, 4, 1, 3).unwrap();
    assert_eq!(recs.len(), 16);
    let mut buf = Vec::new();
    write_bench_csv(&recs, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), BENCH_HEADER);
    assert_eq!(read_bench_csv(&text).unwrap(), recs);
    assert!(bench_context(&m, &strategies, 1, 1, 3).is_err());
}

#[test]
fn strategy_parsing() {
    assert_eq!(
        "full".parse::<ContextStrategy>().unwrap(),
        ContextStrategy::FullContext
    );
    assert_eq!(
        "window:3".parse::<ContextStrategy>().unwrap(),
        ContextStrategy::SlidingWindow(3)
    );
    assert!("window:0".parse::<ContextStrategy>().is_err());
    assert!("window:x".parse::<ContextStrategy>().is_err());
    assert!("kv-cache".parse::<ContextStrategy>().is_err());
    for s in ["full", "window:7", "spatial", "tscm"] {
        assert_eq!(s.parse::<ContextStrategy>().unwrap().to_string(), s);
    }
}

#[test]
fn action_script_lines() {
    let text = render_action_text(HumanToken::S, CameraToken::Up);
    let script = format!(
        "{{\"human\": \"W\", \"camera\": \"→\"}}\n\n{}\n",
        serde_json::json!({ "text": text })
    );
    let parsed = parse_action_script(&script).unwrap();
    assert_eq!(
        parsed,
        vec![
            (HumanToken::W, CameraToken::Right),
            (HumanToken::S, CameraToken::Up)
        ]
    );
    assert!(parse_action_script("{\"human\": \"Q\", \"camera\": \"·\"}").is_err());
    assert!(parse_action_script("not json").is_err());
}

#[test]
fn written_session_replays_byte_identical() {
    let m = DitModel::init(micro(), 3).unwrap();
    let script = [
        (HumanToken::W, CameraToken::Still),
        (HumanToken::A, CameraToken::Left),
        (HumanToken::W, CameraToken::Still),
    ];
    let write = |dir: &std::path::Path| {
        let mut s = GenerationSession::new(
            &m,
            ContextStrategy::Tscm(LadderSchedule::default()),
            "city",
            None,
            7,
        )
        .unwrap();
        s.run(&script, 6, 2).unwrap();
        s.write(dir).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = write(a.path());
    let mb = write(b.path());
    assert_eq!(ma, mb);
    assert_eq!(ma.chunks.len(), 6);
    assert_eq!(ma.cache_misses, 2);
    assert_eq!(ma.cache_hits, 4);
    for name in &ma.chunks {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
    let json: SessionManifest =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("session.json")).unwrap())
            .unwrap();
    assert_eq!(json, ma);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sliding_window_tokens(w in 1usize..6, chunks in 0usize..20) {
        let cfg = slim();
        let s = ContextStrategy::SlidingWindow(w);
        prop_assert_eq!(s.context_tokens(&cfg, chunks * 4, 0), chunks.min(w) * 4 * 64);
    }

    #[test]
    fn ladder_budget_bound(len in 0usize..200, seed in any::<u64>()) {
        let cfg = slim();
        let s = ContextStrategy::Tscm(LadderSchedule::default());
        let n = s.context_tokens(&cfg, len, seed);
        let extra = len.saturating_sub(24).div_ceil(32) * 4;
        prop_assert!(n <= 324 + extra);
        if len >= 24 {
            prop_assert!(n >= 324);
        }
    }
}
