use chunkflow_core::patchify::{
    extract_patches, interpolate_patch_weights, patchify, token_count, unpatchify, PatchRate,
    PatchWeights,
};
use chunkflow_core::tensor::{matmul, svd_thin, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rate(pt: usize, ph: usize, pw: usize) -> PatchRate {
    PatchRate::new(pt, ph, pw).unwrap()
}

fn random_weights(r: PatchRate, c: usize, d: usize, seed: u64) -> PatchWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Tensor::randn(&[r.patch_dim(c), d], 0.3, &mut rng);
    let b = Tensor::randn(&[1, d], 0.1, &mut rng);
    PatchWeights::new(r, c, k, b).unwrap()
}

fn orthonormal_weights(r: PatchRate, c: usize, seed: u64) -> PatchWeights {
    let p = r.patch_dim(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = svd_thin(&Tensor::randn(&[p, p], 1.0, &mut rng)).unwrap().u;
    let b = Tensor::randn(&[1, p], 0.5, &mut rng);
    PatchWeights::new(r, c, q, b).unwrap()
}

#[test]
fn four_tokens_for_one_4x4_frame() {
    let w = random_weights(PatchRate::BASE, 3, 8, 1);
    let seq = patchify(&Tensor::zeros(&[3, 1, 4, 4]), PatchRate::BASE, &w).unwrap();
    assert_eq!(seq.tokens.shape(), &[4, 8]);
    assert_eq!(seq.meta.len(), 4);
    assert_eq!(seq.meta[3].index, (0, 1, 1));
}

#[test]
fn constant_input_gives_row_sum_plus_bias() {
    let r = PatchRate::BASE;
    let c = 2;
    let kernel = Tensor::full(&[r.patch_dim(c), 1], 1.0 / r.patch_dim(c) as f64);
    let w = PatchWeights::new(r, c, kernel, Tensor::full(&[1, 1], 0.25)).unwrap();
    let seq = patchify(&Tensor::full(&[c, 1, 6, 4], 3.0), r, &w).unwrap();
    for i in 0..seq.len() {
        assert!((seq.tokens.at(i, 0) - (3.0 + 0.25)).abs() < 1e-12);
    }
}

#[test]
fn orthonormal_round_trip() {
    let r = rate(1, 2, 2);
    let w = orthonormal_weights(r, 4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[4, 3, 8, 6], 1.0, &mut rng);
    let seq = patchify(&x, r, &w).unwrap();
    let back = unpatchify(&seq.tokens, r, &w, (4, 3, 8, 6)).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-5);
}

#[test]
fn identity_kernel_round_trip_is_exact() {
    let r = rate(2, 2, 2);
    let p = r.patch_dim(1);
    let w = PatchWeights::new(r, 1, Tensor::eye(p), Tensor::zeros(&[1, p])).unwrap();
    let x = Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64).sqrt());
    let seq = patchify(&x, r, &w).unwrap();
    assert_eq!(unpatchify(&seq.tokens, r, &w, (1, 4, 4, 4)).unwrap(), x);
}

#[test]
fn zero_tokens_unpatchify_to_zero() {
    let r = PatchRate::BASE;
    let p = r.patch_dim(2);
    let w = PatchWeights::new(r, 2, Tensor::eye(p), Tensor::zeros(&[1, p])).unwrap();
    let out = unpatchify(&Tensor::zeros(&[4, p]), r, &w, (2, 1, 4, 4)).unwrap();
    assert_eq!(out, Tensor::zeros(&[2, 1, 4, 4]));
}

#[test]
fn unpatchify_rejects_wrong_count() {
    let r = PatchRate::BASE;
    let w = orthonormal_weights(r, 1, 3);
    assert!(unpatchify(&Tensor::zeros(&[5, 4]), r, &w, (1, 1, 4, 4)).is_err());
}

#[test]
fn patchify_rejects_mismatched_rate() {
    let w = random_weights(PatchRate::BASE, 1, 4, 0);
    assert!(patchify(&Tensor::zeros(&[1, 1, 4, 4]), rate(1, 4, 4), &w).is_err());
}

#[test]
fn token_count_examples() {
    assert_eq!(token_count(1, 16, 16, rate(1, 2, 2)), 64);
    assert_eq!(token_count(1, 16, 16, rate(1, 8, 8)), 4);
    let ladder = 2 * token_count(1, 16, 16, rate(1, 2, 2))
        + 4 * token_count(1, 16, 16, rate(1, 4, 4))
        + 17 * token_count(1, 16, 16, rate(1, 8, 8))
        + token_count(1, 16, 16, rate(1, 2, 2));
    assert_eq!(ladder, 2 * 64 + 4 * 16 + 17 * 4 + 64);
    assert_eq!(ladder, 324);
    assert_eq!(token_count(8, 16, 16, rate(8, 4, 4)), 16);
}

#[test]
fn interpolation_to_same_rate_is_identity() {
    let w = random_weights(PatchRate::BASE, 3, 6, 4);
    assert_eq!(interpolate_patch_weights(&w, PatchRate::BASE).unwrap(), w);
}

#[test]
fn interpolation_rejects_fractional_ratio() {
    let w = random_weights(PatchRate::BASE, 1, 4, 4);
    assert!(interpolate_patch_weights(&w, rate(1, 3, 4)).is_err());
    assert!(interpolate_patch_weights(&w, rate(1, 1, 2)).is_err());
}

#[test]
fn constant_input_token_is_rate_invariant() {
    let base = random_weights(PatchRate::BASE, 3, 8, 5);
    let x = Tensor::full(&[3, 1, 8, 8], -1.7);
    let t2 = patchify(&x, PatchRate::BASE, &base).unwrap();
    for target in [rate(1, 4, 4), rate(1, 8, 8), rate(8, 4, 4)] {
        let w = interpolate_patch_weights(&base, target).unwrap();
        assert_eq!(w.base, PatchRate::BASE);
        let xt = Tensor::full(&[3, target.pt, 8, 8], -1.7);
        let tk = patchify(&xt, target, &w).unwrap();
        let diff = tk
            .tokens
            .slice_rows(0, 1)
            .max_abs_diff(&t2.tokens.slice_rows(0, 1));
        assert!(diff < 1e-5, "{target}: {diff}");
    }
}

/// 2x2 average pooling over the spatial axes, computed directly.
fn avg_pool2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, f, h, w) = (s[0], s[1], s[2], s[3]);
    Tensor::from_fn(&[c, f, h / 2, w / 2], |i| {
        let xx = i % (w / 2);
        let yy = (i / (w / 2)) % (h / 2);
        let ct = i / (w / 2 * (h / 2));
        let mut acc = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                acc += x.data()[(ct * h + 2 * yy + dy) * w + 2 * xx + dx];
            }
        }
        acc / 4.0
    })
}

#[test]
fn ramp_token_matches_downsampled_ramp() {
    let base = random_weights(PatchRate::BASE, 2, 5, 6);
    let w44 = interpolate_patch_weights(&base, rate(1, 4, 4)).unwrap();
    let ramp = Tensor::from_fn(&[2, 1, 8, 8], |i| {
        let (x, y, c) = (i % 8, (i / 8) % 8, i / 64);
        0.3 * x as f64 - 0.2 * y as f64 + c as f64
    });
    let hi = patchify(&ramp, rate(1, 4, 4), &w44).unwrap();
    let lo = patchify(&avg_pool2(&ramp), PatchRate::BASE, &base).unwrap();
    assert!(hi.tokens.max_abs_diff(&lo.tokens) < 1e-4);
}

#[test]
fn weights_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_weights(PatchRate::BASE, 2, 4, 7);
    let w = interpolate_patch_weights(&base, rate(1, 4, 4)).unwrap();
    w.save(dir.path(), "p44").unwrap();
    let side = std::fs::read_to_string(dir.path().join("p44.json")).unwrap();
    assert_eq!(side, r#"{"rate":[1,4,4],"base":[1,2,2]}"#);
    let back = PatchWeights::load(dir.path(), "p44").unwrap();
    assert_eq!(back.rate, w.rate);
    assert_eq!(back.base, PatchRate::BASE);
    assert_eq!(back.kernel, w.kernel.round_f32());
}

proptest! {
    #[test]
    fn coverage_bound(f in 1usize..10, h in 1usize..20, w in 1usize..20,
                      pt in 1usize..4, ph in 1usize..5, pw in 1usize..5) {
        let r = rate(pt, ph, pw);
        let n = token_count(f, h, w, r);
        prop_assert!(n * r.volume() >= f * h * w);
        if f % pt == 0 && h % ph == 0 && w % pw == 0 {
            prop_assert_eq!(n * r.volume(), f * h * w);
        }
    }

    #[test]
    fn patchify_is_linear_without_bias(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let r = PatchRate::BASE;
        let mut w = random_weights(r, 2, 6, seed);
        w.bias = Tensor::zeros(&[1, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Tensor::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let mut mix = x.scale(a);
        mix.axpy(b, &y).unwrap();
        let lhs = patchify(&mix, r, &w).unwrap().tokens;
        let mut rhs = patchify(&x, r, &w).unwrap().tokens.scale(a);
        rhs.axpy(b, &patchify(&y, r, &w).unwrap().tokens).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn patch_rows_match_kernel_product(seed in 0u64..500) {
        let r = rate(2, 2, 1);
        let w = random_weights(r, 1, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[1, 4, 2, 3], 1.0, &mut rng);
        let seq = patchify(&x, r, &w).unwrap();
        let direct = matmul(&extract_patches(&x, r).unwrap(), &w.kernel).unwrap();
        for i in 0..seq.len() {
            for j in 0..3 {
                prop_assert!((seq.tokens.at(i, j) - direct.at(i, j) - w.bias.at(0, j)).abs() < 1e-12);
            }
        }
    }
}
