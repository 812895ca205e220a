use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditions::ConditionBundle;
use crate::diffusion::{
    invert_all, make_toy_backend, reconstruct_from_anchors, Backend, GmmDenoiser, IdentityCodec,
    NoiseSchedule,
};
use crate::{Error, Mask, Tokens};

use super::*;

fn dyn_mask(values: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap()
}

#[test]
fn blend_mask_at_terminal_step_equals_layout() {
    let layout = dyn_mask(&[1.0, 0.0, 1.0, 1.0]);
    for alpha in [0.0, 0.3, 1.0] {
        let m = blend_mask(50, &layout, alpha, 50).unwrap();
        assert_eq!(m, layout);
    }
}

#[test]
fn blend_mask_with_zero_alpha_is_layout_for_every_step() {
    let layout = dyn_mask(&[1.0, 0.0, 1.0]);
    for t in 1..=50 {
        let m = blend_mask(t, &layout, 0.0, 50).unwrap();
        assert_eq!(m, layout);
    }
}

#[test]
fn blend_mask_midpoint_value() {
    // alpha = 0.5 at t = T/2: factor = 1 - 0.5 * 0.5 = 0.75 exactly.
    let layout = dyn_mask(&[1.0, 0.0]);
    let m = blend_mask(25, &layout, 0.5, 50).unwrap();
    assert_eq!(m[0], 0.75);
    assert_eq!(m[1], 0.0);
}

#[test]
fn blend_mask_rejects_bad_alpha_and_step() {
    let layout = dyn_mask(&[1.0]);
    assert!(blend_mask(10, &layout, -0.1, 50).is_err());
    assert!(blend_mask(10, &layout, 1.5, 50).is_err());
    assert!(blend_mask(0, &layout, 0.5, 50).is_err());
    assert!(blend_mask(51, &layout, 0.5, 50).is_err());
}

#[test]
fn blend_mask_is_monotone_in_t_for_preserved_pixels() {
    let layout = dyn_mask(&[1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let steps = rng.random_range(2..100);
        let mut prev = f64::NEG_INFINITY;
        for t in 1..=steps {
            let m = blend_mask(t, &layout, alpha, steps).unwrap()[0];
            assert!(m >= prev, "mask not non-decreasing in t");
            assert!(m >= 1.0 - alpha * (steps - 1) as f64 / steps as f64 - 1e-15);
            assert!(m <= 1.0);
            prev = m;
        }
    }
}

#[test]
fn fuse_step_extremes_select_inputs() {
    let anchor = dyn_mask(&[1.0, 2.0, 3.0]);
    let current = dyn_mask(&[-1.0, -2.0, -3.0]);
    let ones = dyn_mask(&[1.0, 1.0, 1.0]);
    let zeros = dyn_mask(&[0.0, 0.0, 0.0]);
    assert_eq!(fuse_step(&anchor, &current, &ones).unwrap(), anchor);
    assert_eq!(fuse_step(&anchor, &current, &zeros).unwrap(), current);
}

#[test]
fn fuse_step_binary_masks_equal_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (h, w, c) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=4),
        );
        let anchor =
            ArrayD::from_shape_simple_fn(IxDyn(&[h, w, c]), || rng.random_range(-2.0..2.0));
        let current =
            ArrayD::from_shape_simple_fn(IxDyn(&[h, w, c]), || rng.random_range(-2.0..2.0));
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&[h, w]), || {
            if rng.random_range(0..2) == 0 {
                0.0
            } else {
                1.0
            }
        });
        let fused = fuse_step(&anchor, &current, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let pick_anchor = mask[[y, x]] == 1.0;
                for ch in 0..c {
                    let want = if pick_anchor {
                        anchor[[y, x, ch]]
                    } else {
                        current[[y, x, ch]]
                    };
                    assert_eq!(fused[[y, x, ch]], want);
                }
            }
        }
    }
}

#[test]
fn fuse_step_rejects_shape_mismatch() {
    let anchor = dyn_mask(&[1.0, 2.0]);
    let current = dyn_mask(&[1.0, 2.0, 3.0]);
    let mask = dyn_mask(&[1.0, 1.0]);
    assert!(matches!(
        fuse_step(&anchor, &current, &mask),
        Err(Error::ShapeMismatch(_))
    ));
    let bad_mask = dyn_mask(&[1.0, 0.0, 1.0]);
    let a2 = dyn_mask(&[1.0, 2.0]);
    let c2 = dyn_mask(&[0.0, 0.0]);
    assert!(fuse_step(&a2, &c2, &bad_mask).is_err());
}

fn attention_fixture(
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Tokens<f64>, CrossAttentionWeights<f64>) {
    let acts = Array3::from_shape_simple_fn((8, 8, 6), || rng.random_range(-1.0..1.0));
    let tokens = Tokens::from_shape_simple_fn((4, 12), || rng.random_range(-1.0..1.0));
    let weights = CrossAttentionWeights::<f64>::seeded(6, 12, 8, rng.random_range(0..u64::MAX));
    (acts, tokens, weights)
}

/// Plain (unmasked) cross-attention reference with explicit loops.
fn oracle_cross_attention(
    acts: &Array3<f64>,
    tokens: &Tokens<f64>,
    w: &CrossAttentionWeights<f64>,
) -> Array3<f64> {
    let (gh, gw, ch) = acts.dim();
    let n = tokens.nrows();
    let da = w.attn_dim();
    let mut out = Array3::<f64>::zeros((gh, gw, ch));
    for y in 0..gh {
        for x in 0..gw {
            let q: Vec<f64> = (0..da)
                .map(|a| (0..ch).map(|c| acts[(y, x, c)] * w.w_q[(c, a)]).sum())
                .collect();
            let mut logits = vec![0.0; n];
            for (k, logit) in logits.iter_mut().enumerate() {
                let key: Vec<f64> = (0..da)
                    .map(|a| {
                        (0..tokens.ncols())
                            .map(|c| tokens[(k, c)] * w.w_k[(c, a)])
                            .sum()
                    })
                    .collect();
                *logit = q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>()
                    / (da as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut mixed = vec![0.0; da];
            for (k, e) in exps.iter().enumerate() {
                let weight = e / total;
                for (a, m) in mixed.iter_mut().enumerate() {
                    let val: f64 = (0..tokens.ncols())
                        .map(|c| tokens[(k, c)] * w.w_v[(c, a)])
                        .sum();
                    *m += weight * val;
                }
            }
            for c in 0..ch {
                out[(y, x, c)] = (0..da).map(|a| mixed[a] * w.w_out[(a, c)]).sum();
            }
        }
    }
    out
}

#[test]
fn masked_attention_with_no_editable_region_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (acts, tokens, weights) = attention_fixture(&mut rng);
    let layout = Mask::<f64>::from_elem((8, 8), 1.0);
    let residual = masked_visual_attention(&acts, &tokens, &layout, &weights).unwrap();
    assert!(residual.iter().all(|&v| v == 0.0));
}

#[test]
fn masked_attention_fully_editable_matches_plain_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (acts, tokens, weights) = attention_fixture(&mut rng);
    let layout = Mask::<f64>::from_elem((8, 8), 0.0);
    let residual = masked_visual_attention(&acts, &tokens, &layout, &weights).unwrap();
    let want = oracle_cross_attention(&acts, &tokens, &weights);
    for (a, b) in residual.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn masked_attention_point_mask_confines_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (acts, tokens, weights) = attention_fixture(&mut rng);
    let mut layout = Mask::<f64>::from_elem((8, 8), 1.0);
    layout[(3, 5)] = 0.0;
    let residual = masked_visual_attention(&acts, &tokens, &layout, &weights).unwrap();
    for ((y, x, _), &v) in residual.indexed_iter() {
        if (y, x) == (3, 5) {
            continue;
        }
        assert_eq!(v, 0.0, "support leaked to ({y},{x})");
    }
    let cell: f64 = (0..6).map(|c| residual[(3, 5, c)].abs()).sum();
    assert!(cell > 0.0);
}

#[test]
fn masked_attention_rejects_width_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (acts, _tokens, weights) = attention_fixture(&mut rng);
    let bad_tokens = Tokens::from_elem((4, 5), 0.1);
    let layout = Mask::<f64>::from_elem((8, 8), 0.0);
    assert!(matches!(
        masked_visual_attention(&acts, &bad_tokens, &layout, &weights),
        Err(Error::WidthMismatch(_))
    ));
}

#[test]
fn masked_attention_empty_tokens_disable_injection() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (acts, _tokens, weights) = attention_fixture(&mut rng);
    let tokens = Tokens::zeros((0, 12));
    let layout = Mask::<f64>::from_elem((8, 8), 0.0);
    let residual = masked_visual_attention(&acts, &tokens, &layout, &weights).unwrap();
    assert!(residual.iter().all(|&v| v == 0.0));
}

#[test]
fn downsample_editable_wins_ties() {
    let mut layout = Mask::<f64>::from_elem((4, 4), 1.0);
    layout[(1, 1)] = 0.0;
    let grid = downsample_editable(&layout, 2, 2);
    assert!(grid[(0, 0)]);
    assert!(!grid[(0, 1)]);
    assert!(!grid[(1, 0)]);
    assert!(!grid[(1, 1)]);
}

#[test]
fn inject_pose_zero_residual_is_bitwise_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let acts = Array3::from_shape_simple_fn((4, 4, 3), || rng.random_range(-1.0..1.0));
    let residual = ArrayD::<f64>::zeros(IxDyn(&[4, 4, 3]));
    let out = inject_pose(&acts, &residual).unwrap();
    assert_eq!(out, acts);
}

#[test]
fn inject_pose_additivity_on_dyadic_grid() {
    // Values on a 1/4 grid add without rounding, so the difference between
    // injecting r and 2r is exactly r.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let acts = Array3::from_shape_fn((4, 4, 2), |_| {
        (rng.random_range(-8..8) as f64) * 0.25
    });
    let r = ArrayD::from_shape_fn(IxDyn(&[4, 4, 2]), |_| {
        (rng.random_range(-8..8) as f64) * 0.25
    });
    let r2 = r.mapv(|v| 2.0 * v);
    let a1 = inject_pose(&acts, &r).unwrap();
    let a2 = inject_pose(&acts, &r2).unwrap();
    for ((x2, x1), rv) in a2.iter().zip(a1.iter()).zip(r.iter()) {
        assert_eq!(x2 - x1, *rv);
    }
}

#[test]
fn inject_pose_rejects_shape_mismatch() {
    let acts = Array3::<f64>::zeros((4, 4, 3));
    let residual = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 3]));
    assert!(matches!(
        inject_pose(&acts, &residual),
        Err(Error::ShapeMismatch(_))
    ));
}

fn gmm_backend_1c(dim_seed: u64, steps: usize) -> Backend<f64> {
    let schedule = NoiseSchedule::cosine(steps);
    Backend {
        name: "analytic-gmm".into(),
        denoiser: std::sync::Arc::new(GmmDenoiser::new(
            vec![1.0],
            vec![0.6],
            dim_seed,
            schedule.clone(),
        )),
        codec: std::sync::Arc::new(IdentityCodec),
        schedule,
    }
}

#[test]
fn alpha_zero_preserved_coordinates_match_anchor_reconstruction_bitwise() {
    // Single-component mixture: the noise prediction is coordinatewise, so
    // preserved coordinates see exactly the same arithmetic as a pure
    // reconstruction run.
    let backend = gmm_backend_1c(21, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let z0 = ArrayD::from_shape_simple_fn(IxDyn(&[12]), || rng.random_range(-1.0..1.0));
    let anchors = invert_all(&z0, backend.denoiser.as_ref(), &backend.schedule).unwrap();
    let recon = reconstruct_from_anchors(&anchors, backend.denoiser.as_ref(), &backend.schedule)
        .unwrap();

    let mask_values: Vec<f64> = (0..12).map(|i| if i < 6 { 1.0 } else { 0.0 }).collect();
    let mask = dyn_mask(&mask_values);
    let params = FusionParams {
        alpha: 0.0,
        steps: 50,
        seed: 5,
        start_mode: StartMode::Gaussian,
    };
    let (final_latent, last_fused, _) =
        fuse_denoise_loop(&anchors, &mask, &params, &backend, None).unwrap();
    for i in 0..6 {
        assert_eq!(final_latent[[i]], recon[[i]], "coordinate {i}");
        assert_eq!(last_fused[[i]], anchors.get(1)[[i]]);
    }
    // Editable coordinates actually regenerated from noise.
    let changed = (6..12).any(|i| (final_latent[[i]] - recon[[i]]).abs() > 1e-9);
    assert!(changed);
}

#[test]
fn alpha_zero_anchor_start_reproduces_round_trip() {
    let backend = gmm_backend_1c(22, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let z0 = ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.random_range(-1.0..1.0));
    let anchors = invert_all(&z0, backend.denoiser.as_ref(), &backend.schedule).unwrap();
    let recon = reconstruct_from_anchors(&anchors, backend.denoiser.as_ref(), &backend.schedule)
        .unwrap();
    let ones = ArrayD::from_elem(IxDyn(&[8]), 1.0);
    let params = FusionParams {
        alpha: 0.0,
        steps: 50,
        seed: 9,
        start_mode: StartMode::Anchor,
    };
    let (final_latent, _, _) = fuse_denoise_loop(&anchors, &ones, &params, &backend, None).unwrap();
    assert_eq!(final_latent, recon);
    let max_err = final_latent
        .iter()
        .zip(z0.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err < 1e-3, "round trip error {max_err}");
}

fn conv_backend(seed: u64) -> Backend<f64> {
    make_toy_backend("trained-conv", seed).unwrap()
}

fn toy_frame() -> crate::scene::FrameRecord<f64> {
    let traj =
        crate::metrics::make_toy_scene::<f64>(&crate::metrics::ToySceneSpec::default(), 1, 77)
            .unwrap();
    traj.frames[0].clone()
}

fn block_bundle(
    tokens: Tokens<f64>,
    editable_box: (usize, usize, usize, usize),
) -> ConditionBundle<f64> {
    let mut layout = Mask::<f64>::from_elem((32, 32), 1.0);
    let (y0, y1, x0, x1) = editable_box;
    for y in y0..y1 {
        for x in x0..x1 {
            layout[(y, x)] = 0.0;
        }
    }
    ConditionBundle {
        c_visual: tokens,
        c_layout: layout,
        c_pose: Vec::new(),
        control_scale: 1.0,
        flags: Vec::new(),
    }
}

#[test]
fn edit_frame_is_deterministic() {
    let backend = conv_backend(55);
    let frame = toy_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = Tokens::from_shape_simple_fn((4, 32), || rng.random_range(-0.5..0.5));
    let bundle = block_bundle(tokens, (12, 20, 12, 20));
    let params = FusionParams {
        alpha: 0.3,
        steps: 50,
        seed: 42,
        start_mode: StartMode::Gaussian,
    };
    let a = edit_frame(&frame, &bundle, &backend, &params).unwrap();
    let b = edit_frame(&frame, &bundle, &backend, &params).unwrap();
    assert_eq!(a.edited_image, b.edited_image);
    assert_eq!(a.final_latent, b.final_latent);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn edit_frame_flags_all_preserve_mask() {
    let backend = conv_backend(56);
    let frame = toy_frame();
    let bundle = block_bundle(Tokens::zeros((0, 32)), (0, 0, 0, 0));
    let params = FusionParams {
        alpha: 0.3,
        steps: 50,
        seed: 1,
        start_mode: StartMode::Gaussian,
    };
    let result = edit_frame(&frame, &bundle, &backend, &params).unwrap();
    assert!(result.flags.iter().any(|f| f == "no-editable-region"));
}

#[test]
fn prompt_changes_stay_inside_dilated_editable_region() {
    // With alpha = 0 and a block-aligned mask, the denoiser's receptive
    // field (4 input pixels) bounds how far an edit can reach: outside the
    // 4-pixel dilation the two runs agree bitwise.
    let backend = conv_backend(57);
    let frame = toy_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens_a = Tokens::from_shape_simple_fn((4, 32), || rng.random_range(-0.5..0.5));
    let tokens_b = Tokens::from_shape_simple_fn((4, 32), || rng.random_range(-0.5..0.5));
    let region = (12usize, 20usize, 12usize, 20usize);
    let bundle_a = block_bundle(tokens_a, region);
    let bundle_b = block_bundle(tokens_b, region);
    let params = FusionParams {
        alpha: 0.0,
        steps: 50,
        seed: 3,
        start_mode: StartMode::Gaussian,
    };
    let a = edit_frame(&frame, &bundle_a, &backend, &params).unwrap();
    let b = edit_frame(&frame, &bundle_b, &backend, &params).unwrap();

    let (y0, y1, x0, x1) = region;
    let margin = 4usize;
    let mut interior_diff = 0.0f64;
    for y in 0..32 {
        for x in 0..32 {
            let inside_dilated = y + margin >= y0 && y < y1 + margin && x + margin >= x0
                && x < x1 + margin;
            for c in 0..3 {
                let d = (a.final_latent[[y, x, c]] - b.final_latent[[y, x, c]]).abs();
                if inside_dilated {
                    interior_diff = interior_diff.max(d);
                } else {
                    assert_eq!(
                        a.final_latent[[y, x, c]],
                        b.final_latent[[y, x, c]],
                        "leak at ({y},{x},{c})"
                    );
                }
            }
        }
    }
    assert!(interior_diff > 0.0, "prompt change had no effect");
}

#[test]
fn alpha_one_degrades_preserved_region_relative_to_alpha_zero() {
    let backend = conv_backend(58);
    let frame = toy_frame();
    let bundle = block_bundle(Tokens::zeros((0, 32)), (12, 20, 12, 20));
    let run = |alpha: f64| {
        let params = FusionParams {
            alpha,
            steps: 50,
            seed: 4,
            start_mode: StartMode::Gaussian,
        };
        edit_frame(&frame, &bundle, &backend, &params).unwrap()
    };
    let strict = run(0.0);
    let loose = run(1.0);
    let opts = crate::metrics::FidelityOptions::default();
    let psnr_strict =
        crate::metrics::frame_pair_fidelity(&frame.image, &strict.edited_image, &bundle.c_layout, &opts).0;
    let psnr_loose =
        crate::metrics::frame_pair_fidelity(&frame.image, &loose.edited_image, &bundle.c_layout, &opts).0;
    assert!(
        psnr_strict > psnr_loose,
        "expected alpha=0 ({psnr_strict} dB) above alpha=1 ({psnr_loose} dB)"
    );
}

#[test]
fn diagnostics_cover_every_step_with_mask_means() {
    let backend = gmm_backend_1c(23, 10);
    let z0 = ArrayD::from_elem(IxDyn(&[4]), 0.2);
    let anchors = invert_all(&z0, backend.denoiser.as_ref(), &backend.schedule).unwrap();
    let mask = dyn_mask(&[1.0, 1.0, 0.0, 0.0]);
    let params = FusionParams {
        alpha: 0.5,
        steps: 10,
        seed: 0,
        start_mode: StartMode::Gaussian,
    };
    let (_, _, diags) = fuse_denoise_loop(&anchors, &mask, &params, &backend, None).unwrap();
    assert_eq!(diags.len(), 10);
    assert_eq!(diags[0].t, 10);
    assert_eq!(diags[9].t, 1);
    // Preserved half contributes factor/2 to the mean.
    assert!((diags[0].mask_mean - 0.5).abs() < 1e-12);
}
