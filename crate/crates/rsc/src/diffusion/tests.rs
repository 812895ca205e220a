use approx::assert_relative_eq;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn vec_latent(values: &[f64]) -> Latent<f64> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&[values.len()]), values.to_vec()).unwrap()
}

fn random_latent(dim: usize, rng: &mut ChaCha8Rng) -> Latent<f64> {
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[dim]), || rng.random_range(-2.0..2.0))
}

/// Denoiser stub that always predicts zero noise.
struct ZeroDenoiser;

impl Denoiser<f64> for ZeroDenoiser {
    fn predict_noise(
        &self,
        z: &Latent<f64>,
        _t: usize,
        _conditions: Option<&crate::conditions::ConditionBundle<f64>>,
    ) -> Result<Latent<f64>> {
        Ok(ArrayD::zeros(z.raw_dim()))
    }
}

/// Denoiser stub returning a fixed tensor regardless of the latent.
struct FrozenDenoiser(Latent<f64>);

impl Denoiser<f64> for FrozenDenoiser {
    fn predict_noise(
        &self,
        _z: &Latent<f64>,
        _t: usize,
        _conditions: Option<&crate::conditions::ConditionBundle<f64>>,
    ) -> Result<Latent<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn cosine_schedule_invariants() {
    for steps in [1, 2, 10, 50, 200] {
        let s = NoiseSchedule::<f64>::cosine(steps);
        assert_eq!(s.steps(), steps);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "not decreasing at {t}");
        }
    }
}

#[test]
fn from_alpha_bar_validates() {
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.2]).is_ok());
    assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.0]).is_err());
    assert!(NoiseSchedule::from_alpha_bar(vec![1.0]).is_err());
}

#[test]
fn forward_step_with_zero_noise_is_pure_rescale() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let z = vec_latent(&[0.3, -1.2, 0.8, 2.5]);
    for t in [1usize, 7, 25, 50] {
        let out = ddim_forward_step(&z, t, &ZeroDenoiser, &schedule, None).unwrap();
        let ratio = (schedule.alpha_bar(t - 1) / schedule.alpha_bar(t)).sqrt();
        for (o, zi) in out.iter().zip(z.iter()) {
            assert_eq!(*o, zi * ratio);
        }
    }
}

#[test]
fn inverse_step_with_zero_noise_is_pure_rescale() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let z = vec_latent(&[0.3, -1.2, 0.8, 2.5]);
    for t in [1usize, 7, 25, 50] {
        let out = ddim_inverse_step(&z, t, &ZeroDenoiser, &schedule).unwrap();
        let ratio = (schedule.alpha_bar(t) / schedule.alpha_bar(t - 1)).sqrt();
        for (o, zi) in out.iter().zip(z.iter()) {
            assert_eq!(*o, zi * ratio);
        }
    }
}

#[test]
fn inverse_then_forward_composes_to_identity_for_zero_noise() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = random_latent(16, &mut rng);
    for t in 1..=50 {
        let up = ddim_inverse_step(&z, t, &ZeroDenoiser, &schedule).unwrap();
        let back = ddim_forward_step(&up, t, &ZeroDenoiser, &schedule, None).unwrap();
        for (b, zi) in back.iter().zip(z.iter()) {
            assert_relative_eq!(*b, *zi, max_relative = 1e-13);
        }
    }
}

#[test]
fn flat_schedule_segment_is_exact_fixed_point() {
    // alpha_bar equal across the step: both coefficients collapse so the
    // update is the identity for any noise prediction.
    let (c_signal, c_noise) = step_coefficients(0.37f64, 0.37f64);
    assert_eq!(c_signal, 1.0);
    assert_eq!(c_noise, 0.0);
    let z = vec_latent(&[1.5, -0.25, 0.0]);
    let eps = vec_latent(&[3.0, -7.0, 2.0]);
    let out = apply_step(&z, &eps, c_signal, c_noise);
    for (o, zi) in out.iter().zip(z.iter()) {
        assert_eq!(*o, *zi);
    }
}

#[test]
fn frozen_noise_round_trip_is_identity_per_step() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random_latent(12, &mut rng);
    let eps = random_latent(12, &mut rng);
    let frozen = FrozenDenoiser(eps);
    for t in 1..=50 {
        let up = ddim_inverse_step(&z, t, &frozen, &schedule).unwrap();
        let back = ddim_forward_step(&up, t, &frozen, &schedule, None).unwrap();
        for (b, zi) in back.iter().zip(z.iter()) {
            assert!((b - zi).abs() < 1e-6, "t={t}: {b} vs {zi}");
        }
    }
}

#[test]
fn step_rejects_out_of_range_t() {
    let schedule = NoiseSchedule::<f64>::cosine(10);
    let z = vec_latent(&[0.0]);
    assert!(matches!(
        ddim_forward_step(&z, 0, &ZeroDenoiser, &schedule, None),
        Err(Error::StepOutOfRange { .. })
    ));
    assert!(matches!(
        ddim_forward_step(&z, 11, &ZeroDenoiser, &schedule, None),
        Err(Error::StepOutOfRange { .. })
    ));
    assert!(ddim_inverse_step(&z, 11, &ZeroDenoiser, &schedule).is_err());
}

/// Reference integrator: a second, straight-line implementation of the DDIM
/// recursion in the x0-prediction form, independent of the step functions.
fn reference_trajectory(
    z0: &Latent<f64>,
    denoiser: &GmmDenoiser<f64>,
    schedule: &NoiseSchedule<f64>,
) -> Vec<Latent<f64>> {
    let mut latents = vec![z0.clone()];
    let mut z = z0.clone();
    for t in 1..=schedule.steps() {
        let eps = denoiser.predict_noise(&z, t - 1, None).unwrap();
        let a_prev = schedule.alpha_bar(t - 1);
        let a_t = schedule.alpha_bar(t);
        let x0: Vec<f64> = z
            .iter()
            .zip(eps.iter())
            .map(|(zi, ei)| (zi - (1.0 - a_prev).sqrt() * ei) / a_prev.sqrt())
            .collect();
        let next: Vec<f64> = x0
            .iter()
            .zip(eps.iter())
            .map(|(x, ei)| a_t.sqrt() * x + (1.0 - a_t).sqrt() * ei)
            .collect();
        z = vec_latent(&next);
        latents.push(z.clone());
    }
    latents
}

#[test]
fn gmm_inversion_matches_reference_integrator() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let denoiser = GmmDenoiser::new(vec![0.4, 0.6], vec![0.5, 0.8], 3, schedule.clone());
    let z0 = vec_latent(&[0.35]);
    let reference = reference_trajectory(&z0, &denoiser, &schedule);

    let mut z = z0.clone();
    for t in 1..=50 {
        z = ddim_inverse_step(&z, t, &denoiser, &schedule).unwrap();
        for (a, b) in z.iter().zip(reference[t].iter()) {
            assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn gmm_round_trip_reconstructs_z0() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let denoiser = GmmDenoiser::seeded(9, schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z0 = random_latent(8, &mut rng);
    let anchors = invert_all(&z0, &denoiser, &schedule).unwrap();
    let recon = reconstruct_from_anchors(&anchors, &denoiser, &schedule).unwrap();
    let max_err = recon
        .iter()
        .zip(z0.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err < 1e-3, "round-trip error {max_err}");
}

#[test]
fn invert_all_with_single_step_matches_one_inverse_step() {
    let schedule = NoiseSchedule::<f64>::cosine(1);
    let denoiser = GmmDenoiser::seeded(2, schedule.clone());
    let z0 = vec_latent(&[0.1, -0.4]);
    let anchors = invert_all(&z0, &denoiser, &schedule).unwrap();
    assert_eq!(anchors.steps(), 1);
    let single = ddim_inverse_step(&z0, 1, &denoiser, &schedule).unwrap();
    assert_eq!(anchors.get(1), &single);
}

#[test]
fn anchors_are_bit_identical_across_reruns() {
    let schedule = NoiseSchedule::<f64>::cosine(20);
    let denoiser = GmmDenoiser::seeded(4, schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let z0 = random_latent(6, &mut rng);
    let a = invert_all(&z0, &denoiser, &schedule).unwrap();
    let b = invert_all(&z0, &denoiser, &schedule).unwrap();
    for t in 1..=20 {
        assert_eq!(a.get(t), b.get(t));
    }
}

#[test]
fn gmm_single_component_matches_tweedie_form() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let sigma = 0.6;
    let denoiser = GmmDenoiser::new(vec![1.0], vec![sigma], 7, schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let z = random_latent(5, &mut rng);
        let t = rng.random_range(1..=50);
        let a = schedule.alpha_bar(t);
        let v = a * sigma * sigma + 1.0 - a;
        let mean = denoiser.mean(0, 5);
        let eps = denoiser.predict_noise(&z, t, None).unwrap();
        for ((e, zi), mi) in eps.iter().zip(z.iter()).zip(&mean) {
            let expected = (1.0 - a).sqrt() * (zi - a.sqrt() * mi) / v;
            assert_relative_eq!(*e, expected, max_relative = 1e-12);
        }
    }
}

#[test]
fn gmm_noise_prediction_matches_finite_difference_score() {
    let schedule = NoiseSchedule::<f64>::cosine(50);
    let denoiser = GmmDenoiser::seeded(17, schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dim = 4;
    let h = 1e-6;
    for _ in 0..50 {
        let z = random_latent(dim, &mut rng);
        let t = rng.random_range(1..=50);
        let a: f64 = schedule.alpha_bar(t);
        let eps = denoiser.predict_noise(&z, t, None).unwrap();
        for i in 0..dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let score =
                (denoiser.log_density(&zp, t) - denoiser.log_density(&zm, t)) / (2.0 * h);
            let expected = -(1.0 - a).sqrt() * score;
            assert!(
                (eps[i] - expected).abs() < 1e-5,
                "t={t} i={i}: {} vs {expected}",
                eps[i]
            );
        }
    }
}

#[test]
fn untrained_conv_predicts_matching_shape() {
    let denoiser = ConvDenoiser::<f64>::seeded(3);
    let z = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[32, 32, 3]), || 0.25);
    let out = denoiser.predict_noise(&z, 10, None).unwrap();
    assert_eq!(out.shape(), z.shape());
    assert_eq!(
        denoiser.injection_sites(),
        vec![vec![16, 16, 24], vec![32, 32, 12]]
    );
}

#[test]
fn conv_weights_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.bin");
    let denoiser = ConvDenoiser::<f64>::seeded(42);
    denoiser.save(&path).unwrap();
    let loaded = ConvDenoiser::<f64>::load(&path).unwrap();
    for (a, b) in denoiser.weights.views().iter().zip(loaded.weights.views()) {
        assert_eq!(a, &b);
    }
}

#[test]
fn make_toy_backend_rejects_unknown_kind() {
    assert!(matches!(
        make_toy_backend::<f64>("external:sdxl", 0),
        Err(Error::UnknownBackend(_))
    ));
    assert!(make_toy_backend::<f64>("analytic-gmm", 0).is_ok());
}

