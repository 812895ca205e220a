//! Denoising backends: timestep schedule, deterministic DDIM step math,
//! latent anchors, and two self-contained toy backends (a closed-form
//! Gaussian-mixture denoiser and a small trainable convolutional one).

pub mod conv;
pub mod gmm;

use std::sync::Arc;

use ndarray::ArrayD;

use crate::conditions::ConditionBundle;
use crate::{Error, Image, Latent, Result, Scalar};

pub use conv::{train_toy_denoiser, ConvDenoiser, ConvWeights, TrainConfig, TrainReport};
pub use gmm::GmmDenoiser;

/// Default number of denoising steps.
pub const DEFAULT_STEPS: usize = 50;

/// Cumulative signal schedule: `alpha_bar` has length `T + 1`,
/// `alpha_bar[0] = 1`, and is strictly decreasing within `(0, 1]`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<F> {
    alpha_bar: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Cosine schedule discretized through per-step betas capped at 0.999,
    /// which keeps every `alpha_bar` entry strictly positive.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        let s = 0.008;
        let f = |u: f64| {
            let arg = (u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(F::one());
        let mut acc = 1.0f64;
        for i in 0..steps {
            let t0 = i as f64 / steps as f64;
            let t1 = (i + 1) as f64 / steps as f64;
            let beta = (1.0 - f(t1) / f(t0)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(F::from_f64_lossy(acc));
        }
        NoiseSchedule { alpha_bar }
    }

    /// Builds a schedule from raw `alpha_bar` values, enforcing the
    /// endpoint and monotonicity invariants.
    pub fn from_alpha_bar(alpha_bar: Vec<F>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidParameter(
                "alpha_bar needs at least two entries".into(),
            ));
        }
        if alpha_bar[0] != F::one() {
            return Err(Error::InvalidParameter("alpha_bar[0] must be 1".into()));
        }
        for pair in alpha_bar.windows(2) {
            if !(pair[1] < pair[0]) || pair[1] <= F::zero() {
                return Err(Error::InvalidParameter(
                    "alpha_bar must be strictly decreasing within (0, 1]".into(),
                ));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar` at step `t`, `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> F {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Noise predictor behind the editing loop. Implementations may consume the
/// condition bundle (pose residuals at injection sites, masked visual
/// cross-attention) or ignore it entirely.
pub trait Denoiser<F: Scalar>: Send + Sync {
    fn predict_noise(
        &self,
        z: &Latent<F>,
        t: usize,
        conditions: Option<&ConditionBundle<F>>,
    ) -> Result<Latent<F>>;

    /// Activation shapes of the residual injection sites, outermost first.
    fn injection_sites(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

/// Image ↔ latent codec. The toy backends use the identity codec (latents
/// live in pixel space); compressive codecs are a plug-in concern.
pub trait LatentCodec<F: Scalar>: Send + Sync {
    fn encode(&self, image: &Image<F>) -> Latent<F>;
    fn decode(&self, latent: &Latent<F>) -> Result<Image<F>>;
}

/// Identity codec: the latent is the H×W×3 image itself.
#[derive(Debug, Clone, Default)]
pub struct IdentityCodec;

impl<F: Scalar> LatentCodec<F> for IdentityCodec {
    fn encode(&self, image: &Image<F>) -> Latent<F> {
        image.clone().into_dyn()
    }

    fn decode(&self, latent: &Latent<F>) -> Result<Image<F>> {
        latent
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| {
                Error::ShapeMismatch(format!(
                    "identity codec expects an H×W×3 latent, got {:?}",
                    latent.shape()
                ))
            })
    }
}

/// Inverted latents for one frame, indexed by step `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct LatentAnchorSet<F> {
    anchors: Vec<Latent<F>>,
}

impl<F: Scalar> LatentAnchorSet<F> {
    pub fn steps(&self) -> usize {
        self.anchors.len()
    }

    /// Anchor at step `t`, `1 <= t <= T`.
    pub fn get(&self, t: usize) -> &Latent<F> {
        &self.anchors[t - 1]
    }

    /// The terminal inverted latent `z_T`.
    pub fn terminal(&self) -> &Latent<F> {
        self.anchors.last().expect("anchor set is never empty")
    }
}

/// One deterministic DDIM denoising step `t -> t-1`:
/// `x0_hat = (z_t - sqrt(1 - a_t) * eps) / sqrt(a_t)` followed by
/// `z_{t-1} = sqrt(a_{t-1}) * x0_hat + sqrt(1 - a_{t-1}) * eps`, folded into
/// two scalar coefficients so flat schedule segments are exact fixed points.
pub fn ddim_forward_step<F: Scalar>(
    z_t: &Latent<F>,
    t: usize,
    denoiser: &dyn Denoiser<F>,
    schedule: &NoiseSchedule<F>,
    conditions: Option<&ConditionBundle<F>>,
) -> Result<Latent<F>> {
    schedule.check_step(t)?;
    let eps = denoiser.predict_noise(z_t, t, conditions)?;
    if eps.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "denoiser returned {:?} for latent {:?}",
            eps.shape(),
            z_t.shape()
        )));
    }
    let (c_signal, c_noise) = step_coefficients(schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    Ok(apply_step(z_t, &eps, c_signal, c_noise))
}

/// First-order DDIM inversion step `t-1 -> t`, evaluating the noise
/// prediction at the known earlier latent. Inversion runs unconditioned:
/// anchors pin the original image, conditions only steer denoising.
pub fn ddim_inverse_step<F: Scalar>(
    z_prev: &Latent<F>,
    t: usize,
    denoiser: &dyn Denoiser<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Latent<F>> {
    schedule.check_step(t)?;
    let eps = denoiser.predict_noise(z_prev, t - 1, None)?;
    if eps.shape() != z_prev.shape() {
        return Err(Error::ShapeMismatch(format!(
            "denoiser returned {:?} for latent {:?}",
            eps.shape(),
            z_prev.shape()
        )));
    }
    let (c_signal, c_noise) = step_coefficients(schedule.alpha_bar(t - 1), schedule.alpha_bar(t));
    Ok(apply_step(z_prev, &eps, c_signal, c_noise))
}

/// Coefficients of the affine step from signal level `a_from` to `a_to`:
/// `z' = sqrt(a_to / a_from) * z + (sqrt(1 - a_to) - c_signal * sqrt(1 - a_from)) * eps`.
fn step_coefficients<F: Scalar>(a_from: F, a_to: F) -> (F, F) {
    let c_signal = (a_to / a_from).sqrt();
    let c_noise = (F::one() - a_to).sqrt() - c_signal * (F::one() - a_from).sqrt();
    (c_signal, c_noise)
}

fn apply_step<F: Scalar>(z: &Latent<F>, eps: &Latent<F>, c_signal: F, c_noise: F) -> Latent<F> {
    let mut out = z.clone();
    out.zip_mut_with(eps, |zv, &ev| *zv = *zv * c_signal + ev * c_noise);
    out
}

/// Inverts `z_0` through all `T` steps and stores every intermediate latent
/// as an anchor.
pub fn invert_all<F: Scalar>(
    z_0: &Latent<F>,
    denoiser: &dyn Denoiser<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<LatentAnchorSet<F>> {
    let mut anchors = Vec::with_capacity(schedule.steps());
    let mut z = z_0.clone();
    for t in 1..=schedule.steps() {
        z = ddim_inverse_step(&z, t, denoiser, schedule)?;
        anchors.push(z.clone());
    }
    Ok(LatentAnchorSet { anchors })
}

/// Unconditioned reconstruction that re-denoises from the anchors with full
/// anchor blending at every step; measures inversion round-trip error.
pub fn reconstruct_from_anchors<F: Scalar>(
    anchors: &LatentAnchorSet<F>,
    denoiser: &dyn Denoiser<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Latent<F>> {
    let mut z = anchors.terminal().clone();
    for t in (1..=schedule.steps()).rev() {
        z = ddim_forward_step(anchors.get(t), t, denoiser, schedule, None)?;
    }
    Ok(z)
}

/// A denoising backend: noise predictor, codec, and schedule.
#[derive(Clone)]
pub struct Backend<F: Scalar> {
    pub name: String,
    pub denoiser: Arc<dyn Denoiser<F>>,
    pub codec: Arc<dyn LatentCodec<F>>,
    pub schedule: NoiseSchedule<F>,
}

/// Builds one of the bundled toy backends with the default 50-step cosine
/// schedule. Recognized kinds: `"analytic-gmm"` (closed-form mixture
/// denoiser, exact by construction) and `"trained-conv"` (small
/// convolutional predictor; loads weights from `RSC_TOY_WEIGHTS` when set,
/// otherwise starts from seeded random weights). `"external:<name>"`
/// backends are a plug-in concern and are rejected here.
pub fn make_toy_backend<F: Scalar>(kind: &str, seed: u64) -> Result<Backend<F>> {
    make_toy_backend_with_steps(kind, seed, DEFAULT_STEPS)
}

pub fn make_toy_backend_with_steps<F: Scalar>(
    kind: &str,
    seed: u64,
    steps: usize,
) -> Result<Backend<F>> {
    let schedule = NoiseSchedule::cosine(steps);
    match kind {
        "analytic-gmm" => Ok(Backend {
            name: kind.to_string(),
            denoiser: Arc::new(GmmDenoiser::seeded(seed, schedule.clone())),
            codec: Arc::new(IdentityCodec),
            schedule,
        }),
        "trained-conv" => {
            let denoiser = match std::env::var("RSC_TOY_WEIGHTS") {
                Ok(path) if !path.is_empty() => ConvDenoiser::load(path.as_ref())?,
                _ => ConvDenoiser::seeded(seed),
            };
            Ok(Backend {
                name: kind.to_string(),
                denoiser: Arc::new(denoiser),
                codec: Arc::new(IdentityCodec),
                schedule,
            })
        }
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Squared L2 norm helper used by diagnostics and tests.
pub fn l2_norm<F: Scalar>(z: &ArrayD<F>) -> f64 {
    z.iter()
        .map(|&v| {
            let v = v.to_f64().unwrap_or(0.0);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests;
