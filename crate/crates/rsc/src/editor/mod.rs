//! The frame editor: inverts a frame into latent anchors, then re-denoises
//! while progressively fusing the anchors back in under a linearly decaying
//! mask, injecting pose residuals and masked visual cross-attention.

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionBundle;
use crate::diffusion::{ddim_forward_step, invert_all, Backend, LatentAnchorSet};
use crate::scene::FrameRecord;
use crate::{Error, Latent, Mask, Result, Scalar, Tokens};

/// Where the denoising trajectory starts: fresh Gaussian noise (default) or
/// the terminal inverted anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Gaussian,
    Anchor,
}

/// Fusion parameters for one edit.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams<F> {
    /// Temporal decay rate of the blending mask, in `[0, 1]`.
    pub alpha: F,
    /// Step count; must match the backend schedule.
    pub steps: usize,
    pub seed: u64,
    pub start_mode: StartMode,
}

impl<F: Scalar> FusionParams<F> {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < F::zero() || self.alpha > F::one() {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-step record emitted by the fusion loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub t: usize,
    pub mask_mean: f64,
    pub latent_norm: f64,
}

/// Result of editing one frame.
#[derive(Debug, Clone)]
pub struct EditResult<F> {
    /// Decoded and clamped to `[0, 1]`.
    pub edited_image: crate::Image<F>,
    pub final_latent: Latent<F>,
    /// The fused latent fed into the final denoising step; preserved pixels
    /// here equal the step-1 anchor whenever alpha = 0.
    pub last_fused: Latent<F>,
    pub diagnostics: Vec<StepDiagnostic>,
    pub flags: Vec<String>,
}

/// The linear-decay blending mask at step `t`:
/// `M_t = c_layout * (1 - alpha * (T - t) / T)`, elementwise.
pub fn blend_mask<F: Scalar>(
    t: usize,
    c_layout: &ArrayD<F>,
    alpha: F,
    steps: usize,
) -> Result<ArrayD<F>> {
    if alpha < F::zero() || alpha > F::one() {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if t < 1 || t > steps {
        return Err(Error::StepOutOfRange { t, max: steps });
    }
    let remaining = F::from_f64_lossy((steps - t) as f64) / F::from_f64_lossy(steps as f64);
    let factor = F::one() - alpha * remaining;
    Ok(c_layout.mapv(|v| v * factor))
}

/// Convex blend of anchor and generated latents:
/// `M ⊙ anchor + (1 - M) ⊙ current`. A mask of one lower rank broadcasts
/// across the trailing channel axis.
pub fn fuse_step<F: Scalar>(
    anchor: &Latent<F>,
    current: &Latent<F>,
    mask: &ArrayD<F>,
) -> Result<Latent<F>> {
    if anchor.shape() != current.shape() {
        return Err(Error::ShapeMismatch(format!(
            "anchor {:?} vs current {:?}",
            anchor.shape(),
            current.shape()
        )));
    }
    let fuse = |m: F, a: F, c: F| m * a + (F::one() - m) * c;
    if mask.shape() == anchor.shape() {
        let mut out = anchor.clone();
        ndarray::Zip::from(&mut out)
            .and(current)
            .and(mask)
            .for_each(|o, &c, &m| *o = fuse(m, *o, c));
        return Ok(out);
    }
    let spatial_rank = anchor.ndim().saturating_sub(1);
    if mask.ndim() == spatial_rank && mask.shape() == &anchor.shape()[..spatial_rank] {
        let channels = *anchor.shape().last().unwrap_or(&1);
        let mut out = anchor.as_standard_layout().into_owned();
        let cur = current.as_standard_layout().into_owned();
        {
            let out_s = out.as_slice_mut().expect("standard layout");
            let cur_s = cur.as_slice().expect("standard layout");
            for (flat, &m) in mask.iter().enumerate() {
                for c in 0..channels {
                    let idx = flat * channels + c;
                    out_s[idx] = fuse(m, out_s[idx], cur_s[idx]);
                }
            }
        }
        return Ok(out);
    }
    Err(Error::ShapeMismatch(format!(
        "mask {:?} does not broadcast over latent {:?}",
        mask.shape(),
        anchor.shape()
    )))
}

/// Projection weights of a masked cross-attention block: queries from site
/// activations, keys/values from visual tokens.
#[derive(Debug, Clone)]
pub struct CrossAttentionWeights<F> {
    /// `channels × attn_dim`
    pub w_q: Array2<F>,
    /// `token_dim × attn_dim`
    pub w_k: Array2<F>,
    /// `token_dim × attn_dim`
    pub w_v: Array2<F>,
    /// `attn_dim × channels`
    pub w_out: Array2<F>,
}

impl<F: Scalar> CrossAttentionWeights<F> {
    pub fn seeded(channels: usize, token_dim: usize, attn_dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7861_7474);
        let mut mat = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                F::from_f64_lossy(rng.random_range(-1.0..1.0) * scale)
            })
        };
        CrossAttentionWeights {
            w_q: mat(channels, attn_dim),
            w_k: mat(token_dim, attn_dim),
            w_v: mat(token_dim, attn_dim),
            w_out: mat(attn_dim, channels),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.ncols()
    }
}

/// Downsamples a full-resolution layout mask onto an activation grid.
/// Block-nearest with "editable wins": a cell is editable if any covered
/// pixel is editable.
pub fn downsample_editable<F: Scalar>(c_layout: &Mask<F>, gh: usize, gw: usize) -> Array2<bool> {
    let (h, w) = c_layout.dim();
    let mut editable = Array2::from_elem((gh, gw), false);
    for ((y, x), &v) in c_layout.indexed_iter() {
        if v == F::zero() {
            let ty = (y * gh / h).min(gh - 1);
            let tx = (x * gw / w).min(gw - 1);
            editable[(ty, tx)] = true;
        }
    }
    editable
}

/// Masked cross-attention residual over visual tokens: queries come from the
/// site activations, keys/values from `c_visual`; only editable cells (after
/// nearest-neighbor downsampling of the layout mask) attend, and fully
/// masked rows contribute an exactly-zero residual.
pub fn masked_visual_attention<F: Scalar>(
    activations: &Array3<F>,
    c_visual: &Tokens<F>,
    c_layout: &Mask<F>,
    weights: &CrossAttentionWeights<F>,
) -> Result<Array3<F>> {
    let (gh, gw, channels) = activations.dim();
    if weights.w_q.nrows() != channels {
        return Err(Error::WidthMismatch(format!(
            "activations have {channels} channels, w_q expects {}",
            weights.w_q.nrows()
        )));
    }
    let mut residual = Array3::<F>::zeros((gh, gw, channels));
    if c_visual.nrows() == 0 {
        return Ok(residual);
    }
    if c_visual.ncols() != weights.w_k.nrows() {
        return Err(Error::WidthMismatch(format!(
            "tokens have width {}, w_k expects {}",
            c_visual.ncols(),
            weights.w_k.nrows()
        )));
    }

    let editable = downsample_editable(c_layout, gh, gw);
    let cells: Vec<(usize, usize)> = editable
        .indexed_iter()
        .filter_map(|((y, x), &e)| e.then_some((y, x)))
        .collect();
    if cells.is_empty() {
        return Ok(residual);
    }

    let mut queries_in = Array2::<F>::zeros((cells.len(), channels));
    for (row, &(y, x)) in cells.iter().enumerate() {
        for c in 0..channels {
            queries_in[(row, c)] = activations[(y, x, c)];
        }
    }
    let queries = queries_in.dot(&weights.w_q);
    let keys = c_visual.dot(&weights.w_k);
    let values = c_visual.dot(&weights.w_v);

    let scale = F::one() / F::from_f64_lossy((weights.attn_dim() as f64).sqrt());
    let mut logits = queries.dot(&keys.t());
    logits.mapv_inplace(|v| v * scale);
    let attn = crate::conditions::softmax_rows(&logits);
    let out = attn.dot(&values).dot(&weights.w_out);

    for (row, &(y, x)) in cells.iter().enumerate() {
        for c in 0..channels {
            residual[(y, x, c)] = out[(row, c)];
        }
    }
    Ok(residual)
}

/// Adds a pose residual to a site activation, elementwise.
pub fn inject_pose<F: Scalar>(
    activations: &Array3<F>,
    residual: &Latent<F>,
) -> Result<Array3<F>> {
    if residual.shape() != activations.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pose residual {:?} vs site activation {:?}",
            residual.shape(),
            activations.shape()
        )));
    }
    let mut out = activations.clone();
    for (o, &r) in out.iter_mut().zip(residual.iter()) {
        *o = *o + r;
    }
    Ok(out)
}

/// Runs the fusion/denoise loop from step `T` down to 1. The blend happens
/// before each denoise step; editable pixels (mask 0) are never overwritten
/// by anchors.
pub fn fuse_denoise_loop<F: Scalar>(
    anchors: &LatentAnchorSet<F>,
    c_layout_latent: &ArrayD<F>,
    params: &FusionParams<F>,
    backend: &Backend<F>,
    conditions: Option<&ConditionBundle<F>>,
) -> Result<(Latent<F>, Latent<F>, Vec<StepDiagnostic>)> {
    params.validate()?;
    let steps = backend.schedule.steps();
    if params.steps != steps {
        return Err(Error::InvalidParameter(format!(
            "params.steps = {} but schedule has {steps} steps",
            params.steps
        )));
    }
    if anchors.steps() != steps {
        return Err(Error::InvalidParameter(format!(
            "anchor set covers {} steps, schedule has {steps}",
            anchors.steps()
        )));
    }

    let mut z = match params.start_mode {
        StartMode::Anchor => anchors.terminal().clone(),
        StartMode::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let shape = anchors.terminal().raw_dim();
            ArrayD::from_shape_simple_fn(shape, || {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::from_f64_lossy(v)
            })
        }
    };

    let mut diagnostics = Vec::with_capacity(steps);
    let mut last_fused = z.clone();
    for t in (1..=steps).rev() {
        let mask_t = blend_mask(t, c_layout_latent, params.alpha, steps)?;
        let fused = fuse_step(anchors.get(t), &z, &mask_t)?;
        diagnostics.push(StepDiagnostic {
            t,
            mask_mean: mean_f64(&mask_t),
            latent_norm: crate::diffusion::l2_norm(&z),
        });
        if t == 1 {
            last_fused = fused.clone();
        }
        z = ddim_forward_step(&fused, t, backend.denoiser.as_ref(), &backend.schedule, conditions)?;
    }
    Ok((z, last_fused, diagnostics))
}

fn mean_f64<F: Scalar>(arr: &ArrayD<F>) -> f64 {
    if arr.is_empty() {
        return 0.0;
    }
    arr.iter().map(|&v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / arr.len() as f64
}

/// Edits one frame: encode, invert into anchors, denoise under progressive
/// masked fusion with pose and visual injection, decode, clamp.
/// Deterministic for fixed inputs and seed. An all-preserve mask is allowed
/// but flagged `"no-editable-region"`.
pub fn edit_frame<F: Scalar>(
    frame: &FrameRecord<F>,
    bundle: &ConditionBundle<F>,
    backend: &Backend<F>,
    params: &FusionParams<F>,
) -> Result<EditResult<F>> {
    params.validate()?;
    bundle.validate(false)?;
    let (h, w) = (frame.height(), frame.width());
    if bundle.c_layout.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "layout mask {:?} vs frame {h}x{w}",
            bundle.c_layout.dim()
        )));
    }

    let mut flags = bundle.flags.clone();
    if bundle.editable_count() == 0 {
        flags.push("no-editable-region".to_string());
    }

    let z_0 = backend.codec.encode(&frame.image);
    let anchors = invert_all(&z_0, backend.denoiser.as_ref(), &backend.schedule)?;

    let mask_latent = bundle.c_layout.clone().into_dyn();
    let (final_latent, last_fused, diagnostics) =
        fuse_denoise_loop(&anchors, &mask_latent, params, backend, Some(bundle))?;

    let mut edited_image = backend.codec.decode(&final_latent)?;
    edited_image.mapv_inplace(|v| v.max(F::zero()).min(F::one()));

    Ok(EditResult {
        edited_image,
        final_latent,
        last_fused,
        diagnostics,
        flags,
    })
}

#[cfg(test)]
mod tests;
