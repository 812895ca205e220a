//! Condition generation: the triple of control signals driving one frame
//! edit — visual tokens from the grounding resampler, a binary layout mask,
//! and depth-derived pose residuals scaled by the control knob.

pub mod providers;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{BoxNorm, FrameRecord, Placement, VisualPromptSpec};
use crate::{Error, Latent, Mask, Result, Scalar, Tokens};

pub use providers::{ProviderRegistry, ProviderSuite, SyntheticSuite};

/// Default number of Fourier frequency bands for box encoding.
pub const DEFAULT_BANDS: usize = 8;

/// Default query-token count and feature width of the toy resampler.
pub const DEFAULT_QUERIES: usize = 4;
pub const DEFAULT_WIDTH: usize = 32;

/// Default dilation margin (pixels) applied to the editable region.
pub const DEFAULT_DILATE_MARGIN: usize = 4;

/// Fourier-encoded bounding box: `[sin(2^k pi c), cos(2^k pi c)]` for
/// `k = 0..L-1` over each of the four coordinates, coordinate-major.
#[derive(Debug, Clone)]
pub struct GroundingEmbedding<F> {
    pub box_norm: BoxNorm,
    pub features: Array1<F>,
}

pub fn fourier_encode_box<F: Scalar>(
    box_norm: &BoxNorm,
    bands: usize,
) -> Result<GroundingEmbedding<F>> {
    box_norm.validate()?;
    if bands < 1 {
        return Err(Error::InvalidParameter("bands must be >= 1".into()));
    }
    let coords = [box_norm.x0, box_norm.y0, box_norm.x1, box_norm.y1];
    let mut features = Vec::with_capacity(4 * 2 * bands);
    for c in coords {
        for k in 0..bands {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * c;
            features.push(F::from_f64_lossy(arg.sin()));
            features.push(F::from_f64_lossy(arg.cos()));
        }
    }
    Ok(GroundingEmbedding {
        box_norm: *box_norm,
        features: Array1::from_vec(features),
    })
}

/// Seeded projection weights of the grounding resampler: query
/// initialization from pooled text plus box features, the three attention
/// projections, and the output projection.
#[derive(Debug, Clone)]
pub struct ResamplerWeights<F> {
    /// `(n_q * d) × (d + 4*2*bands)` — maps `concat(mean(f_t), f_g)` to the
    /// initial query matrix.
    pub query_init: Array2<F>,
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub output_proj: Array2<F>,
    pub n_q: usize,
    pub d: usize,
    pub bands: usize,
}

impl<F: Scalar> ResamplerWeights<F> {
    pub fn seeded(n_q: usize, d: usize, bands: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265_7361);
        let init_cols = d + 4 * 2 * bands;
        let mut mat = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                F::from_f64_lossy(rng.random_range(-1.0..1.0) * scale)
            })
        };
        ResamplerWeights {
            query_init: mat(n_q * d, init_cols),
            w_q: mat(d, d),
            w_k: mat(d, d),
            w_v: mat(d, d),
            output_proj: mat(d, d),
            n_q,
            d,
            bands,
        }
    }
}

/// Fuses visual tokens with queries initialized from the text embedding and
/// the Fourier-encoded box: a single attention block over the concatenated
/// key/value set `[f_v, f_q]`, followed by the output projection.
pub fn grounding_resampler<F: Scalar>(
    f_v: &Tokens<F>,
    f_t: &Tokens<F>,
    f_g: &GroundingEmbedding<F>,
    w: &ResamplerWeights<F>,
) -> Result<Tokens<F>> {
    grounding_resampler_detailed(f_v, f_t, f_g, w).map(|(out, _)| out)
}

/// Same as [`grounding_resampler`] but also returns the attention rows,
/// which are probability vectors over the key set.
pub fn grounding_resampler_detailed<F: Scalar>(
    f_v: &Tokens<F>,
    f_t: &Tokens<F>,
    f_g: &GroundingEmbedding<F>,
    w: &ResamplerWeights<F>,
) -> Result<(Tokens<F>, Array2<F>)> {
    let d = w.d;
    if f_v.nrows() > 0 && f_v.ncols() != d {
        return Err(Error::WidthMismatch(format!(
            "visual tokens have width {}, resampler expects {d}",
            f_v.ncols()
        )));
    }
    if f_t.nrows() > 0 && f_t.ncols() != d {
        return Err(Error::WidthMismatch(format!(
            "text tokens have width {}, resampler expects {d}",
            f_t.ncols()
        )));
    }
    let feat_len = 4 * 2 * w.bands;
    if f_g.features.len() != feat_len {
        return Err(Error::WidthMismatch(format!(
            "grounding features have length {}, expected {feat_len}",
            f_g.features.len()
        )));
    }

    // Query init: pooled text embedding (mean over tokens) ++ box features.
    let mut init_input = Array1::zeros(d + feat_len);
    if f_t.nrows() > 0 {
        let pooled = f_t.mean_axis(Axis(0)).expect("nonempty rows");
        init_input.slice_mut(ndarray::s![..d]).assign(&pooled);
    }
    init_input
        .slice_mut(ndarray::s![d..])
        .assign(&f_g.features);
    let flat = w.query_init.dot(&init_input);
    let f_q = Array2::from_shape_vec((w.n_q, d), flat.to_vec()).expect("n_q*d values");

    // Keys and values over the concatenated token set [f_v, f_q].
    let n_kv = f_v.nrows() + w.n_q;
    let mut kv = Array2::zeros((n_kv, d));
    if f_v.nrows() > 0 {
        kv.slice_mut(ndarray::s![..f_v.nrows(), ..]).assign(f_v);
    }
    kv.slice_mut(ndarray::s![f_v.nrows().., ..]).assign(&f_q);

    let queries = f_q.dot(&w.w_q);
    let keys = kv.dot(&w.w_k);
    let values = kv.dot(&w.w_v);

    let scale = F::one() / F::from_f64_lossy((d as f64).sqrt());
    let mut logits = queries.dot(&keys.t());
    logits.mapv_inplace(|v| v * scale);
    let attn = softmax_rows(&logits);

    let out = attn.dot(&values).dot(&w.output_proj);
    Ok((out, attn))
}

pub(crate) fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Layout-mask result: binary mask (1 = preserve, 0 = editable), the box the
/// placement resolved to, and whether segmentation fell back to the box
/// rectangle.
#[derive(Debug, Clone)]
pub struct LayoutOutcome<F> {
    pub mask: Mask<F>,
    pub resolved_box: BoxNorm,
    pub box_fallback: bool,
}

/// Builds the layout condition for a frame: resolve placement (explicit box,
/// or grounding of the source object), segment it, dilate the editable
/// region by `margin` pixels.
pub fn make_layout_mask<F: Scalar>(
    frame: &FrameRecord<F>,
    spec: &VisualPromptSpec<F>,
    suite: &dyn ProviderSuite<F>,
    margin: usize,
) -> Result<LayoutOutcome<F>> {
    let (h, w) = (frame.height(), frame.width());
    let resolved = match &spec.placement {
        Placement::Explicit(_) => spec.placement.explicit_box().expect("explicit"),
        Placement::Auto(_) => {
            let hits = suite.ground(frame, &spec.source_object_text)?;
            let best = hits
                .into_iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .ok_or_else(|| Error::ObjectNotFound(spec.source_object_text.clone()))?;
            best.0.to_norm(w, h)?
        }
    };
    resolved.validate()?;
    let px_box = resolved.to_pixels(w, h);
    if px_box.is_empty() {
        return Err(Error::DegenerateBox(format!(
            "placement box {resolved:?} covers no pixels at {w}x{h}"
        )));
    }

    let seg = suite.segment(frame, &px_box)?;
    if seg.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "segmentation is {:?}, frame is {h}x{w}",
            seg.dim()
        )));
    }
    let mut editable = seg;
    let box_fallback = !editable.iter().any(|&v| v);
    if box_fallback {
        for y in px_box.y0..px_box.y1.min(h) {
            for x in px_box.x0..px_box.x1.min(w) {
                editable[(y, x)] = true;
            }
        }
    }
    let editable = dilate(&editable, margin);

    let mut mask = Mask::from_elem((h, w), F::one());
    for ((y, x), &e) in editable.indexed_iter() {
        if e {
            mask[(y, x)] = F::zero();
        }
    }
    Ok(LayoutOutcome {
        mask,
        resolved_box: resolved,
        box_fallback,
    })
}

/// Chebyshev dilation: a pixel becomes set if any pixel within `margin`
/// (max of |dx|, |dy|) is set.
pub fn dilate(mask: &Array2<bool>, margin: usize) -> Array2<bool> {
    if margin == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let m = margin as isize;
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let y = y as isize;
        let x = x as isize;
        for dy in -m..=m {
            for dx in -m..=m {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[(ny as usize, nx as usize)] = true;
                }
            }
        }
    }
    out
}

/// Maps a depth map to one residual tensor per denoiser injection site.
pub trait ControlAdapter<F: Scalar>: Send + Sync {
    fn site_shapes(&self) -> &[Vec<usize>];
    fn residuals(&self, depth: &Array2<F>) -> Result<Vec<Latent<F>>>;
}

/// Toy control adapter: per site, a local averaging of the depth map onto
/// the site grid followed by a seeded linear channel map. Linear in its
/// input, so residuals scale exactly with the control knob.
pub struct ToyControlAdapter<F> {
    shapes: Vec<Vec<usize>>,
    channel_maps: Vec<Array1<F>>,
}

/// Channel-map magnitude of the toy adapter; sized so that at control scale
/// 1 the depth silhouette dominates the denoiser's conditioned response.
pub const DEFAULT_ADAPTER_GAIN: f64 = 3.0;

impl<F: Scalar> ToyControlAdapter<F> {
    pub fn new(shapes: Vec<Vec<usize>>, seed: u64, gain: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6164_6170);
        let channel_maps = shapes
            .iter()
            .map(|shape| {
                let channels = *shape.last().unwrap_or(&1);
                Array1::from_shape_fn(channels, |_| {
                    F::from_f64_lossy(rng.random_range(-1.0..1.0) * gain)
                })
            })
            .collect();
        ToyControlAdapter {
            shapes,
            channel_maps,
        }
    }

    /// Adapter matched to a denoiser's introspected injection sites.
    pub fn for_sites(shapes: Vec<Vec<usize>>, seed: u64) -> Self {
        Self::new(shapes, seed, DEFAULT_ADAPTER_GAIN)
    }
}

impl<F: Scalar> ControlAdapter<F> for ToyControlAdapter<F> {
    fn site_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    fn residuals(&self, depth: &Array2<F>) -> Result<Vec<Latent<F>>> {
        let mut out = Vec::with_capacity(self.shapes.len());
        for (shape, map) in self.shapes.iter().zip(&self.channel_maps) {
            if shape.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "toy adapter expects H×W×C sites, got {shape:?}"
                )));
            }
            let (sh, sw, sc) = (shape[0], shape[1], shape[2]);
            let pooled = pool_mean(depth, sh, sw);
            let mut res = ndarray::Array3::<F>::zeros((sh, sw, sc));
            for y in 0..sh {
                for x in 0..sw {
                    for c in 0..sc {
                        res[(y, x, c)] = pooled[(y, x)] * map[c];
                    }
                }
            }
            out.push(res.into_dyn());
        }
        Ok(out)
    }
}

/// Block-mean pooling of an H×W map onto a coarser grid.
pub(crate) fn pool_mean<F: Scalar>(src: &Array2<F>, th: usize, tw: usize) -> Array2<F> {
    let (h, w) = src.dim();
    let mut sums = Array2::<F>::zeros((th, tw));
    let mut counts = Array2::<usize>::zeros((th, tw));
    for ((y, x), &v) in src.indexed_iter() {
        let ty = (y * th / h).min(th - 1);
        let tx = (x * tw / w).min(tw - 1);
        sums[(ty, tx)] = sums[(ty, tx)] + v;
        counts[(ty, tx)] += 1;
    }
    for ((y, x), s) in sums.indexed_iter_mut() {
        let n = counts[(y, x)].max(1);
        *s = *s / F::from_f64_lossy(n as f64);
    }
    sums
}

/// Builds the pose condition: provider depth map, normalized in `[0, 1]`,
/// mapped through the control adapter and scaled by `control_scale`.
pub fn make_pose_condition<F: Scalar>(
    frame: &FrameRecord<F>,
    suite: &dyn ProviderSuite<F>,
    adapter: &dyn ControlAdapter<F>,
    control_scale: F,
) -> Result<Vec<Latent<F>>> {
    if control_scale < F::zero() {
        return Err(Error::InvalidParameter(
            "control_scale must be >= 0".into(),
        ));
    }
    let depth = suite.depth(frame)?;
    let mut residuals = adapter.residuals(&depth)?;
    for r in &mut residuals {
        r.mapv_inplace(|v| v * control_scale);
    }
    Ok(residuals)
}

/// The control-signal triple for one frame edit.
#[derive(Debug, Clone)]
pub struct ConditionBundle<F> {
    /// `n_q × d` visual tokens; zero rows disable visual injection.
    pub c_visual: Tokens<F>,
    /// Binary H×W mask, 1 = preserve, 0 = editable.
    pub c_layout: Mask<F>,
    /// One residual per denoiser injection site; empty disables pose
    /// injection.
    pub c_pose: Vec<Latent<F>>,
    pub control_scale: F,
    pub flags: Vec<String>,
}

impl<F: Scalar> ConditionBundle<F> {
    /// Checks the bundle invariants: binary layout, non-negative scale, and
    /// (when `require_editable`) a non-empty editable region.
    pub fn validate(&self, require_editable: bool) -> Result<()> {
        for &v in self.c_layout.iter() {
            if v != F::zero() && v != F::one() {
                return Err(Error::InvalidParameter(
                    "layout mask must be exactly binary".into(),
                ));
            }
        }
        if self.control_scale < F::zero() {
            return Err(Error::InvalidParameter(
                "control_scale must be >= 0".into(),
            ));
        }
        if require_editable && !self.c_layout.iter().any(|&v| v == F::zero()) {
            return Err(Error::InvalidParameter(
                "layout mask has no editable pixels".into(),
            ));
        }
        if self.control_scale == F::zero() {
            for r in &self.c_pose {
                if r.iter().any(|&v| v != F::zero()) {
                    return Err(Error::InvalidParameter(
                        "control_scale 0 requires all-zero pose residuals".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn editable_count(&self) -> usize {
        self.c_layout.iter().filter(|&&v| v == F::zero()).count()
    }
}

/// Runs the full condition generator for one frame. Deterministic under a
/// fixed provider suite and seeded weights; errors carry the frame index.
#[allow(clippy::too_many_arguments)]
pub fn build_condition_bundle<F: Scalar>(
    frame: &FrameRecord<F>,
    spec: &VisualPromptSpec<F>,
    suite: &dyn ProviderSuite<F>,
    weights: &ResamplerWeights<F>,
    adapter: &dyn ControlAdapter<F>,
    control_scale: F,
    dilate_margin: usize,
) -> Result<ConditionBundle<F>> {
    let build = || -> Result<ConditionBundle<F>> {
        let layout = make_layout_mask(frame, spec, suite, dilate_margin)?;
        let f_v = suite.embed_image(&spec.prompt_image)?;
        let f_t = suite.embed_text(&spec.text)?;
        let f_g = fourier_encode_box(&layout.resolved_box, weights.bands)?;
        let c_visual = grounding_resampler(&f_v, &f_t, &f_g, weights)?;
        let c_pose = make_pose_condition(frame, suite, adapter, control_scale)?;
        let mut flags = Vec::new();
        if layout.box_fallback {
            flags.push("box-fallback".to_string());
        }
        let bundle = ConditionBundle {
            c_visual,
            c_layout: layout.mask,
            c_pose,
            control_scale,
            flags,
        };
        bundle.validate(true)?;
        Ok(bundle)
    };
    build().map_err(|e| e.at_frame(frame.index))
}
