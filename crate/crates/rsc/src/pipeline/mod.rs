//! End-to-end trajectory cloning: load → per-frame condition generation →
//! per-frame editing → save outputs and manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::conditions::{
    build_condition_bundle, ProviderRegistry, ResamplerWeights, ToyControlAdapter, DEFAULT_BANDS,
    DEFAULT_DILATE_MARGIN, DEFAULT_QUERIES, DEFAULT_WIDTH,
};
use crate::diffusion::{make_toy_backend_with_steps, Backend, ConvDenoiser, DEFAULT_STEPS};
use crate::editor::{edit_frame, EditResult, FusionParams, StartMode};
use crate::metrics::{fidelity_report, FidelityOptions};
use crate::scene::{
    load_prompt_spec, load_trajectory, save_edited_trajectory, save_mask, ConditionIdentity,
    EditManifest, EditParameters, ManifestEntry, Placement, TrajectoryRecord, VisualPromptSpec,
};
use crate::{Error, Image, Mask, Real, Result, Scalar};

/// Run configuration; CLI flags override the config file, which overrides
/// these defaults. `RSC_BACKEND` overrides the backend name unless a flag
/// names one explicitly.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: String,
    pub providers: String,
    pub alpha: f64,
    pub steps: usize,
    pub control_scale: f64,
    pub seed: u64,
    pub workers: usize,
    pub diagnostics: bool,
    pub post_composite: bool,
    pub out: PathBuf,
    pub weights: Option<PathBuf>,
    pub dilate_margin: usize,
    pub ground_once: bool,
    pub start_mode: StartMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: "trained-conv".into(),
            providers: "synthetic".into(),
            alpha: 0.3,
            steps: DEFAULT_STEPS,
            control_scale: 1.0,
            seed: 42,
            workers: 1,
            diagnostics: false,
            post_composite: false,
            out: PathBuf::from("out"),
            weights: None,
            dilate_margin: DEFAULT_DILATE_MARGIN,
            ground_once: false,
            start_mode: StartMode::Gaussian,
        }
    }
}

/// Subset of [`RunConfig`] readable from `rsc.toml`.
#[derive(Debug, Default, Deserialize)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub providers: Option<String>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub control_scale: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub diagnostics: Option<bool>,
    pub post_composite: Option<bool>,
    pub weights: Option<PathBuf>,
    pub dilate_margin: Option<usize>,
    pub ground_once: Option<bool>,
    pub start_mode: Option<StartMode>,
}

impl RunConfig {
    pub fn apply_file(&mut self, file: &FileConfig) {
        if let Some(v) = &file.backend {
            self.backend = v.clone();
        }
        if let Some(v) = &file.providers {
            self.providers = v.clone();
        }
        if let Some(v) = file.alpha {
            self.alpha = v;
        }
        if let Some(v) = file.steps {
            self.steps = v;
        }
        if let Some(v) = file.control_scale {
            self.control_scale = v;
        }
        if let Some(v) = file.seed {
            self.seed = v;
        }
        if let Some(v) = file.workers {
            self.workers = v;
        }
        if let Some(v) = file.diagnostics {
            self.diagnostics = v;
        }
        if let Some(v) = file.post_composite {
            self.post_composite = v;
        }
        if let Some(v) = &file.weights {
            self.weights = Some(v.clone());
        }
        if let Some(v) = file.dilate_margin {
            self.dilate_margin = v;
        }
        if let Some(v) = file.ground_once {
            self.ground_once = v;
        }
        if let Some(v) = file.start_mode {
            self.start_mode = v;
        }
    }

    pub fn load_file(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Builds the backend named in the config, honoring an explicit weights file
/// for the trained-conv backend.
pub fn build_backend(config: &RunConfig) -> Result<Backend<Real>> {
    if config.backend == "trained-conv" {
        if let Some(path) = &config.weights {
            let denoiser = ConvDenoiser::<Real>::load(path)?;
            let mut backend = make_toy_backend_with_steps("trained-conv", config.seed, config.steps)?;
            backend.denoiser = std::sync::Arc::new(denoiser);
            return Ok(backend);
        }
    }
    make_toy_backend_with_steps(&config.backend, config.seed, config.steps)
}

/// Everything shared by the per-frame workers.
struct RunContext<'a, F: Scalar> {
    backend: &'a Backend<F>,
    resampler: ResamplerWeights<F>,
    adapter: ToyControlAdapter<F>,
    suite: std::sync::Arc<dyn crate::conditions::ProviderSuite<F>>,
    config: &'a RunConfig,
    condition_hash: String,
}

/// Per-frame worker output.
struct FrameOutcome<F> {
    index: usize,
    edit: std::result::Result<(EditResult<F>, Mask<F>), Error>,
}

/// Deterministic per-frame seed derivation.
pub fn frame_seed(base: u64, index: usize) -> u64 {
    let mut x = base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 29;
    x
}

fn edit_one<F: Scalar>(
    frame: &crate::scene::FrameRecord<F>,
    ctx: &RunContext<'_, F>,
    prompt: &VisualPromptSpec<F>,
) -> Result<(EditResult<F>, Mask<F>)> {
    let bundle = build_condition_bundle(
        frame,
        prompt,
        ctx.suite.as_ref(),
        &ctx.resampler,
        &ctx.adapter,
        F::from_f64_lossy(ctx.config.control_scale),
        ctx.config.dilate_margin,
    )?;
    let params = FusionParams {
        alpha: F::from_f64_lossy(ctx.config.alpha),
        steps: ctx.config.steps,
        seed: frame_seed(ctx.config.seed, frame.index),
        start_mode: ctx.config.start_mode,
    };
    let mut result =
        edit_frame(frame, &bundle, ctx.backend, &params).map_err(|e| e.at_frame(frame.index))?;
    if ctx.config.post_composite {
        let (h, w, _) = frame.image.dim();
        for y in 0..h {
            for x in 0..w {
                if bundle.c_layout[(y, x)] == F::one() {
                    for c in 0..3 {
                        result.edited_image[(y, x, c)] = frame.image[(y, x, c)];
                    }
                }
            }
        }
    }
    Ok((result, bundle.c_layout))
}

/// Edits every frame of a trajectory with the same prompt. Per-frame
/// failures are recorded in the manifest and skipped; dataset-level problems
/// abort. Returns the manifest (the caller maps failure counts onto exit
/// status).
pub fn run_clone(
    traj_root: &Path,
    prompt_spec_path: &Path,
    config: &RunConfig,
) -> Result<EditManifest> {
    let traj: TrajectoryRecord<Real> = load_trajectory(traj_root)?;
    let prompt: VisualPromptSpec<Real> = load_prompt_spec(prompt_spec_path)?;
    run_clone_loaded(&traj, &prompt, traj_root, config)
}

pub fn run_clone_loaded(
    traj: &TrajectoryRecord<Real>,
    prompt: &VisualPromptSpec<Real>,
    traj_root: &Path,
    config: &RunConfig,
) -> Result<EditManifest> {
    let backend = build_backend(config)?;
    let registry = ProviderRegistry::<Real>::with_builtins(DEFAULT_WIDTH);
    let suite = registry.get(&config.providers)?;
    let resampler =
        ResamplerWeights::<Real>::seeded(DEFAULT_QUERIES, DEFAULT_WIDTH, DEFAULT_BANDS, config.seed);
    let adapter =
        ToyControlAdapter::<Real>::for_sites(backend.denoiser.injection_sites(), config.seed);

    let condition_hash = ConditionIdentity {
        prompt,
        alpha: config.alpha,
        steps: config.steps,
        control_scale: config.control_scale,
        seed: config.seed,
        provider: &config.providers,
        backend: &config.backend,
    }
    .hash();

    // Ground-once mode resolves placement on frame 0 and pins it for the
    // rest of the trajectory.
    let effective_prompt = if config.ground_once && prompt.placement.explicit_box().is_none() {
        let layout = crate::conditions::make_layout_mask(
            &traj.frames[0],
            prompt,
            suite.as_ref(),
            config.dilate_margin,
        )
        .map_err(|e| e.at_frame(0))?;
        let b = layout.resolved_box;
        VisualPromptSpec {
            placement: Placement::Explicit([b.x0, b.y0, b.x1, b.y1]),
            ..prompt.clone()
        }
    } else {
        prompt.clone()
    };

    let ctx = RunContext {
        backend: &backend,
        resampler,
        adapter,
        suite,
        config,
        condition_hash,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<FrameOutcome<Real>> = pool.install(|| {
        traj.frames
            .par_iter()
            .map(|frame| FrameOutcome {
                index: frame.index,
                edit: edit_one(frame, &ctx, &effective_prompt),
            })
            .collect()
    });

    write_outputs(traj, prompt, traj_root, config, &ctx.condition_hash, outcomes)
}

fn write_outputs(
    traj: &TrajectoryRecord<Real>,
    prompt: &VisualPromptSpec<Real>,
    traj_root: &Path,
    config: &RunConfig,
    condition_hash: &str,
    mut outcomes: Vec<FrameOutcome<Real>>,
) -> Result<EditManifest> {
    outcomes.sort_by_key(|o| o.index);

    let out = &config.out;
    let masks_dir = out.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut manifest = EditManifest::new(&traj.source_id, &crate::scene::prompt_hash(prompt));
    let mut edits: Vec<Image<Real>> = Vec::with_capacity(traj.len());
    let fidelity_opts = FidelityOptions::default();

    for outcome in outcomes {
        let index = outcome.index;
        let frame = &traj.frames[index];
        let input_path = traj_root
            .join("frames")
            .join(format!("{index:03}.png"))
            .display()
            .to_string();
        let output_path = out.join("frames").join(format!("{index:03}.png"));
        let mask_path = masks_dir.join(format!("{index:03}.png"));
        let parameters = EditParameters {
            alpha: config.alpha,
            steps: config.steps,
            control_scale: config.control_scale,
            seed: config.seed,
        };
        match outcome.edit {
            Ok((result, mask)) => {
                save_mask(&mask, &mask_path)?;
                let mut metrics = BTreeMap::new();
                let fid = crate::metrics::frame_pair_fidelity(
                    &frame.image,
                    &result.edited_image,
                    &mask,
                    &fidelity_opts,
                );
                metrics.insert("preserved_psnr".to_string(), fid.0);
                metrics.insert("preserved_mae".to_string(), fid.1);
                metrics.insert("edited_change".to_string(), fid.2);
                manifest.frames.push(ManifestEntry {
                    frame_index: index,
                    input_path,
                    output_path: output_path.display().to_string(),
                    mask_path: mask_path.display().to_string(),
                    condition_hash: condition_hash.to_string(),
                    status: "edited".into(),
                    error: None,
                    parameters,
                    metrics,
                    flags: result.flags.clone(),
                    diagnostics: config.diagnostics.then(|| result.diagnostics.clone()),
                });
                edits.push(result.edited_image);
            }
            Err(err) => {
                manifest.frames.push(ManifestEntry {
                    frame_index: index,
                    input_path,
                    output_path: String::new(),
                    mask_path: String::new(),
                    condition_hash: condition_hash.to_string(),
                    status: "failed".into(),
                    error: Some(err.to_string()),
                    parameters,
                    metrics: BTreeMap::new(),
                    flags: Vec::new(),
                    diagnostics: None,
                });
                // Keep the layout mirrored: failed frames fall back to the
                // original image so output indices stay contiguous.
                edits.push(frame.image.clone());
            }
        }
    }

    save_edited_trajectory(traj, &edits, &manifest, out)?;
    Ok(manifest)
}

/// Runs the fidelity report between an input trajectory and an edited output
/// directory, reading masks from `<out>/masks`.
pub fn report_fidelity(
    original_root: &Path,
    edited_root: &Path,
) -> Result<crate::metrics::FidelityReport> {
    let original: TrajectoryRecord<Real> = load_trajectory(original_root)?;
    let edited: TrajectoryRecord<Real> = load_trajectory(edited_root)?;
    let masks_dir = edited_root.join("masks");
    let mut masks = Vec::with_capacity(original.len());
    let mut boxes: Vec<Option<crate::scene::BoxNorm>> = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        let path = masks_dir.join(format!("{i:03}.png"));
        let mask = if path.is_file() {
            load_mask(&path)?
        } else {
            Mask::from_elem(
                (original.frames[i].height(), original.frames[i].width()),
                1.0,
            )
        };
        // The requested box is recovered from the editable region extent.
        boxes.push(editable_box(&mask, original.frames[i].width(), original.frames[i].height()));
        masks.push(mask);
    }
    fidelity_report(&original, &edited, &masks, &boxes, &FidelityOptions::default())
}

fn load_mask(path: &Path) -> Result<Mask<Real>> {
    let image: Image<Real> = crate::scene::load_image(path)?;
    let (h, w, _) = image.dim();
    Ok(Mask::from_shape_fn((h, w), |(y, x)| {
        if image[(y, x, 0)] > 0.5 {
            1.0
        } else {
            0.0
        }
    }))
}

fn editable_box(mask: &Mask<Real>, width: usize, height: usize) -> Option<crate::scene::BoxNorm> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for ((y, x), &v) in mask.indexed_iter() {
        if v == 0.0 {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    crate::scene::BoxNorm::new(
        x0 as f64 / width as f64,
        y0 as f64 / height as f64,
        x1 as f64 / width as f64,
        y1 as f64 / height as f64,
    )
    .ok()
}

#[cfg(test)]
mod tests;
