//! Command-line surface: `edit`, `preview`, `synth`, `train-toy`, `report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diffusion::{train_toy_denoiser, TrainConfig};
use crate::editor::StartMode;
use crate::metrics::{make_toy_scene, ObjectShape, ToySceneSpec};
use crate::pipeline::{run_clone, RunConfig};
use crate::scene::{load_trajectory, save_image};
use crate::{Image, Real, Result};

#[derive(Parser)]
#[command(
    name = "rsc",
    version,
    about = "Clone robot demonstration trajectories onto novel objects via visual prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit every frame of a trajectory with a visual prompt.
    Edit(EditArgs),
    /// Edit only the first/middle/last frames and write a comparison grid.
    Preview(EditArgs),
    /// Generate a synthetic toy trajectory fixture.
    Synth(SynthArgs),
    /// Train the toy convolutional denoiser and write its weights file.
    TrainToy(TrainArgs),
    /// Compute fidelity metrics for an edited output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct EditArgs {
    /// Input trajectory root (frames/, actions.jsonl, meta.json).
    #[arg(long)]
    trajectory: PathBuf,

    /// Prompt spec JSON (prompt_image, text, source_object_text, placement).
    #[arg(long)]
    prompt: PathBuf,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    /// Config file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Blending decay rate in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,

    /// Number of denoising steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Pose-residual scale; lower values permit cross-shape edits.
    #[arg(long)]
    control_scale: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Denoising backend (analytic-gmm | trained-conv).
    #[arg(long)]
    backend: Option<String>,

    /// Provider suite name.
    #[arg(long)]
    providers: Option<String>,

    /// Weights file for the trained-conv backend.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Parallel frame workers.
    #[arg(long)]
    workers: Option<usize>,

    /// Record per-step diagnostics in the manifest.
    #[arg(long)]
    diagnostics: bool,

    /// Composite preserved pixels from the original after decoding.
    #[arg(long)]
    post_composite: bool,

    /// Resolve auto placement on frame 0 only instead of per frame.
    #[arg(long)]
    ground_once: bool,

    /// Editable-region dilation margin in pixels.
    #[arg(long)]
    dilate_margin: Option<usize>,

    /// Start latent: gaussian | anchor.
    #[arg(long)]
    start_mode: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of frames.
    #[arg(long, default_value_t = 10)]
    frames: usize,

    /// Output trajectory root.
    #[arg(long)]
    out: PathBuf,

    /// Object shape (disk | square | bar).
    #[arg(long, default_value = "square")]
    shape: String,

    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Where to write the weights blob.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 2000)]
    frames: usize,

    #[arg(long, default_value_t = 12)]
    epochs: usize,

    #[arg(long, default_value_t = 16)]
    batch: usize,

    #[arg(long, default_value_t = 2e-3)]
    lr: f64,

    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Original trajectory root.
    #[arg(long)]
    original: PathBuf,

    /// Edited output directory (with masks/).
    #[arg(long)]
    edited: PathBuf,

    /// Report path; defaults to `<edited>/report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn effective_config(args: &EditArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let config_path = args
        .config
        .clone()
        .or_else(|| Path::new("rsc.toml").is_file().then(|| PathBuf::from("rsc.toml")));
    if let Some(path) = config_path {
        let file = RunConfig::load_file(&path)?;
        config.apply_file(&file);
    }
    if let Ok(name) = std::env::var("RSC_BACKEND") {
        if !name.is_empty() {
            config.backend = name;
        }
    }
    if let Some(v) = &args.backend {
        config.backend = v.clone();
    }
    if let Some(v) = &args.providers {
        config.providers = v.clone();
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.control_scale {
        config.control_scale = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if let Some(v) = &args.weights {
        config.weights = Some(v.clone());
    }
    if let Some(v) = args.dilate_margin {
        config.dilate_margin = v;
    }
    if args.diagnostics {
        config.diagnostics = true;
    }
    if args.post_composite {
        config.post_composite = true;
    }
    if args.ground_once {
        config.ground_once = true;
    }
    if let Some(v) = &args.start_mode {
        config.start_mode = match v.as_str() {
            "gaussian" => StartMode::Gaussian,
            "anchor" => StartMode::Anchor,
            other => {
                return Err(crate::Error::Config(format!(
                    "start_mode must be gaussian or anchor, got {other:?}"
                )))
            }
        };
    }
    config.out = args.out.clone();
    Ok(config)
}

fn cmd_edit(args: &EditArgs) -> Result<i32> {
    let config = effective_config(args)?;
    let manifest = run_clone(&args.trajectory, &args.prompt, &config)?;
    let failed = manifest.failed_count();
    let edited = manifest.frames.len() - failed;
    println!(
        "edited {edited}/{} frames -> {}",
        manifest.frames.len(),
        config.out.display()
    );
    if failed > 0 {
        eprintln!("{failed} frames failed; see manifest.json");
        return Ok(1);
    }
    Ok(0)
}

fn cmd_preview(args: &EditArgs) -> Result<i32> {
    let config = effective_config(args)?;
    let traj = load_trajectory::<Real>(&args.trajectory)?;
    let n = traj.len();
    let picks: Vec<usize> = if n <= 3 {
        (0..n).collect()
    } else {
        vec![0, n / 2, n - 1]
    };

    // Build a reduced trajectory holding only the picked frames.
    let mut reduced = traj.clone();
    reduced.frames = picks
        .iter()
        .enumerate()
        .map(|(new_idx, &i)| {
            let mut f = traj.frames[i].clone();
            f.index = new_idx;
            f
        })
        .collect();
    reduced.raw_actions = None;

    let prompt = crate::scene::load_prompt_spec::<Real>(&args.prompt)?;
    let manifest =
        crate::pipeline::run_clone_loaded(&reduced, &prompt, &args.trajectory, &config)?;
    let edited = load_trajectory::<Real>(&config.out)?;

    let originals: Vec<&Image<Real>> = reduced.frames.iter().map(|f| &f.image).collect();
    let edits: Vec<&Image<Real>> = edited.frames.iter().map(|f| &f.image).collect();
    let grid = comparison_grid(&originals, &edits);
    let grid_path = config.out.join("preview.png");
    save_image(&grid, &grid_path)?;
    println!("preview grid -> {}", grid_path.display());
    Ok(if manifest.failed_count() > 0 { 1 } else { 0 })
}

fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let shape = match args.shape.as_str() {
        "disk" => ObjectShape::Disk,
        "square" => ObjectShape::Square,
        "bar" => ObjectShape::Bar,
        other => {
            return Err(crate::Error::Config(format!(
                "shape must be disk, square, or bar, got {other:?}"
            )))
        }
    };
    let spec = ToySceneSpec {
        shape,
        label: shape.as_str().to_string(),
        ..ToySceneSpec::default()
    };
    let traj = make_toy_scene::<Real>(&spec, args.frames, args.seed)?;
    crate::scene::save_trajectory(&traj, &args.out)?;
    println!(
        "synthesized {} frames ({}) -> {}",
        args.frames,
        shape.as_str(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_train_toy(args: &TrainArgs) -> Result<i32> {
    let config = TrainConfig {
        frames: args.frames,
        epochs: args.epochs,
        batch: args.batch,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let (denoiser, report) = train_toy_denoiser::<Real>(&config)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}: loss {loss:.6}", i + 1);
    }
    denoiser.save(&args.out)?;
    println!("weights -> {}", args.out.display());
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Result<i32> {
    let report = crate::pipeline::report_fidelity(&args.original, &args.edited)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| args.edited.join("report.json"));
    std::fs::write(
        &out_path,
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| crate::Error::io(&out_path, e))?;

    // Side-by-side grid of first/middle/last frames.
    let original = load_trajectory::<Real>(&args.original)?;
    let edited = load_trajectory::<Real>(&args.edited)?;
    let n = original.len();
    let picks: Vec<usize> = if n <= 3 {
        (0..n).collect()
    } else {
        vec![0, n / 2, n - 1]
    };
    let originals: Vec<&Image<Real>> = picks.iter().map(|&i| &original.frames[i].image).collect();
    let edits: Vec<&Image<Real>> = picks.iter().map(|&i| &edited.frames[i].image).collect();
    let grid = comparison_grid(&originals, &edits);
    let grid_path = args.edited.join("report_grid.png");
    save_image(&grid, &grid_path)?;

    println!(
        "preserved PSNR mean {:.2} dB (min {:.2}), edited change {:.4}, placement IoU {:.3}",
        report.mean_preserved_psnr,
        report.min_preserved_psnr,
        report.mean_edited_change,
        report.mean_placement_iou
    );
    println!("report -> {}", out_path.display());
    Ok(0)
}

/// Two-row grid: originals on top, edits below, 2-pixel separators.
fn comparison_grid(top: &[&Image<Real>], bottom: &[&Image<Real>]) -> Image<Real> {
    assert!(!top.is_empty() && top.len() == bottom.len());
    let (h, w, _) = top[0].dim();
    let sep = 2;
    let cols = top.len();
    let gw = cols * w + (cols - 1) * sep;
    let gh = 2 * h + sep;
    let mut grid = Image::<Real>::from_elem((gh, gw, 3), 1.0);
    for (col, (o, e)) in top.iter().zip(bottom.iter()).enumerate() {
        let x0 = col * (w + sep);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    grid[(y, x0 + x, c)] = o[(y, x, c)];
                    grid[(h + sep + y, x0 + x, c)] = e[(y, x, c)];
                }
            }
        }
    }
    grid
}

/// Parses argv and runs the requested subcommand. Exit codes: 0 success,
/// 1 runtime failure, 2 usage error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version print to stdout and exit 0; true usage errors
            // print to stderr and exit 2.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Edit(args) => cmd_edit(args),
        Command::Preview(args) => cmd_preview(args),
        Command::Synth(args) => cmd_synth(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}
