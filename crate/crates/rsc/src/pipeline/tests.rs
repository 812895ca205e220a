use std::fs;

use crate::metrics::{make_toy_scene, ToySceneSpec};
use crate::scene::{load_trajectory, save_image, save_trajectory};
use crate::Real;

use super::*;

fn write_fixture(dir: &Path, frames: usize) {
    let traj = make_toy_scene::<Real>(&ToySceneSpec::default(), frames, 7).unwrap();
    save_trajectory(&traj, dir).unwrap();
}

fn write_prompt(dir: &Path, placement: &str) -> PathBuf {
    let prompt_traj = make_toy_scene::<Real>(
        &ToySceneSpec {
            shape: crate::metrics::ObjectShape::Bar,
            label: "bar".into(),
            object_color: [0.85, 0.2, 0.15],
            start_center: [16.0, 22.0],
            end_center: [16.0, 22.0],
            size_px: 4.0,
            ..ToySceneSpec::default()
        },
        1,
        3,
    )
    .unwrap();
    let image_path = dir.join("prompt.png");
    save_image(&prompt_traj.frames[0].image, &image_path).unwrap();
    let spec = serde_json::json!({
        "prompt_image": "prompt.png",
        "text": "a red bar",
        "source_object_text": "square",
        "placement": serde_json::from_str::<serde_json::Value>(placement).unwrap(),
    });
    let path = dir.join("prompt.json");
    fs::write(&path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    path
}

fn quick_config(out: PathBuf) -> RunConfig {
    RunConfig {
        backend: "trained-conv".into(),
        steps: 10,
        seed: 9,
        out,
        ..RunConfig::default()
    }
}

#[test]
fn run_clone_is_deterministic_across_reruns_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    write_fixture(&traj_dir, 4);
    let prompt = write_prompt(dir.path(), "\"auto\"");

    let out_a = dir.path().join("out_a");
    let out_b = dir.path().join("out_b");
    let mut config_a = quick_config(out_a.clone());
    let mut config_b = quick_config(out_b.clone());
    config_a.workers = 1;
    config_b.workers = 2;

    let ma = run_clone(&traj_dir, &prompt, &config_a).unwrap();
    let mb = run_clone(&traj_dir, &prompt, &config_b).unwrap();
    assert_eq!(ma.failed_count(), 0);
    assert_eq!(mb.failed_count(), 0);
    for i in 0..4 {
        let a = fs::read(out_a.join("frames").join(format!("{i:03}.png"))).unwrap();
        let b = fs::read(out_b.join("frames").join(format!("{i:03}.png"))).unwrap();
        assert_eq!(a, b, "frame {i} differs between worker counts");
    }
    let actions_in = fs::read(traj_dir.join("actions.jsonl")).unwrap();
    let actions_out = fs::read(out_a.join("actions.jsonl")).unwrap();
    assert_eq!(actions_in, actions_out);
}

#[test]
fn run_clone_records_failures_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    write_fixture(&traj_dir, 3);
    let prompt_path = write_prompt(dir.path(), "\"auto\"");
    // Rewrite the prompt to ground an object that never appears.
    let text = fs::read_to_string(&prompt_path).unwrap();
    let patched = text.replace("\"square\"", "\"teapot\"");
    fs::write(&prompt_path, patched).unwrap();

    let config = quick_config(dir.path().join("out"));
    let manifest = run_clone(&traj_dir, &prompt_path, &config).unwrap();
    assert_eq!(manifest.frames.len(), 3);
    assert_eq!(manifest.failed_count(), 3);
    for entry in &manifest.frames {
        assert_eq!(entry.status, "failed");
        assert!(entry.error.as_deref().unwrap_or("").contains("object not found"));
    }
}

#[test]
fn manifest_covers_all_frames_and_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    write_fixture(&traj_dir, 3);
    let prompt = write_prompt(dir.path(), "[0.3, 0.5, 0.7, 0.9]");

    let config = quick_config(dir.path().join("out1"));
    let m1 = run_clone(&traj_dir, &prompt, &config).unwrap();
    assert!(m1.covers(3));
    let config2 = RunConfig {
        out: dir.path().join("out2"),
        ..config.clone()
    };
    let m2 = run_clone(&traj_dir, &prompt, &config2).unwrap();
    assert_eq!(
        m1.frames[0].condition_hash,
        m2.frames[0].condition_hash
    );
    let config3 = RunConfig {
        out: dir.path().join("out3"),
        alpha: 0.9,
        ..config.clone()
    };
    let m3 = run_clone(&traj_dir, &prompt, &config3).unwrap();
    assert_ne!(
        m1.frames[0].condition_hash,
        m3.frames[0].condition_hash
    );
}

#[test]
fn condition_hash_tracks_every_identity_field() {
    let traj = make_toy_scene::<Real>(&ToySceneSpec::default(), 1, 7).unwrap();
    let prompt = crate::scene::VisualPromptSpec {
        prompt_image: traj.frames[0].image.clone(),
        text: "a red bar".into(),
        source_object_text: "square".into(),
        placement: crate::scene::Placement::Auto("auto".into()),
    };
    let base = ConditionIdentity {
        prompt: &prompt,
        alpha: 0.3,
        steps: 50,
        control_scale: 1.0,
        seed: 42,
        provider: "synthetic",
        backend: "trained-conv",
    }
    .hash();

    let rehash = |f: &dyn Fn(&mut ConditionIdentity<Real>)| {
        let mut id = ConditionIdentity {
            prompt: &prompt,
            alpha: 0.3,
            steps: 50,
            control_scale: 1.0,
            seed: 42,
            provider: "synthetic",
            backend: "trained-conv",
        };
        f(&mut id);
        id.hash()
    };
    assert_eq!(base, rehash(&|_| {}));
    assert_ne!(base, rehash(&|id| id.alpha = 0.31));
    assert_ne!(base, rehash(&|id| id.steps = 49));
    assert_ne!(base, rehash(&|id| id.control_scale = 0.5));
    assert_ne!(base, rehash(&|id| id.seed = 43));
    assert_ne!(base, rehash(&|id| id.provider = "other"));
    assert_ne!(base, rehash(&|id| id.backend = "analytic-gmm"));

    let mut prompt2 = prompt.clone();
    prompt2.text = "a blue bar".into();
    let changed_text = ConditionIdentity {
        prompt: &prompt2,
        alpha: 0.3,
        steps: 50,
        control_scale: 1.0,
        seed: 42,
        provider: "synthetic",
        backend: "trained-conv",
    }
    .hash();
    assert_ne!(base, changed_text);

    let mut prompt3 = prompt.clone();
    prompt3.placement = crate::scene::Placement::Explicit([0.1, 0.1, 0.9, 0.9]);
    let changed_placement = ConditionIdentity {
        prompt: &prompt3,
        alpha: 0.3,
        steps: 50,
        control_scale: 1.0,
        seed: 42,
        provider: "synthetic",
        backend: "trained-conv",
    }
    .hash();
    assert_ne!(base, changed_placement);

    let mut prompt4 = prompt.clone();
    prompt4.prompt_image[(0, 0, 0)] = 0.123;
    let changed_image = ConditionIdentity {
        prompt: &prompt4,
        alpha: 0.3,
        steps: 50,
        control_scale: 1.0,
        seed: 42,
        provider: "synthetic",
        backend: "trained-conv",
    }
    .hash();
    assert_ne!(base, changed_image);
}

#[test]
fn report_runs_over_edited_output() {
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    write_fixture(&traj_dir, 3);
    let prompt = write_prompt(dir.path(), "\"auto\"");
    let out = dir.path().join("out");
    let config = quick_config(out.clone());
    run_clone(&traj_dir, &prompt, &config).unwrap();
    let report = report_fidelity(&traj_dir, &out).unwrap();
    assert_eq!(report.frames.len(), 3);
    assert!(report.frames.iter().all(|f| f.preserved_psnr.is_finite()));
}

#[test]
fn failed_frames_keep_actions_and_layout_intact() {
    let dir = tempfile::tempdir().unwrap();
    let traj_dir = dir.path().join("traj");
    write_fixture(&traj_dir, 2);
    let prompt_path = write_prompt(dir.path(), "\"auto\"");
    let text = fs::read_to_string(&prompt_path).unwrap();
    fs::write(&prompt_path, text.replace("\"square\"", "\"teapot\"")).unwrap();

    let out = dir.path().join("out");
    let config = quick_config(out.clone());
    let manifest = run_clone(&traj_dir, &prompt_path, &config).unwrap();
    assert_eq!(manifest.failed_count(), 2);
    let reloaded = load_trajectory::<Real>(&out).unwrap();
    let original = load_trajectory::<Real>(&traj_dir).unwrap();
    for (a, b) in reloaded.frames.iter().zip(&original.frames) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.action, b.action);
    }
}

#[test]
fn frame_seed_is_deterministic_and_spreads() {
    assert_eq!(frame_seed(42, 0), frame_seed(42, 0));
    assert_ne!(frame_seed(42, 0), frame_seed(42, 1));
    assert_ne!(frame_seed(42, 0), frame_seed(43, 0));
}
