//! Dataset layout I/O: PNG frames, JSON-lines actions, JSON metadata.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::Deserialize;

use crate::{Error, Image, Mask, Result, Scalar};

use super::{
    EditManifest, FrameRecord, Placement, TrajectoryRecord, VisualPromptSpec, ANNOTATION_KEY,
};

#[derive(Debug, Deserialize)]
struct MetaFile {
    #[serde(default)]
    task_text: String,
    #[serde(default)]
    source_id: String,
    #[serde(default)]
    annotations: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct ActionLine {
    index: usize,
    action: Vec<f64>,
}

/// Loads a trajectory from `<root>/frames/%03d.png` + `actions.jsonl` +
/// `meta.json`, validating contiguity, geometry, and pixel range.
pub fn load_trajectory<F: Scalar>(root: &Path) -> Result<TrajectoryRecord<F>> {
    let frames_dir = root.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::MalformedDataset(format!(
            "missing frames directory at {}",
            frames_dir.display()
        )));
    }

    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    let entries = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&frames_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        match stem.parse::<usize>() {
            Ok(idx) => indexed.push((idx, path)),
            Err(_) => {
                return Err(Error::MalformedDataset(format!(
                    "frame file {} is not an index",
                    path.display()
                )))
            }
        }
    }
    if indexed.is_empty() {
        return Err(Error::MalformedDataset("no frames found".into()));
    }
    indexed.sort_by_key(|(idx, _)| *idx);

    let mut gaps = Vec::new();
    for (pos, (idx, _)) in indexed.iter().enumerate() {
        if *idx != pos {
            gaps.push(format!("gap at index {pos} (found {idx})"));
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MalformedDataset(gaps.join("; ")));
    }

    let actions_path = root.join("actions.jsonl");
    let raw_actions = fs::read(&actions_path).map_err(|_| {
        Error::MalformedDataset(format!("missing actions file at {}", actions_path.display()))
    })?;
    let mut actions: Vec<Vec<f64>> = vec![Vec::new(); indexed.len()];
    let mut seen = vec![false; indexed.len()];
    let text = String::from_utf8_lossy(&raw_actions);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ActionLine = serde_json::from_str(line)
            .map_err(|e| Error::json(&actions_path, format!("line {}: {e}", lineno + 1)))?;
        if record.index >= indexed.len() || seen[record.index] {
            return Err(Error::MalformedDataset(format!(
                "action record index {} invalid or duplicated",
                record.index
            )));
        }
        seen[record.index] = true;
        actions[record.index] = record.action;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::MalformedDataset(
            "action records do not cover all frames".into(),
        ));
    }

    let meta_path = root.join("meta.json");
    let meta: MetaFile = if meta_path.is_file() {
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(&meta_path, e))?
    } else {
        MetaFile {
            task_text: String::new(),
            source_id: root
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("trajectory")
                .to_string(),
            annotations: serde_json::Map::new(),
        }
    };

    let mut frames = Vec::with_capacity(indexed.len());
    for ((idx, path), action) in indexed.into_iter().zip(actions) {
        let image = load_image::<F>(&path)?;
        let mut metadata = serde_json::Map::new();
        if let Some(ann) = meta.annotations.get(&idx.to_string()) {
            metadata.insert(ANNOTATION_KEY.to_string(), ann.clone());
        }
        frames.push(FrameRecord {
            index: idx,
            image,
            action,
            metadata,
        });
    }

    let traj = TrajectoryRecord {
        frames,
        task_text: meta.task_text,
        source_id: meta.source_id,
        raw_actions: Some(raw_actions),
    };
    traj.validate()?;
    Ok(traj)
}

/// Writes a trajectory in the input layout (frames/, actions.jsonl,
/// meta.json) with the images taken from `images`.
fn write_layout<F: Scalar>(
    traj: &TrajectoryRecord<F>,
    images: &[Image<F>],
    out: &Path,
) -> Result<()> {
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, image) in images.iter().enumerate() {
        save_image(image, &frames_dir.join(format!("{i:03}.png")))?;
    }

    let actions_path = out.join("actions.jsonl");
    let bytes = match &traj.raw_actions {
        Some(raw) => raw.clone(),
        None => serialize_actions(traj),
    };
    fs::write(&actions_path, bytes).map_err(|e| Error::io(&actions_path, e))?;

    let mut annotations = serde_json::Map::new();
    for frame in &traj.frames {
        if let Some(ann) = frame.metadata.get(ANNOTATION_KEY) {
            annotations.insert(frame.index.to_string(), ann.clone());
        }
    }
    let meta = serde_json::json!({
        "task_text": traj.task_text,
        "source_id": traj.source_id,
        "annotations": annotations,
    });
    let meta_path = out.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&meta_path, e))
}

/// Saves a trajectory as an input fixture (no manifest).
pub fn save_trajectory<F: Scalar>(traj: &TrajectoryRecord<F>, out: &Path) -> Result<()> {
    let images: Vec<Image<F>> = traj.frames.iter().map(|f| f.image.clone()).collect();
    write_layout(traj, &images, out)
}

/// Writes the edited frames, copies actions byte-identical, mirrors the
/// metadata, and writes the manifest.
pub fn save_edited_trajectory<F: Scalar>(
    traj: &TrajectoryRecord<F>,
    edits: &[Image<F>],
    manifest: &EditManifest,
    out: &Path,
) -> Result<()> {
    if edits.len() != traj.len() {
        return Err(Error::LengthMismatch {
            expected: traj.len(),
            got: edits.len(),
        });
    }
    if !manifest.covers(traj.len()) {
        return Err(Error::MalformedDataset(
            "manifest entries do not cover all frames".into(),
        ));
    }
    write_layout(traj, edits, out)?;
    let manifest_path = out.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&manifest_path, e))
}

pub(crate) fn serialize_actions<F: Scalar>(traj: &TrajectoryRecord<F>) -> Vec<u8> {
    let mut out = Vec::new();
    for frame in &traj.frames {
        let line = serde_json::json!({"index": frame.index, "action": frame.action});
        out.extend_from_slice(line.to_string().as_bytes());
        out.push(b'\n');
    }
    out
}

/// Loads an 8-bit PNG as an H×W×3 array of `[0, 1]` floats.
pub fn load_image<F: Scalar>(path: &Path) -> Result<Image<F>> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::DecodeFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = reader
        .decode()
        .map_err(|e| Error::DecodeFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = F::from_f64_lossy(1.0 / 255.0);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] =
                F::from_f64_lossy(pixel.0[c] as f64) * scale;
        }
    }
    Ok(out)
}

/// Saves an H×W×3 `[0, 1]` array as an 8-bit PNG (values rounded).
pub fn save_image<F: Scalar>(image: &Image<F>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = image[(y, x, c)].to_f64().unwrap_or(0.0);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| Error::DecodeFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Saves a layout mask as an 8-bit grayscale PNG: 255 = preserve, 0 = editable.
pub fn save_mask<F: Scalar>(mask: &Mask<F>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    let half = F::from_f64_lossy(0.5);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[(y, x)] > half { 255u8 } else { 0u8 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::DecodeFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Deserialize)]
struct PromptFile {
    prompt_image: String,
    text: String,
    source_object_text: String,
    placement: Placement,
}

/// Loads a prompt spec JSON; the image path is resolved relative to the file.
pub fn load_prompt_spec<F: Scalar>(path: &Path) -> Result<VisualPromptSpec<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: PromptFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    let image_path = {
        let p = PathBuf::from(&file.prompt_image);
        if p.is_absolute() {
            p
        } else {
            path.parent().unwrap_or(Path::new(".")).join(p)
        }
    };
    let spec = VisualPromptSpec {
        prompt_image: load_image(&image_path)?,
        text: file.text,
        source_object_text: file.source_object_text,
        placement: file.placement,
    };
    spec.validate()?;
    Ok(spec)
}
