//! Trajectory data model: frames, prompts, manifests, and dataset layout.
//!
//! On disk a trajectory is `<root>/frames/%03d.png` + `<root>/actions.jsonl`
//! + `<root>/meta.json`. In memory images are `[0, 1]` floats; action records
//! are opaque vectors that every pipeline stage copies through unmodified.

mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editor::StepDiagnostic;
use crate::{Error, Image, Result, Scalar, TOOL_VERSION};

pub use io::{
    load_image, load_prompt_spec, load_trajectory, save_edited_trajectory, save_image, save_mask,
    save_trajectory,
};

/// Axis-aligned box in normalized `[0, 1]` coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxNorm {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxNorm {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoxNorm { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(self.x0) && inside(self.y0) && inside(self.x1) && inside(self.y1)) {
            return Err(Error::DegenerateBox(format!("{self:?} outside [0,1]^2")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::DegenerateBox(format!("{self:?} has empty extent")));
        }
        Ok(())
    }

    /// Converts to a half-open pixel box on a `width`×`height` grid.
    pub fn to_pixels(&self, width: usize, height: usize) -> PixelBox {
        let w = width as f64;
        let h = height as f64;
        PixelBox {
            x0: (self.x0 * w).floor().clamp(0.0, w) as usize,
            y0: (self.y0 * h).floor().clamp(0.0, h) as usize,
            x1: (self.x1 * w).ceil().clamp(0.0, w) as usize,
            y1: (self.y1 * h).ceil().clamp(0.0, h) as usize,
        }
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`; the provider boundary speaks
/// pixels, everything above it speaks normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn to_norm(&self, width: usize, height: usize) -> Result<BoxNorm> {
        BoxNorm::new(
            self.x0 as f64 / width as f64,
            self.y0 as f64 / height as f64,
            self.x1 as f64 / width as f64,
            self.y1 as f64 / height as f64,
        )
    }

    /// Intersection of two pixel boxes; may be empty.
    pub fn intersect(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        }
    }
}

/// One camera frame with its action record and optional scene annotations.
#[derive(Debug, Clone)]
pub struct FrameRecord<F> {
    pub index: usize,
    pub image: Image<F>,
    /// Opaque action vector, copied through unmodified by every edit.
    pub action: Vec<f64>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl<F: Scalar> FrameRecord<F> {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Parses the scene annotation stashed under the `"scene"` metadata key.
    pub fn scene_annotation(&self) -> Option<SceneAnnotation> {
        let value = self.metadata.get(ANNOTATION_KEY)?;
        serde_json::from_value(value.clone()).ok()
    }
}

/// Metadata key under which ground-truth scene annotations live.
pub const ANNOTATION_KEY: &str = "scene";

/// An ordered demonstration: frames plus task context.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord<F> {
    pub frames: Vec<FrameRecord<F>>,
    pub task_text: String,
    pub source_id: String,
    /// Raw bytes of the actions file when loaded from disk, so saving can
    /// reproduce them byte-for-byte.
    pub raw_actions: Option<Vec<u8>>,
}

impl<F: Scalar> TrajectoryRecord<F> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks index contiguity, fixed geometry, and pixel range.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::MalformedDataset("trajectory has no frames".into()));
        }
        let mut issues = Vec::new();
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.index != i {
                issues.push(format!("gap at index {i} (found {})", frame.index));
            }
        }
        if !issues.is_empty() {
            return Err(Error::MalformedDataset(issues.join("; ")));
        }
        let (h, w) = (self.frames[0].height(), self.frames[0].width());
        for frame in &self.frames {
            if frame.height() != h || frame.width() != w {
                return Err(Error::InconsistentGeometry(format!(
                    "frame {} is {}x{}, expected {}x{}",
                    frame.index,
                    frame.height(),
                    frame.width(),
                    h,
                    w
                )));
            }
            let zero = F::zero();
            let one = F::one();
            if frame.image.iter().any(|&v| v < zero || v > one || v != v) {
                return Err(Error::MalformedDataset(format!(
                    "frame {} has pixel values outside [0,1]",
                    frame.index
                )));
            }
        }
        Ok(())
    }
}

/// Where the edit goes: re-grounded from the source object per frame, or an
/// explicit normalized box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placement {
    Auto(String),
    Explicit([f64; 4]),
}

impl Placement {
    pub fn validate(&self) -> Result<()> {
        match self {
            Placement::Auto(s) => {
                if s != "auto" {
                    return Err(Error::InvalidParameter(format!(
                        "placement must be \"auto\" or a box, got {s:?}"
                    )));
                }
                Ok(())
            }
            Placement::Explicit([x0, y0, x1, y1]) => {
                BoxNorm::new(*x0, *y0, *x1, *y1).map(|_| ())
            }
        }
    }

    pub fn explicit_box(&self) -> Option<BoxNorm> {
        match self {
            Placement::Auto(_) => None,
            Placement::Explicit([x0, y0, x1, y1]) => Some(BoxNorm {
                x0: *x0,
                y0: *y0,
                x1: *x1,
                y1: *y1,
            }),
        }
    }
}

/// The visual prompt: a single image of the novel object, a text description,
/// the name of the object it replaces, and a placement directive.
#[derive(Debug, Clone)]
pub struct VisualPromptSpec<F> {
    pub prompt_image: Image<F>,
    pub text: String,
    pub source_object_text: String,
    pub placement: Placement,
}

impl<F: Scalar> VisualPromptSpec<F> {
    pub fn validate(&self) -> Result<()> {
        self.placement.validate()
    }
}

/// Parameters recorded per manifest entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditParameters {
    pub alpha: f64,
    pub steps: usize,
    pub control_scale: f64,
    pub seed: u64,
}

/// Per-frame outcome of an edit run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_index: usize,
    pub input_path: String,
    pub output_path: String,
    pub mask_path: String,
    pub condition_hash: String,
    /// `"edited"` or `"failed"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub parameters: EditParameters,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Vec<StepDiagnostic>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub source_id: String,
    pub prompt_hash: String,
    pub tool_version: String,
}

/// Provenance record for one edited trajectory: one entry per input frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditManifest {
    pub header: ManifestHeader,
    pub frames: Vec<ManifestEntry>,
}

impl EditManifest {
    pub fn new(source_id: &str, prompt_hash: &str) -> Self {
        EditManifest {
            header: ManifestHeader {
                source_id: source_id.to_string(),
                prompt_hash: prompt_hash.to_string(),
                tool_version: TOOL_VERSION.to_string(),
            },
            frames: Vec::new(),
        }
    }

    /// True when the manifest has exactly one entry per frame index `0..n`.
    pub fn covers(&self, n: usize) -> bool {
        if self.frames.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for entry in &self.frames {
            if entry.frame_index >= n || seen[entry.frame_index] {
                return false;
            }
            seen[entry.frame_index] = true;
        }
        true
    }

    pub fn failed_count(&self) -> usize {
        self.frames.iter().filter(|e| e.status == "failed").count()
    }
}

/// Identity of everything that shapes an edit: prompt content, fusion and
/// control parameters, and the provider/backend pair. Two runs get the same
/// hash exactly when all of these agree.
pub struct ConditionIdentity<'a, F> {
    pub prompt: &'a VisualPromptSpec<F>,
    pub alpha: f64,
    pub steps: usize,
    pub control_scale: f64,
    pub seed: u64,
    pub provider: &'a str,
    pub backend: &'a str,
}

impl<F: Scalar> ConditionIdentity<'_, F> {
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"image:");
        hasher.update(quantize_image(self.prompt.prompt_image.view()));
        hasher.update(b"text:");
        hasher.update(self.prompt.text.as_bytes());
        hasher.update(b"source:");
        hasher.update(self.prompt.source_object_text.as_bytes());
        hasher.update(b"placement:");
        match &self.prompt.placement {
            Placement::Auto(_) => hasher.update(b"auto"),
            Placement::Explicit(b) => {
                for v in b {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.update(b"alpha:");
        hasher.update(self.alpha.to_le_bytes());
        hasher.update(b"steps:");
        hasher.update((self.steps as u64).to_le_bytes());
        hasher.update(b"control_scale:");
        hasher.update(self.control_scale.to_le_bytes());
        hasher.update(b"seed:");
        hasher.update(self.seed.to_le_bytes());
        hasher.update(b"provider:");
        hasher.update(self.provider.as_bytes());
        hasher.update(b"backend:");
        hasher.update(self.backend.as_bytes());
        hex_string(&hasher.finalize())
    }
}

/// Hash of the prompt alone, recorded in the manifest header.
pub fn prompt_hash<F: Scalar>(prompt: &VisualPromptSpec<F>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(quantize_image(prompt.prompt_image.view()));
    hasher.update(prompt.text.as_bytes());
    hasher.update(prompt.source_object_text.as_bytes());
    hex_string(&hasher.finalize())
}

fn quantize_image<F: Scalar>(image: ndarray::ArrayView3<F>) -> Vec<u8> {
    image
        .iter()
        .map(|&v| {
            let v: f64 = v.to_f64().unwrap_or(0.0);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Ground-truth annotation for synthetic scenes; the synthetic provider suite
/// reconstructs exact masks and depth from these analytic parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub label: String,
    /// `"disk"`, `"square"`, or `"bar"`.
    pub shape: String,
    pub color: [f64; 3],
    /// Center in pixel coordinates (x, y).
    pub center: [f64; 2],
    /// Radius (disk) or half-extent (square/bar) in pixels.
    pub size: f64,
    /// Tight pixel bounding box, half-open.
    pub box_px: [usize; 4],
}

impl ObjectAnnotation {
    pub fn pixel_box(&self) -> PixelBox {
        PixelBox {
            x0: self.box_px[0],
            y0: self.box_px[1],
            x1: self.box_px[2],
            y1: self.box_px[3],
        }
    }

    /// Rasterizes the exact object silhouette on a `height`×`width` grid.
    pub fn rasterize(&self, height: usize, width: usize) -> ndarray::Array2<bool> {
        let mut mask = ndarray::Array2::from_elem((height, width), false);
        let (cx, cy) = (self.center[0], self.center[1]);
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match self.shape.as_str() {
                    "disk" => dx * dx + dy * dy <= self.size * self.size,
                    "square" => dx.abs() <= self.size && dy.abs() <= self.size,
                    // A bar is twice as wide as it is tall.
                    "bar" => dx.abs() <= 2.0 * self.size && dy.abs() <= 0.5 * self.size,
                    _ => false,
                };
                mask[(y, x)] = inside;
            }
        }
        mask
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthAnnotation {
    /// Depth of the far edge of the ground plane.
    pub base: f64,
    /// Depth increase from top row to bottom row.
    pub span: f64,
    /// Rows `[start, end)` covered by the table surface.
    pub table_rows: [usize; 2],
    pub table_lift: f64,
    /// Depth lift over the object silhouette.
    pub object_height: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_norm_rejects_degenerate() {
        assert!(BoxNorm::new(0.2, 0.2, 0.2, 0.5).is_err());
        assert!(BoxNorm::new(0.5, 0.2, 0.2, 0.5).is_err());
        assert!(BoxNorm::new(-0.1, 0.0, 0.5, 0.5).is_err());
        assert!(BoxNorm::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn pixel_round_trip_covers_box() {
        let b = BoxNorm::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let p = b.to_pixels(32, 32);
        assert_eq!((p.x0, p.y0, p.x1, p.y1), (8, 8, 24, 24));
    }

    #[test]
    fn manifest_coverage() {
        let mut m = EditManifest::new("src", "hash");
        for i in 0..3 {
            m.frames.push(ManifestEntry {
                frame_index: i,
                input_path: String::new(),
                output_path: String::new(),
                mask_path: String::new(),
                condition_hash: String::new(),
                status: "edited".into(),
                error: None,
                parameters: EditParameters {
                    alpha: 0.3,
                    steps: 50,
                    control_scale: 1.0,
                    seed: 0,
                },
                metrics: BTreeMap::new(),
                flags: Vec::new(),
                diagnostics: None,
            });
        }
        assert!(m.covers(3));
        assert!(!m.covers(4));
        m.frames[2].frame_index = 0;
        assert!(!m.covers(3));
    }
}
