//! Synthetic scene fixtures and desk-scale fidelity metrics: preserved-region
//! PSNR/MAE, edited-region change magnitude, boundary-gradient score, and
//! placement IoU of the change support against the requested box.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{
    BoxNorm, DepthAnnotation, FrameRecord, ObjectAnnotation, SceneAnnotation, TrajectoryRecord,
    ANNOTATION_KEY,
};
use crate::{Error, Image, Mask, Result, Scalar};

/// Object silhouette families supported by the toy renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Disk,
    Square,
    /// Twice as wide as it is tall.
    Bar,
}

impl ObjectShape {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectShape::Disk => "disk",
            ObjectShape::Square => "square",
            ObjectShape::Bar => "bar",
        }
    }

    /// Half-extents (x, y) for a nominal size parameter.
    fn half_extents(&self, size: f64) -> (f64, f64) {
        match self {
            ObjectShape::Disk => (size, size),
            ObjectShape::Square => (size, size),
            ObjectShape::Bar => (2.0 * size, 0.5 * size),
        }
    }
}

/// Parameters of a rendered toy scene: fixed background and table band, one
/// colored object moving linearly across the frames, and analytic depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    pub table_rows: [usize; 2],
    pub table_color: [f64; 3],
    pub shape: ObjectShape,
    pub object_color: [f64; 3],
    pub label: String,
    /// Object center (x, y) in the first and last frame; intermediate frames
    /// interpolate linearly.
    pub start_center: [f64; 2],
    pub end_center: [f64; 2],
    /// Radius (disk) or half-extent (square/bar) in pixels.
    pub size_px: f64,
    pub depth: DepthAnnotation,
}

/// Background/table constants shared by every toy scene; training and tests
/// rely on this context being fixed.
pub const SCENE_BACKGROUND: [f64; 3] = [0.82, 0.80, 0.78];
pub const SCENE_TABLE_ROWS: [usize; 2] = [18, 32];
pub const SCENE_TABLE_COLOR: [f64; 3] = [0.38, 0.30, 0.24];
pub const SCENE_DEPTH: DepthAnnotation = DepthAnnotation {
    base: 0.2,
    span: 0.35,
    table_rows: SCENE_TABLE_ROWS,
    table_lift: 0.1,
    object_height: 0.35,
};

impl Default for ToySceneSpec {
    fn default() -> Self {
        ToySceneSpec {
            height: 32,
            width: 32,
            background: SCENE_BACKGROUND,
            table_rows: SCENE_TABLE_ROWS,
            table_color: SCENE_TABLE_COLOR,
            shape: ObjectShape::Square,
            object_color: [0.15, 0.25, 0.80],
            label: "square".into(),
            start_center: [10.0, 22.0],
            end_center: [22.0, 22.0],
            size_px: 5.0,
            depth: SCENE_DEPTH,
        }
    }
}

impl ToySceneSpec {
    /// Object center at frame `i` of `n`.
    pub fn center_at(&self, i: usize, n: usize) -> (f64, f64) {
        if n <= 1 {
            return (self.start_center[0], self.start_center[1]);
        }
        let s = i as f64 / (n - 1) as f64;
        (
            self.start_center[0] + (self.end_center[0] - self.start_center[0]) * s,
            self.start_center[1] + (self.end_center[1] - self.start_center[1]) * s,
        )
    }

    fn annotation_at(&self, i: usize, n: usize) -> ObjectAnnotation {
        let (cx, cy) = self.center_at(i, n);
        let (ex, ey) = self.shape.half_extents(self.size_px);
        let x0 = (cx - ex).floor().max(0.0) as usize;
        let y0 = (cy - ey).floor().max(0.0) as usize;
        let x1 = (cx + ex).ceil().min(self.width as f64) as usize;
        let y1 = (cy + ey).ceil().min(self.height as f64) as usize;
        ObjectAnnotation {
            label: self.label.clone(),
            shape: self.shape.as_str().to_string(),
            color: self.object_color,
            center: [cx, cy],
            size: self.size_px,
            box_px: [x0, y0, x1, y1],
        }
    }

    fn check_bounds(&self, i: usize, n: usize) -> Result<()> {
        let (cx, cy) = self.center_at(i, n);
        let (ex, ey) = self.shape.half_extents(self.size_px);
        if cx - ex < 0.0
            || cy - ey < 0.0
            || cx + ex > self.width as f64
            || cy + ey > self.height as f64
        {
            return Err(Error::InvalidParameter(format!(
                "object out of bounds at frame {i}: center ({cx:.1}, {cy:.1}), extents ({ex:.1}, {ey:.1})"
            )));
        }
        Ok(())
    }
}

/// Renders one frame of a toy scene, quantized to the 8-bit grid so PNG
/// round trips are lossless. The seed drives a ±1/255 background speckle.
pub fn render_scene_frame<F: Scalar>(
    spec: &ToySceneSpec,
    i: usize,
    n: usize,
    seed: u64,
) -> Result<(Image<F>, ObjectAnnotation)> {
    spec.check_bounds(i, n)?;
    let ann = spec.annotation_at(i, n);
    let silhouette = ann.rasterize(spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
    let mut image = Image::<F>::zeros((spec.height, spec.width, 3));
    for y in 0..spec.height {
        for x in 0..spec.width {
            let base = if silhouette[(y, x)] {
                spec.object_color
            } else if y >= spec.table_rows[0] && y < spec.table_rows[1] {
                spec.table_color
            } else {
                spec.background
            };
            let speckle: i32 = if silhouette[(y, x)] {
                0
            } else {
                rng.random_range(-1..=1)
            };
            for c in 0..3 {
                let q = (base[c] * 255.0).round() as i32 + speckle;
                let q = q.clamp(0, 255);
                image[(y, x, c)] = F::from_f64_lossy(q as f64 / 255.0);
            }
        }
    }
    Ok((image, ann))
}

/// Builds a deterministic synthetic trajectory with exact per-frame
/// annotations (consumed by the synthetic provider suite).
pub fn make_toy_scene<F: Scalar>(
    spec: &ToySceneSpec,
    frames: usize,
    seed: u64,
) -> Result<TrajectoryRecord<F>> {
    if frames < 1 {
        return Err(Error::InvalidParameter("frames must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(frames);
    for i in 0..frames {
        let (image, ann) = render_scene_frame::<F>(spec, i, frames, seed)?;
        let annotation = SceneAnnotation {
            objects: vec![ann.clone()],
            depth: Some(spec.depth.clone()),
        };
        let mut metadata = serde_json::Map::new();
        metadata.insert(
            ANNOTATION_KEY.to_string(),
            serde_json::to_value(&annotation).expect("annotation serializes"),
        );
        records.push(FrameRecord {
            index: i,
            image,
            // Action vector: normalized gripper target tracking the object.
            action: vec![
                ann.center[0] / spec.width as f64,
                ann.center[1] / spec.height as f64,
                0.0,
            ],
            metadata,
        });
    }
    let traj = TrajectoryRecord {
        frames: records,
        task_text: format!("pick up the {}", spec.label),
        source_id: format!("toy-{seed}"),
        raw_actions: None,
    };
    traj.validate()?;
    Ok(traj)
}

/// A random scene over the fixed background/table context: random shape,
/// color family, position, and size. Used to generate training data.
pub fn random_scene_spec(rng: &mut ChaCha8Rng) -> ToySceneSpec {
    const PALETTE: [[f64; 3]; 5] = [
        [0.80, 0.20, 0.15],
        [0.15, 0.25, 0.80],
        [0.15, 0.65, 0.25],
        [0.85, 0.75, 0.20],
        [0.55, 0.20, 0.70],
    ];
    let shape = match rng.random_range(0..3u32) {
        0 => ObjectShape::Disk,
        1 => ObjectShape::Square,
        _ => ObjectShape::Bar,
    };
    let mut color = PALETTE[rng.random_range(0..PALETTE.len())];
    for c in color.iter_mut() {
        *c = (*c + rng.random_range(-0.08..0.08)).clamp(0.05, 0.95);
    }
    let size = rng.random_range(3.5..6.0);
    let (ex, ey) = shape.half_extents(size);
    let spec = ToySceneSpec::default();
    let cx = rng.random_range((ex + 1.0)..(spec.width as f64 - ex - 1.0));
    let cy_lo = (ey + 1.0).max(10.0);
    let cy_hi = (spec.height as f64 - ey - 1.0).min(28.0);
    let cy = rng.random_range(cy_lo..cy_hi.max(cy_lo + 0.1));
    let label = format!("{}", shape.as_str());
    ToySceneSpec {
        shape,
        object_color: color,
        label,
        start_center: [cx, cy],
        end_center: [cx, cy],
        size_px: size,
        ..spec
    }
}

/// Per-frame fidelity numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameFidelity {
    pub frame_index: usize,
    /// PSNR over pixels strictly outside the dilated editable region, capped
    /// at 99 dB.
    pub preserved_psnr: f64,
    pub preserved_mae: f64,
    /// Mean abs change inside the editable region.
    pub edited_change: f64,
    /// Mean gradient magnitude along the mask contour band, edited minus
    /// original; positive values indicate seams.
    pub boundary_gradient: f64,
    pub placement_iou: f64,
    /// False when no pixel change exceeded the support threshold (IoU is
    /// then reported as 0).
    pub iou_defined: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub frames: Vec<FrameFidelity>,
    pub mean_preserved_psnr: f64,
    pub min_preserved_psnr: f64,
    pub mean_preserved_mae: f64,
    pub mean_edited_change: f64,
    pub mean_boundary_gradient: f64,
    pub mean_placement_iou: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FidelityOptions {
    /// Pixel-change threshold defining the change support.
    pub change_threshold: f64,
    /// Extra dilation of the editable region excluded from preserved-region
    /// metrics.
    pub exclusion_margin: usize,
    /// Half-width of the contour band for the boundary-gradient score.
    pub band_width: usize,
}

impl Default for FidelityOptions {
    fn default() -> Self {
        FidelityOptions {
            change_threshold: 0.05,
            exclusion_margin: 4,
            band_width: 2,
        }
    }
}

/// PSNR cap keeping aggregates finite when images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// Compares an edited trajectory against the original. `masks[i]` is the
/// layout mask used for frame `i` (1 = preserve); `boxes[i]` is the
/// requested placement box, when known, for the placement-IoU metric.
pub fn fidelity_report<F: Scalar>(
    original: &TrajectoryRecord<F>,
    edited: &TrajectoryRecord<F>,
    masks: &[Mask<F>],
    boxes: &[Option<BoxNorm>],
    opts: &FidelityOptions,
) -> Result<FidelityReport> {
    if original.len() != edited.len() {
        return Err(Error::InconsistentGeometry(format!(
            "frame counts differ: {} vs {}",
            original.len(),
            edited.len()
        )));
    }
    if masks.len() != original.len() || boxes.len() != original.len() {
        return Err(Error::LengthMismatch {
            expected: original.len(),
            got: masks.len().min(boxes.len()),
        });
    }

    let mut frames = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        let orig = &original.frames[i].image;
        let edit = &edited.frames[i].image;
        if orig.dim() != edit.dim() {
            return Err(Error::InconsistentGeometry(format!(
                "frame {i}: {:?} vs {:?}",
                orig.dim(),
                edit.dim()
            )));
        }
        if masks[i].dim() != (orig.dim().0, orig.dim().1) {
            return Err(Error::InconsistentGeometry(format!(
                "frame {i}: mask {:?} vs image {:?}",
                masks[i].dim(),
                orig.dim()
            )));
        }
        frames.push(frame_fidelity(i, orig, edit, &masks[i], &boxes[i], opts));
    }

    let n = frames.len() as f64;
    let mean = |f: &dyn Fn(&FrameFidelity) -> f64| frames.iter().map(|x| f(x)).sum::<f64>() / n;
    let iou_frames: Vec<f64> = frames
        .iter()
        .filter(|f| f.iou_defined)
        .map(|f| f.placement_iou)
        .collect();
    Ok(FidelityReport {
        mean_preserved_psnr: mean(&|f| f.preserved_psnr),
        min_preserved_psnr: frames
            .iter()
            .map(|f| f.preserved_psnr)
            .fold(f64::INFINITY, f64::min),
        mean_preserved_mae: mean(&|f| f.preserved_mae),
        mean_edited_change: mean(&|f| f.edited_change),
        mean_boundary_gradient: mean(&|f| f.boundary_gradient),
        mean_placement_iou: if iou_frames.is_empty() {
            0.0
        } else {
            iou_frames.iter().sum::<f64>() / iou_frames.len() as f64
        },
        frames,
    })
}

fn frame_fidelity<F: Scalar>(
    index: usize,
    original: &Image<F>,
    edited: &Image<F>,
    mask: &Mask<F>,
    requested: &Option<BoxNorm>,
    opts: &FidelityOptions,
) -> FrameFidelity {
    let (h, w, _) = original.dim();
    let editable = Array2::from_shape_fn((h, w), |(y, x)| mask[(y, x)] == F::zero());
    let excluded = crate::conditions::dilate(&editable, opts.exclusion_margin);

    // Preserved-region PSNR/MAE: pixels inside the dilated editable region
    // are never read.
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if excluded[(y, x)] {
                continue;
            }
            for c in 0..3 {
                let d = original[(y, x, c)].to_f64().unwrap_or(0.0)
                    - edited[(y, x, c)].to_f64().unwrap_or(0.0);
                se += d * d;
                ae += d.abs();
                count += 1;
            }
        }
    }
    let (preserved_psnr, preserved_mae) = if count == 0 {
        (PSNR_CAP, 0.0)
    } else {
        let mse = se / count as f64;
        let psnr = if mse <= 1e-12 {
            PSNR_CAP
        } else {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
        };
        (psnr, ae / count as f64)
    };

    // Change magnitude inside the editable region.
    let mut change = 0.0;
    let mut editable_count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !editable[(y, x)] {
                continue;
            }
            for c in 0..3 {
                change += (original[(y, x, c)].to_f64().unwrap_or(0.0)
                    - edited[(y, x, c)].to_f64().unwrap_or(0.0))
                .abs();
                editable_count += 1;
            }
        }
    }
    let edited_change = if editable_count == 0 {
        0.0
    } else {
        change / editable_count as f64
    };

    // Boundary-gradient score over the contour band.
    let band = contour_band(&editable, opts.band_width);
    let boundary_gradient = band_gradient(edited, &band) - band_gradient(original, &band);

    // Placement IoU: largest connected component of the change support
    // against the requested box.
    let support = change_support(original, edited, opts.change_threshold);
    let (placement_iou, iou_defined) = match (requested, support) {
        (Some(bx), Some(component)) => {
            let rect = bx.to_pixels(w, h);
            let mut inter = 0usize;
            let mut union = 0usize;
            for y in 0..h {
                for x in 0..w {
                    let in_rect = y >= rect.y0 && y < rect.y1 && x >= rect.x0 && x < rect.x1;
                    let in_comp = component[(y, x)];
                    if in_rect && in_comp {
                        inter += 1;
                    }
                    if in_rect || in_comp {
                        union += 1;
                    }
                }
            }
            if union == 0 {
                (0.0, false)
            } else {
                (inter as f64 / union as f64, true)
            }
        }
        _ => (0.0, false),
    };

    FrameFidelity {
        frame_index: index,
        preserved_psnr,
        preserved_mae,
        edited_change,
        boundary_gradient,
        placement_iou,
        iou_defined,
    }
}

/// Quick per-frame numbers for manifest entries:
/// (preserved PSNR, preserved MAE, edited-region change).
pub fn frame_pair_fidelity<F: Scalar>(
    original: &Image<F>,
    edited: &Image<F>,
    mask: &Mask<F>,
    opts: &FidelityOptions,
) -> (f64, f64, f64) {
    let fid = frame_fidelity(0, original, edited, mask, &None, opts);
    (fid.preserved_psnr, fid.preserved_mae, fid.edited_change)
}

/// Largest 4-connected component of pixels whose mean-channel change exceeds
/// the threshold; `None` when nothing changed.
pub fn change_support<F: Scalar>(
    original: &Image<F>,
    edited: &Image<F>,
    threshold: f64,
) -> Option<Array2<bool>> {
    let (h, w, _) = original.dim();
    let changed = Array2::from_shape_fn((h, w), |(y, x)| {
        let d: f64 = (0..3)
            .map(|c| {
                (original[(y, x, c)].to_f64().unwrap_or(0.0)
                    - edited[(y, x, c)].to_f64().unwrap_or(0.0))
                .abs()
            })
            .sum::<f64>()
            / 3.0;
        d > threshold
    });
    largest_component(&changed)
}

fn largest_component(map: &Array2<bool>) -> Option<Array2<bool>> {
    let (h, w) = map.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 1u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !map[(y, x)] || labels[(y, x)] != 0 {
                continue;
            }
            let label = next;
            next += 1;
            let mut size = 0usize;
            stack.push((y, x));
            labels[(y, x)] = label;
            while let Some((cy, cx)) = stack.pop() {
                size += 1;
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && map[(ny, nx)] && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = label;
                        stack.push((ny, nx));
                    }
                }
            }
            if size > best_size {
                best_size = size;
                best_label = label;
            }
        }
    }
    if best_size == 0 {
        return None;
    }
    Some(Array2::from_shape_fn((h, w), |(y, x)| {
        labels[(y, x)] == best_label
    }))
}

/// Pixels within `band_width` (Chebyshev) of the editable/preserve contour.
fn contour_band(editable: &Array2<bool>, band_width: usize) -> Array2<bool> {
    let (h, w) = editable.dim();
    let mut contour = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if !editable[(y, x)] {
                continue;
            }
            let neighbors = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            let on_edge = neighbors
                .iter()
                .any(|&(ny, nx)| ny >= h || nx >= w || !editable[(ny, nx)]);
            if on_edge {
                contour[(y, x)] = true;
            }
        }
    }
    crate::conditions::dilate(&contour, band_width)
}

fn band_gradient<F: Scalar>(image: &Image<F>, band: &Array2<bool>) -> f64 {
    let (h, w, _) = image.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !band[(y, x)] {
                continue;
            }
            for c in 0..3 {
                let v = image[(y, x, c)].to_f64().unwrap_or(0.0);
                let gx = if x + 1 < w {
                    image[(y, x + 1, c)].to_f64().unwrap_or(0.0) - v
                } else {
                    0.0
                };
                let gy = if y + 1 < h {
                    image[(y + 1, x, c)].to_f64().unwrap_or(0.0) - v
                } else {
                    0.0
                };
                total += (gx * gx + gy * gy).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
