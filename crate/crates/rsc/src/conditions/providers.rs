//! Provider plug-in contract and the deterministic synthetic suite.
//!
//! A provider suite bundles the five perception callables the condition
//! generator needs: grounding, segmentation, depth, and image/text
//! embedding. Real models plug in by registering a suite under a name; all
//! bundled tests run against the `"synthetic"` suite, which reconstructs
//! exact answers from the analytic scene annotations carried in frame
//! metadata.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{FrameRecord, PixelBox};
use crate::{Error, Image, Result, Scalar, Tokens};

/// The five perception callables behind condition generation. Implementations
/// must be callable from parallel frame workers.
pub trait ProviderSuite<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// True when identical inputs always produce identical outputs.
    fn deterministic(&self) -> bool {
        true
    }

    /// Detects objects matching `text`; returns pixel boxes with scores.
    fn ground(&self, frame: &FrameRecord<F>, text: &str) -> Result<Vec<(PixelBox, f64)>>;

    /// Segments the object inside `region`; true = object.
    fn segment(&self, frame: &FrameRecord<F>, region: &PixelBox) -> Result<Array2<bool>>;

    /// Relative depth map, values in `[0, 1]` after normalization.
    fn depth(&self, frame: &FrameRecord<F>) -> Result<Array2<F>>;

    /// Token matrix (`n_v × d`) for an image.
    fn embed_image(&self, image: &Image<F>) -> Result<Tokens<F>>;

    /// Token matrix (`n_t × d`) for a text string.
    fn embed_text(&self, text: &str) -> Result<Tokens<F>>;
}

/// Named lookup of provider suites; `"synthetic"` is built in, external
/// suites register at startup.
pub struct ProviderRegistry<F: Scalar> {
    suites: BTreeMap<String, Arc<dyn ProviderSuite<F>>>,
}

impl<F: Scalar> ProviderRegistry<F> {
    pub fn with_builtins(embed_dim: usize) -> Self {
        let mut reg = ProviderRegistry {
            suites: BTreeMap::new(),
        };
        reg.register(Arc::new(SyntheticSuite::new(embed_dim)));
        reg
    }

    pub fn register(&mut self, suite: Arc<dyn ProviderSuite<F>>) {
        self.suites.insert(suite.name().to_string(), suite);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ProviderSuite<F>>> {
        self.suites
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownProvider(name.to_string()))
    }
}

/// Seed shared by the synthetic suite's embedding projections.
const SUITE_SEED: u64 = 0x5EED_CAFE;

/// Deterministic provider suite for synthetic scenes: answers come from the
/// analytic annotations in frame metadata, so grounding boxes and
/// segmentation masks are exact.
pub struct SyntheticSuite {
    embed_dim: usize,
}

impl SyntheticSuite {
    pub fn new(embed_dim: usize) -> Self {
        SyntheticSuite { embed_dim }
    }
}

impl<F: Scalar> ProviderSuite<F> for SyntheticSuite {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn ground(&self, frame: &FrameRecord<F>, text: &str) -> Result<Vec<(PixelBox, f64)>> {
        let Some(annotation) = frame.scene_annotation() else {
            return Ok(Vec::new());
        };
        let needle = text.to_lowercase();
        let mut hits = Vec::new();
        for obj in &annotation.objects {
            let label = obj.label.to_lowercase();
            if needle.contains(&label) || label.contains(&needle) {
                hits.push((obj.pixel_box(), 1.0));
            }
        }
        Ok(hits)
    }

    fn segment(&self, frame: &FrameRecord<F>, region: &PixelBox) -> Result<Array2<bool>> {
        let (h, w) = (frame.height(), frame.width());
        let mut mask = Array2::from_elem((h, w), false);
        let Some(annotation) = frame.scene_annotation() else {
            return Ok(mask);
        };
        // Pick the annotated object whose box overlaps the query best.
        let best = annotation
            .objects
            .iter()
            .map(|obj| {
                let b = obj.pixel_box();
                let inter = b.intersect(region);
                let inter_area = inter.width() * inter.height();
                (obj, inter_area)
            })
            .filter(|(_, area)| *area > 0)
            .max_by_key(|(_, area)| *area);
        if let Some((obj, _)) = best {
            let sil = obj.rasterize(h, w);
            for y in region.y0..region.y1.min(h) {
                for x in region.x0..region.x1.min(w) {
                    mask[(y, x)] = sil[(y, x)];
                }
            }
        }
        Ok(mask)
    }

    fn depth(&self, frame: &FrameRecord<F>) -> Result<Array2<F>> {
        let (h, w) = (frame.height(), frame.width());
        let annotation = frame.scene_annotation();
        let mut depth = Array2::<f64>::zeros((h, w));
        match annotation {
            Some(ann) => {
                let d = ann.depth.clone().unwrap_or(crate::scene::DepthAnnotation {
                    base: 0.2,
                    span: 0.35,
                    table_rows: [h / 2, h],
                    table_lift: 0.1,
                    object_height: 0.35,
                });
                for y in 0..h {
                    let row = d.base + d.span * (y as f64 + 0.5) / h as f64;
                    for x in 0..w {
                        let mut v = row;
                        if y >= d.table_rows[0] && y < d.table_rows[1] {
                            v += d.table_lift;
                        }
                        depth[(y, x)] = v;
                    }
                }
                for obj in &ann.objects {
                    let sil = obj.rasterize(h, w);
                    for ((y, x), &inside) in sil.indexed_iter() {
                        if inside {
                            depth[(y, x)] += d.object_height;
                        }
                    }
                }
            }
            None => {
                // Luminance proxy: darker pixels read as closer.
                for y in 0..h {
                    for x in 0..w {
                        let lum: f64 = (0..3)
                            .map(|c| frame.image[(y, x, c)].to_f64().unwrap_or(0.0))
                            .sum::<f64>()
                            / 3.0;
                        depth[(y, x)] = 1.0 - lum;
                    }
                }
            }
        }
        // Normalize to [0, 1].
        let min = depth.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = depth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let out = Array2::from_shape_fn((h, w), |(y, x)| {
            let v = if range > 0.0 {
                (depth[(y, x)] - min) / range
            } else {
                0.0
            };
            F::from_f64_lossy(v)
        });
        Ok(out)
    }

    fn embed_image(&self, image: &Image<F>) -> Result<Tokens<F>> {
        let (h, w, _) = image.dim();
        if h == 0 || w == 0 {
            return Err(Error::Provider {
                provider: "synthetic.embed_image".into(),
                reason: "empty image".into(),
            });
        }
        // 4×4 patch grid; per patch: mean RGB plus patch-center coordinates.
        const GRID: usize = 4;
        let mut features = Vec::with_capacity(GRID * GRID * 5);
        for gy in 0..GRID {
            for gx in 0..GRID {
                let y0 = gy * h / GRID;
                let y1 = ((gy + 1) * h / GRID).max(y0 + 1);
                let x0 = gx * w / GRID;
                let x1 = ((gx + 1) * w / GRID).max(x0 + 1);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let mut rgb = [0.0f64; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for c in 0..3 {
                            rgb[c] += image[(y, x, c)].to_f64().unwrap_or(0.0);
                        }
                    }
                }
                features.extend(rgb.iter().map(|v| v / count));
                features.push((gx as f64 + 0.5) / GRID as f64);
                features.push((gy as f64 + 0.5) / GRID as f64);
            }
        }
        let proj = seeded_projection::<F>(5, self.embed_dim, SUITE_SEED ^ 0x696d_6167);
        let mut tokens = Tokens::zeros((GRID * GRID, self.embed_dim));
        for (i, chunk) in features.chunks(5).enumerate() {
            for dcol in 0..self.embed_dim {
                let mut acc = F::zero();
                for (j, &f) in chunk.iter().enumerate() {
                    acc = acc + proj[(j, dcol)] * F::from_f64_lossy(f);
                }
                tokens[(i, dcol)] = acc;
            }
        }
        Ok(tokens)
    }

    fn embed_text(&self, text: &str) -> Result<Tokens<F>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let rows = words.len().max(1);
        let mut tokens = Tokens::zeros((rows, self.embed_dim));
        let scale = 1.0 / (self.embed_dim as f64).sqrt();
        for (i, word) in words.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(SUITE_SEED ^ fnv1a(word.as_bytes()));
            for dcol in 0..self.embed_dim {
                tokens[(i, dcol)] =
                    F::from_f64_lossy(rng.random_range(-1.0..1.0) * scale);
            }
        }
        Ok(tokens)
    }
}

fn seeded_projection<F: Scalar>(rows: usize, cols: usize, seed: u64) -> Array2<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64_lossy(rng.random_range(-1.0..1.0) * scale)
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}
