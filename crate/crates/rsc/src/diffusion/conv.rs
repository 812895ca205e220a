//! Small convolutional noise predictor for 32×32×3 synthetic tabletop
//! scenes, with conditioning hooks at two injection sites: pose residuals
//! are added at a mid (16×16) and a decoder (32×32) site, and visual tokens
//! enter through one masked cross-attention block at the mid site.
//!
//! The receptive field is deliberately capped at 4 input pixels so that
//! content outside a 4-pixel dilation of the editable region is bitwise
//! unaffected by an edit. Layer stack:
//!
//! ```text
//! x  = concat(z, coord_x, coord_y)            32×32×5
//! h1 = relu(conv3x3(x) + temb)                32×32×C1
//! h2 = avgpool2(h1)                           16×16×C1
//! m  = relu(conv3x3(h2) + temb)               16×16×C2   <- site 0 (+ attention)
//! d  = relu(conv1x1(m))                       16×16×C3
//! u  = upsample2(d)                           32×32×C3   <- site 1
//! out = conv1x1(concat(u, h1))                32×32×3
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::conditions::{
    fourier_encode_box, grounding_resampler, ConditionBundle, ControlAdapter, ProviderSuite,
    ResamplerWeights, SyntheticSuite, ToyControlAdapter, DEFAULT_BANDS, DEFAULT_QUERIES,
    DEFAULT_WIDTH,
};
use crate::editor::{downsample_editable, CrossAttentionWeights};
use crate::metrics::{make_toy_scene, random_scene_spec};
use crate::{Error, Latent, Mask, Result, Scalar, Tokens};

use super::{Denoiser, NoiseSchedule};

const IN_CH: usize = 5;
const C1: usize = 12;
const C2: usize = 24;
const C3: usize = 12;
const TEMB: usize = 8;
const ATTN_DIM: usize = 16;

/// Timestep normalization; the toy configuration runs 50-step schedules.
const TIME_SCALE: f64 = 1.0 / 50.0;

const WEIGHTS_MAGIC: &[u8; 4] = b"RSCW";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ConvWeights<F> {
    pub w1: Array4<F>,
    pub b1: Array1<F>,
    pub u1: Array2<F>,
    pub w2: Array4<F>,
    pub b2: Array1<F>,
    pub u2: Array2<F>,
    pub w3: Array2<F>,
    pub b3: Array1<F>,
    pub w4: Array2<F>,
    pub b4: Array1<F>,
    pub attn: CrossAttentionWeights<F>,
    pub token_dim: usize,
}

impl<F: Scalar> ConvWeights<F> {
    pub fn seeded(seed: u64, token_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e76);
        let mut he4 = |k: usize, ci: usize, co: usize| {
            let scale = (2.0 / (k * k * ci) as f64).sqrt();
            Array4::from_shape_fn((k, k, ci, co), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::from_f64_lossy(v * scale)
            })
        };
        let w1 = he4(3, IN_CH, C1);
        let w2 = he4(3, C1, C2);
        let mut he2 = |ci: usize, co: usize| {
            let scale = (2.0 / ci as f64).sqrt();
            Array2::from_shape_fn((ci, co), |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                F::from_f64_lossy(v * scale)
            })
        };
        let w3 = he2(C2, C3);
        let w4 = he2(C3 + C1, 3);
        let u1 = he2(TEMB, C1);
        let u2 = he2(TEMB, C2);
        ConvWeights {
            w1,
            b1: Array1::zeros(C1),
            u1,
            w2,
            b2: Array1::zeros(C2),
            u2,
            w3,
            b3: Array1::zeros(C3),
            w4,
            b4: Array1::zeros(3),
            attn: CrossAttentionWeights::seeded(C2, token_dim, ATTN_DIM, seed ^ 0x6174_746e),
            token_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z4 = |a: &Array4<F>| Array4::zeros(a.raw_dim());
        let z2 = |a: &Array2<F>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<F>| Array1::zeros(a.raw_dim());
        ConvWeights {
            w1: z4(&self.w1),
            b1: z1(&self.b1),
            u1: z2(&self.u1),
            w2: z4(&self.w2),
            b2: z1(&self.b2),
            u2: z2(&self.u2),
            w3: z2(&self.w3),
            b3: z1(&self.b3),
            w4: z2(&self.w4),
            b4: z1(&self.b4),
            attn: CrossAttentionWeights {
                w_q: z2(&self.attn.w_q),
                w_k: z2(&self.attn.w_k),
                w_v: z2(&self.attn.w_v),
                w_out: z2(&self.attn.w_out),
            },
            token_dim: self.token_dim,
        }
    }

    pub(crate) fn views(&self) -> Vec<ArrayViewD<'_, F>> {
        vec![
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.u1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
            self.u2.view().into_dyn(),
            self.w3.view().into_dyn(),
            self.b3.view().into_dyn(),
            self.w4.view().into_dyn(),
            self.b4.view().into_dyn(),
            self.attn.w_q.view().into_dyn(),
            self.attn.w_k.view().into_dyn(),
            self.attn.w_v.view().into_dyn(),
            self.attn.w_out.view().into_dyn(),
        ]
    }

    pub(crate) fn views_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        vec![
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.u1.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
            self.u2.view_mut().into_dyn(),
            self.w3.view_mut().into_dyn(),
            self.b3.view_mut().into_dyn(),
            self.w4.view_mut().into_dyn(),
            self.b4.view_mut().into_dyn(),
            self.attn.w_q.view_mut().into_dyn(),
            self.attn.w_k.view_mut().into_dyn(),
            self.attn.w_v.view_mut().into_dyn(),
            self.attn.w_out.view_mut().into_dyn(),
        ]
    }
}

/// The denoiser: a [`ConvWeights`] bundle plus the forward pass.
#[derive(Debug, Clone)]
pub struct ConvDenoiser<F> {
    pub weights: ConvWeights<F>,
}

impl<F: Scalar> ConvDenoiser<F> {
    /// Untrained predictor with seeded random weights.
    pub fn seeded(seed: u64) -> Self {
        ConvDenoiser {
            weights: ConvWeights::seeded(seed, DEFAULT_WIDTH),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let weights = read_weights(path)?;
        Ok(ConvDenoiser { weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weights(&self.weights, path)
    }

    fn forward(
        &self,
        z: &Array3<F>,
        t: usize,
        cond: Option<&ConditionBundle<F>>,
        cache: Option<&mut Cache<F>>,
    ) -> Result<Array3<F>> {
        let (h, w, ch) = z.dim();
        if ch != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv denoiser expects even H×W×3 latents, got {:?}",
                z.dim()
            )));
        }
        let weights = &self.weights;

        // Input: latent channels plus normalized coordinate channels.
        let mut x = Array3::<F>::zeros((h, w, IN_CH));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    x[(y, xx, c)] = z[(y, xx, c)];
                }
                x[(y, xx, 3)] = F::from_f64_lossy((xx as f64 + 0.5) / w as f64);
                x[(y, xx, 4)] = F::from_f64_lossy((y as f64 + 0.5) / h as f64);
            }
        }
        let temb = time_embedding::<F>(t);

        let mut a1 = conv3x3(&x, &weights.w1, &weights.b1);
        add_time(&mut a1, &temb, &weights.u1);
        let h1 = relu(&a1);
        let h2 = avgpool2(&h1);
        let mut a2 = conv3x3(&h2, &weights.w2, &weights.b2);
        add_time(&mut a2, &temb, &weights.u2);
        let m0 = relu(&a2);

        // Site 0: pose residual, then masked visual cross-attention.
        let mut m1 = m0.clone();
        if let Some(bundle) = cond {
            if !bundle.c_pose.is_empty() {
                let sites = vec![m1.shape().to_vec(), vec![h, w, C3]];
                check_pose_sites(&bundle.c_pose, &sites)?;
                m1 = crate::editor::inject_pose(&m1, &bundle.c_pose[0])?;
            }
        }
        let mut attn_cache = None;
        let mut m2 = m1.clone();
        if let Some(bundle) = cond {
            if bundle.c_visual.nrows() > 0 {
                let (residual, ac) = attention_with_cache(
                    &m1,
                    &bundle.c_visual,
                    &bundle.c_layout,
                    &weights.attn,
                    cache.is_some(),
                )?;
                for (o, &r) in m2.iter_mut().zip(residual.iter()) {
                    *o = *o + r;
                }
                attn_cache = ac;
            }
        }

        let a3 = conv1x1(&m2, &weights.w3, &weights.b3);
        let d0 = relu(&a3);
        let u = upsample2(&d0);

        // Site 1: decoder pose residual.
        let mut u_inj = u;
        if let Some(bundle) = cond {
            if bundle.c_pose.len() > 1 {
                u_inj = crate::editor::inject_pose(&u_inj, &bundle.c_pose[1])?;
            }
        }

        let cat = concat_channels(&u_inj, &h1);
        let out = conv1x1(&cat, &weights.w4, &weights.b4);

        if let Some(cache) = cache {
            *cache = Cache {
                x,
                h1,
                h2,
                m0,
                m2,
                d0,
                u_inj,
                attn: attn_cache,
                temb,
            };
        }
        Ok(out)
    }
}

fn check_pose_sites<F: Scalar>(residuals: &[Latent<F>], sites: &[Vec<usize>]) -> Result<()> {
    if residuals.len() != sites.len() {
        return Err(Error::ShapeMismatch(format!(
            "got {} pose residuals for {} injection sites",
            residuals.len(),
            sites.len()
        )));
    }
    Ok(())
}

impl<F: Scalar> Denoiser<F> for ConvDenoiser<F> {
    fn predict_noise(
        &self,
        z: &Latent<F>,
        t: usize,
        conditions: Option<&ConditionBundle<F>>,
    ) -> Result<Latent<F>> {
        let z3 = z
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| {
                Error::ShapeMismatch(format!(
                    "conv denoiser expects H×W×3 latents, got {:?}",
                    z.shape()
                ))
            })?
            .to_owned();
        let out = self.forward(&z3, t, conditions, None)?;
        Ok(out.into_dyn())
    }

    fn injection_sites(&self) -> Vec<Vec<usize>> {
        vec![vec![16, 16, C2], vec![32, 32, C3]]
    }
}

pub(crate) struct Cache<F> {
    x: Array3<F>,
    h1: Array3<F>,
    h2: Array3<F>,
    m0: Array3<F>,
    m2: Array3<F>,
    d0: Array3<F>,
    u_inj: Array3<F>,
    attn: Option<AttnCache<F>>,
    temb: Array1<F>,
}

impl<F: Scalar> Default for Cache<F> {
    fn default() -> Self {
        let empty = || Array3::zeros((0, 0, 0));
        Cache {
            x: empty(),
            h1: empty(),
            h2: empty(),
            m0: empty(),
            m2: empty(),
            d0: empty(),
            u_inj: empty(),
            attn: None,
            temb: Array1::zeros(0),
        }
    }
}

pub(crate) struct AttnCache<F> {
    cells: Vec<(usize, usize)>,
    x_rows: Array2<F>,
    queries: Array2<F>,
    keys: Array2<F>,
    values: Array2<F>,
    attn: Array2<F>,
    out_pre: Array2<F>,
    tokens: Tokens<F>,
}

/// Mirrors [`crate::editor::masked_visual_attention`] operation-for-operation
/// while optionally retaining intermediates for backprop; a unit test pins
/// bitwise agreement between the two.
fn attention_with_cache<F: Scalar>(
    activations: &Array3<F>,
    c_visual: &Tokens<F>,
    c_layout: &Mask<F>,
    weights: &CrossAttentionWeights<F>,
    want_cache: bool,
) -> Result<(Array3<F>, Option<AttnCache<F>>)> {
    let (gh, gw, channels) = activations.dim();
    let mut residual = Array3::<F>::zeros((gh, gw, channels));
    if c_visual.nrows() == 0 {
        return Ok((residual, None));
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
        return Ok((residual, None));
    }
    let mut x_rows = Array2::<F>::zeros((cells.len(), channels));
    for (row, &(y, x)) in cells.iter().enumerate() {
        for c in 0..channels {
            x_rows[(row, c)] = activations[(y, x, c)];
        }
    }
    let queries = x_rows.dot(&weights.w_q);
    let keys = c_visual.dot(&weights.w_k);
    let values = c_visual.dot(&weights.w_v);
    let scale = F::one() / F::from_f64_lossy((weights.attn_dim() as f64).sqrt());
    let mut logits = queries.dot(&keys.t());
    logits.mapv_inplace(|v| v * scale);
    let attn = crate::conditions::softmax_rows(&logits);
    let out_pre = attn.dot(&values);
    let out = out_pre.dot(&weights.w_out);
    for (row, &(y, x)) in cells.iter().enumerate() {
        for c in 0..channels {
            residual[(y, x, c)] = out[(row, c)];
        }
    }
    let cache = want_cache.then(|| AttnCache {
        cells,
        x_rows,
        queries,
        keys,
        values,
        attn,
        out_pre,
        tokens: c_visual.clone(),
    });
    Ok((residual, cache))
}

fn time_embedding<F: Scalar>(t: usize) -> Array1<F> {
    let tau = t as f64 * TIME_SCALE;
    let mut out = Array1::zeros(TEMB);
    for i in 0..TEMB / 2 {
        let arg = (1u64 << i) as f64 * std::f64::consts::PI * tau;
        out[2 * i] = F::from_f64_lossy(arg.sin());
        out[2 * i + 1] = F::from_f64_lossy(arg.cos());
    }
    out
}

fn add_time<F: Scalar>(a: &mut Array3<F>, temb: &Array1<F>, u: &Array2<F>) {
    let co = a.dim().2;
    let mut shift = Array1::<F>::zeros(co);
    for c in 0..co {
        let mut acc = F::zero();
        for i in 0..TEMB {
            acc = acc + temb[i] * u[(i, c)];
        }
        shift[c] = acc;
    }
    for mut lane in a.lanes_mut(Axis(2)) {
        for c in 0..co {
            lane[c] = lane[c] + shift[c];
        }
    }
}

fn conv3x3<F: Scalar>(x: &Array3<F>, w: &Array4<F>, b: &Array1<F>) -> Array3<F> {
    let (h, ww, ci) = x.dim();
    let co = w.dim().3;
    let mut out = Array3::<F>::zeros((h, ww, co));
    for y in 0..h {
        for xx in 0..ww {
            let mut acc = b.to_vec();
            for ky in 0..3usize {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= ww as isize {
                        continue;
                    }
                    for i in 0..ci {
                        let v = x[(sy as usize, sx as usize, i)];
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a = *a + v * w[(ky, kx, i, o)];
                        }
                    }
                }
            }
            for (o, a) in acc.into_iter().enumerate() {
                out[(y, xx, o)] = a;
            }
        }
    }
    out
}

/// Gradients of `conv3x3` w.r.t. input, weights, and bias.
fn conv3x3_backward<F: Scalar>(
    x: &Array3<F>,
    w: &Array4<F>,
    dout: &Array3<F>,
) -> (Array3<F>, Array4<F>, Array1<F>) {
    let (h, ww, ci) = x.dim();
    let co = w.dim().3;
    let mut dx = Array3::<F>::zeros((h, ww, ci));
    let mut dw = Array4::<F>::zeros(w.raw_dim());
    let mut db = Array1::<F>::zeros(co);
    for y in 0..h {
        for xx in 0..ww {
            for o in 0..co {
                db[o] = db[o] + dout[(y, xx, o)];
            }
            for ky in 0..3usize {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= ww as isize {
                        continue;
                    }
                    for i in 0..ci {
                        let xv = x[(sy as usize, sx as usize, i)];
                        let mut dxi = F::zero();
                        for o in 0..co {
                            let g = dout[(y, xx, o)];
                            dw[(ky, kx, i, o)] = dw[(ky, kx, i, o)] + xv * g;
                            dxi = dxi + w[(ky, kx, i, o)] * g;
                        }
                        dx[(sy as usize, sx as usize, i)] =
                            dx[(sy as usize, sx as usize, i)] + dxi;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn conv1x1<F: Scalar>(x: &Array3<F>, w: &Array2<F>, b: &Array1<F>) -> Array3<F> {
    let (h, ww, ci) = x.dim();
    let co = w.dim().1;
    let mut out = Array3::<F>::zeros((h, ww, co));
    for y in 0..h {
        for xx in 0..ww {
            for o in 0..co {
                let mut acc = b[o];
                for i in 0..ci {
                    acc = acc + x[(y, xx, i)] * w[(i, o)];
                }
                out[(y, xx, o)] = acc;
            }
        }
    }
    out
}

fn conv1x1_backward<F: Scalar>(
    x: &Array3<F>,
    w: &Array2<F>,
    dout: &Array3<F>,
) -> (Array3<F>, Array2<F>, Array1<F>) {
    let (h, ww, ci) = x.dim();
    let co = w.dim().1;
    let mut dx = Array3::<F>::zeros((h, ww, ci));
    let mut dw = Array2::<F>::zeros(w.raw_dim());
    let mut db = Array1::<F>::zeros(co);
    for y in 0..h {
        for xx in 0..ww {
            for o in 0..co {
                let g = dout[(y, xx, o)];
                db[o] = db[o] + g;
                for i in 0..ci {
                    dw[(i, o)] = dw[(i, o)] + x[(y, xx, i)] * g;
                    dx[(y, xx, i)] = dx[(y, xx, i)] + w[(i, o)] * g;
                }
            }
        }
    }
    (dx, dw, db)
}

fn relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v.max(F::zero()))
}

fn relu_backward<F: Scalar>(activated: &Array3<F>, dout: &Array3<F>) -> Array3<F> {
    let mut dx = dout.clone();
    for (d, &a) in dx.iter_mut().zip(activated.iter()) {
        if a <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

fn avgpool2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (h, w, c) = x.dim();
    let quarter = F::from_f64_lossy(0.25);
    let mut out = Array3::<F>::zeros((h / 2, w / 2, c));
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for ch in 0..c {
                let s = x[(2 * y, 2 * xx, ch)]
                    + x[(2 * y, 2 * xx + 1, ch)]
                    + x[(2 * y + 1, 2 * xx, ch)]
                    + x[(2 * y + 1, 2 * xx + 1, ch)];
                out[(y, xx, ch)] = s * quarter;
            }
        }
    }
    out
}

fn avgpool2_backward<F: Scalar>(dout: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    let c = dout.dim().2;
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = Array3::<F>::zeros((h, w, c));
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for ch in 0..c {
                let g = dout[(y, xx, ch)] * quarter;
                dx[(2 * y, 2 * xx, ch)] = g;
                dx[(2 * y, 2 * xx + 1, ch)] = g;
                dx[(2 * y + 1, 2 * xx, ch)] = g;
                dx[(2 * y + 1, 2 * xx + 1, ch)] = g;
            }
        }
    }
    dx
}

fn upsample2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<F>::zeros((2 * h, 2 * w, c));
    for y in 0..2 * h {
        for xx in 0..2 * w {
            for ch in 0..c {
                out[(y, xx, ch)] = x[(y / 2, xx / 2, ch)];
            }
        }
    }
    out
}

fn upsample2_backward<F: Scalar>(dout: &Array3<F>) -> Array3<F> {
    let (h2, w2, c) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<F>::zeros((h, w, c));
    for y in 0..h2 {
        for xx in 0..w2 {
            for ch in 0..c {
                dx[(y / 2, xx / 2, ch)] = dx[(y / 2, xx / 2, ch)] + dout[(y, xx, ch)];
            }
        }
    }
    dx
}

fn concat_channels<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    let (h, w, ca) = a.dim();
    let cb = b.dim().2;
    let mut out = Array3::<F>::zeros((h, w, ca + cb));
    for y in 0..h {
        for xx in 0..w {
            for c in 0..ca {
                out[(y, xx, c)] = a[(y, xx, c)];
            }
            for c in 0..cb {
                out[(y, xx, ca + c)] = b[(y, xx, c)];
            }
        }
    }
    out
}

/// Backward pass; returns parameter gradients (input gradients are not
/// needed for training).
fn backward<F: Scalar>(
    weights: &ConvWeights<F>,
    cache: &Cache<F>,
    dout: &Array3<F>,
) -> ConvWeights<F> {
    let mut grads = weights.zeros_like();
    let (h, w, _) = cache.x.dim();

    // conv4 over concat(u_inj, h1)
    let cat = concat_channels(&cache.u_inj, &cache.h1);
    let (dcat, dw4, db4) = conv1x1_backward(&cat, &weights.w4, dout);
    grads.w4 = dw4;
    grads.b4 = db4;
    let mut du = Array3::<F>::zeros((h, w, C3));
    let mut dh1 = Array3::<F>::zeros((h, w, C1));
    for y in 0..h {
        for xx in 0..w {
            for c in 0..C3 {
                du[(y, xx, c)] = dcat[(y, xx, c)];
            }
            for c in 0..C1 {
                dh1[(y, xx, c)] = dcat[(y, xx, C3 + c)];
            }
        }
    }

    // upsample <- d0 <- conv3 <- m2
    let dd0 = upsample2_backward(&du);
    let da3 = relu_backward(&cache.d0, &dd0);
    let (dm2, dw3, db3) = conv1x1_backward(&cache.m2, &weights.w3, &da3);
    grads.w3 = dw3;
    grads.b3 = db3;

    // attention residual: m2 = m1 + attn(m1)
    let mut dm1 = dm2.clone();
    if let Some(ac) = &cache.attn {
        let s = ac.cells.len();
        let channels = C2;
        let mut dy = Array2::<F>::zeros((s, channels));
        for (row, &(y, x)) in ac.cells.iter().enumerate() {
            for c in 0..channels {
                dy[(row, c)] = dm2[(y, x, c)];
            }
        }
        // out = (attn · values) · w_out
        grads.attn.w_out = ac.out_pre.t().dot(&dy);
        let dout_pre = dy.dot(&weights.attn.w_out.t());
        let dattn = dout_pre.dot(&ac.values.t());
        let dvalues = ac.attn.t().dot(&dout_pre);
        // softmax backward per row
        let mut dlogits = Array2::<F>::zeros(dattn.raw_dim());
        for r in 0..s {
            let mut dot = F::zero();
            for k in 0..dattn.dim().1 {
                dot = dot + dattn[(r, k)] * ac.attn[(r, k)];
            }
            for k in 0..dattn.dim().1 {
                dlogits[(r, k)] = ac.attn[(r, k)] * (dattn[(r, k)] - dot);
            }
        }
        let scale = F::one() / F::from_f64_lossy((ATTN_DIM as f64).sqrt());
        dlogits.mapv_inplace(|v| v * scale);
        let dqueries = dlogits.dot(&ac.keys);
        let dkeys = dlogits.t().dot(&ac.queries);
        grads.attn.w_q = ac.x_rows.t().dot(&dqueries);
        grads.attn.w_k = ac.tokens.t().dot(&dkeys);
        grads.attn.w_v = ac.tokens.t().dot(&dvalues);
        let dx_rows = dqueries.dot(&weights.attn.w_q.t());
        for (row, &(y, x)) in ac.cells.iter().enumerate() {
            for c in 0..channels {
                dm1[(y, x, c)] = dm1[(y, x, c)] + dx_rows[(row, c)];
            }
        }
    }

    // pose residual add is a passthrough; m0 = relu(a2)
    let da2 = relu_backward(&cache.m0, &dm1);
    for c in 0..C2 {
        let mut acc = F::zero();
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                acc = acc + da2[(y, xx, c)];
            }
        }
        for i in 0..TEMB {
            grads.u2[(i, c)] = cache.temb[i] * acc;
        }
    }
    let (dh2, dw2, db2) = conv3x3_backward(&cache.h2, &weights.w2, &da2);
    grads.w2 = dw2;
    grads.b2 = db2;

    // pool <- h1
    let dh1_pool = avgpool2_backward(&dh2, h, w);
    for (a, &b) in dh1.iter_mut().zip(dh1_pool.iter()) {
        *a = *a + b;
    }
    let da1 = relu_backward(&cache.h1, &dh1);
    for c in 0..C1 {
        let mut acc = F::zero();
        for y in 0..h {
            for xx in 0..w {
                acc = acc + da1[(y, xx, c)];
            }
        }
        for i in 0..TEMB {
            grads.u1[(i, c)] = cache.temb[i] * acc;
        }
    }
    let (_, dw1, db1) = conv3x3_backward(&cache.x, &weights.w1, &da1);
    grads.w1 = dw1;
    grads.b1 = db1;

    grads
}

/// Training configuration for the bundled script.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub frames: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
    /// Probability that a sample trains with its pose condition attached.
    pub p_pose: f64,
    /// Probability that a sample trains with its visual tokens attached.
    pub p_visual: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            frames: 2000,
            epochs: 12,
            batch: 16,
            lr: 2e-3,
            seed: 7,
            steps: 50,
            p_pose: 0.7,
            p_visual: 0.75,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Per-channel means of the training images.
    pub channel_means: [f64; 3],
}

struct TrainSample<F> {
    image: Array3<F>,
    layout: Mask<F>,
    depth: Array2<F>,
    tokens: Tokens<F>,
}

/// Trains the conv predictor on synthetic scenes with the same conditioning
/// pathway used at edit time: pose residuals (always at unit control scale)
/// and resampled visual tokens of the scene itself, each independently
/// dropped so the unconditional and single-condition modes are learned too.
pub fn train_toy_denoiser<F: Scalar>(
    config: &TrainConfig,
) -> Result<(ConvDenoiser<F>, TrainReport)> {
    let schedule = NoiseSchedule::<F>::cosine(config.steps);
    let mut denoiser = ConvDenoiser::<F>::seeded(config.seed);
    let suite = SyntheticSuite::new(DEFAULT_WIDTH);
    let resampler = ResamplerWeights::<F>::seeded(
        DEFAULT_QUERIES,
        DEFAULT_WIDTH,
        DEFAULT_BANDS,
        config.seed,
    );
    let adapter = ToyControlAdapter::<F>::for_sites(denoiser.injection_sites(), config.seed);

    // Pre-render the dataset once; conditions are rebuilt per use from the
    // stored depth map and tokens.
    let mut samples = Vec::with_capacity(config.frames);
    let mut means = [0.0f64; 3];
    for i in 0..config.frames {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ mix(i as u64, 0x646174));
        let spec = random_scene_spec(&mut rng);
        let traj = make_toy_scene::<F>(&spec, 1, config.seed ^ i as u64)?;
        let frame = &traj.frames[0];
        let ann = frame.scene_annotation().expect("toy scene annotated");
        let obj = &ann.objects[0];

        let editable =
            crate::conditions::dilate(&obj.rasterize(spec.height, spec.width), 4);
        let mut layout = Mask::<F>::from_elem((spec.height, spec.width), F::one());
        for ((y, x), &e) in editable.indexed_iter() {
            if e {
                layout[(y, x)] = F::zero();
            }
        }

        let depth = suite.depth(frame)?;
        let f_v = suite.embed_image(&frame.image)?;
        let f_t = suite.embed_text(&format!("{} {}", obj.label, "object"))?;
        let f_g = fourier_encode_box(
            &obj.pixel_box().to_norm(spec.width, spec.height)?,
            DEFAULT_BANDS,
        )?;
        let tokens = grounding_resampler(&f_v, &f_t, &f_g, &resampler)?;

        for c in 0..3 {
            means[c] += frame
                .image
                .index_axis(Axis(2), c)
                .iter()
                .map(|&v| v.to_f64().unwrap_or(0.0))
                .sum::<f64>()
                / (spec.height * spec.width) as f64;
        }
        samples.push(TrainSample {
            image: frame.image.clone(),
            layout,
            depth,
            tokens,
        });
    }
    for m in means.iter_mut() {
        *m /= config.frames as f64;
    }

    let mut adam = AdamState::new(&denoiser.weights);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..config.frames).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f72_6465);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let results: Vec<(f64, ConvWeights<F>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let draw_seed = config.seed ^ mix(epoch as u64, idx as u64);
                    train_one(&denoiser, &samples[idx], &adapter, &schedule, config, draw_seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = denoiser.weights.zeros_like();
            let mut loss_sum = 0.0;
            for (loss, grads) in &results {
                loss_sum += loss;
                accumulate(&mut total, grads);
            }
            let scale = 1.0 / results.len() as f64;
            scale_grads(&mut total, scale);
            step += 1;
            adam.step(&mut denoiser.weights, &total, config.lr, step);
            epoch_loss += loss_sum * scale;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    Ok((
        denoiser,
        TrainReport {
            epoch_losses,
            channel_means: means,
        },
    ))
}

fn train_one<F: Scalar>(
    denoiser: &ConvDenoiser<F>,
    sample: &TrainSample<F>,
    adapter: &ToyControlAdapter<F>,
    schedule: &NoiseSchedule<F>,
    config: &TrainConfig,
    draw_seed: u64,
) -> Result<(f64, ConvWeights<F>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let t = rng.random_range(1..=schedule.steps());
    let use_pose: bool = rng.random_range(0.0..1.0) < config.p_pose;
    let use_visual: bool = rng.random_range(0.0..1.0) < config.p_visual;

    let (h, w, _) = sample.image.dim();
    let a = schedule.alpha_bar(t);
    let signal = a.sqrt();
    let noise_level = (F::one() - a).sqrt();
    let mut eps = Array3::<F>::zeros((h, w, 3));
    for v in eps.iter_mut() {
        let draw: f64 = StandardNormal.sample(&mut rng);
        *v = F::from_f64_lossy(draw);
    }
    let mut z = sample.image.clone();
    for (zv, &ev) in z.iter_mut().zip(eps.iter()) {
        *zv = *zv * signal + ev * noise_level;
    }

    let c_pose = if use_pose {
        adapter.residuals(&sample.depth)?
    } else {
        Vec::new()
    };
    let c_visual = if use_visual {
        sample.tokens.clone()
    } else {
        Tokens::zeros((0, sample.tokens.ncols()))
    };
    let bundle = ConditionBundle {
        c_visual,
        c_layout: sample.layout.clone(),
        c_pose,
        control_scale: F::one(),
        flags: Vec::new(),
    };

    let mut cache = Cache::default();
    let pred = denoiser.forward(&z, t, Some(&bundle), Some(&mut cache))?;

    let n = (h * w * 3) as f64;
    let mut loss = 0.0;
    let mut dout = Array3::<F>::zeros((h, w, 3));
    for ((d, &p), &e) in dout.iter_mut().zip(pred.iter()).zip(eps.iter()) {
        let diff = p.to_f64().unwrap_or(0.0) - e.to_f64().unwrap_or(0.0);
        loss += diff * diff;
        *d = F::from_f64_lossy(2.0 * diff / n);
    }
    loss /= n;

    let grads = backward(&denoiser.weights, &cache, &dout);
    Ok((loss, grads))
}

fn accumulate<F: Scalar>(total: &mut ConvWeights<F>, grads: &ConvWeights<F>) {
    for (mut t, g) in total.views_mut().into_iter().zip(grads.views()) {
        t.zip_mut_with(&g, |a, &b| *a = *a + b);
    }
}

fn scale_grads<F: Scalar>(grads: &mut ConvWeights<F>, scale: f64) {
    let s = F::from_f64_lossy(scale);
    for mut g in grads.views_mut() {
        g.mapv_inplace(|v| v * s);
    }
}

struct AdamState<F> {
    m: ConvWeights<F>,
    v: ConvWeights<F>,
}

impl<F: Scalar> AdamState<F> {
    fn new(template: &ConvWeights<F>) -> Self {
        AdamState {
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }

    fn step(&mut self, params: &mut ConvWeights<F>, grads: &ConvWeights<F>, lr: f64, t: usize) {
        let b1 = F::from_f64_lossy(0.9);
        let b2 = F::from_f64_lossy(0.999);
        let eps = F::from_f64_lossy(1e-8);
        let corr1 = F::from_f64_lossy(1.0 - 0.9f64.powi(t as i32));
        let corr2 = F::from_f64_lossy(1.0 - 0.999f64.powi(t as i32));
        let lr = F::from_f64_lossy(lr);
        let one = F::one();
        for (((mut p, g), mut m), mut v) in params
            .views_mut()
            .into_iter()
            .zip(grads.views())
            .zip(self.m.views_mut())
            .zip(self.v.views_mut())
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b)
        .wrapping_add(0x6a09_e667_f3bc_c909);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn write_weights<F: Scalar>(weights: &ConvWeights<F>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let views = weights.views();
    let put = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut out, WEIGHTS_MAGIC)?;
    put(&mut out, &WEIGHTS_VERSION.to_le_bytes())?;
    put(&mut out, &(weights.token_dim as u32).to_le_bytes())?;
    put(&mut out, &(views.len() as u32).to_le_bytes())?;
    for view in &views {
        put(&mut out, &(view.ndim() as u32).to_le_bytes())?;
        for &d in view.shape() {
            put(&mut out, &(d as u32).to_le_bytes())?;
        }
        for &v in view.iter() {
            put(&mut out, &v.to_f64().unwrap_or(0.0).to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_weights<F: Scalar>(path: &Path) -> Result<ConvWeights<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |reason: &str| Error::DecodeFailure {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    fn read_u32(input: &mut BufReader<File>, path: &Path) -> Result<u32> {
        let mut buf = [0u8; 4];
        input.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(buf))
    }

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(bad("not a weights file"));
    }
    let version = read_u32(&mut input, path)?;
    if version != WEIGHTS_VERSION {
        return Err(bad(&format!("unsupported weights version {version}")));
    }
    let token_dim = read_u32(&mut input, path)? as usize;
    let count = read_u32(&mut input, path)? as usize;

    let mut template = ConvWeights::<F>::seeded(0, token_dim);
    let expected: Vec<Vec<usize>> = template
        .views()
        .iter()
        .map(|v| v.shape().to_vec())
        .collect();
    if count != expected.len() {
        return Err(bad(&format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut f64buf = [0u8; 8];
    for (i, mut view) in template.views_mut().into_iter().enumerate() {
        let rank = read_u32(&mut input, path)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut input, path)? as usize);
        }
        if dims != expected[i] {
            return Err(Error::DecodeFailure {
                path: path.to_path_buf(),
                reason: format!("tensor {i} has shape {dims:?}, expected {:?}", expected[i]),
            });
        }
        for v in view.iter_mut() {
            input
                .read_exact(&mut f64buf)
                .map_err(|e| Error::io(path, e))?;
            *v = F::from_f64_lossy(f64::from_le_bytes(f64buf));
        }
    }
    Ok(template)
}
