//! Visual-prompt trajectory editing for robot demonstration data.
//!
//! Given a recorded demonstration (camera frames plus action records) and a
//! single image of a novel object, this crate synthesizes an edited copy of
//! the trajectory in which the target object is replaced while everything
//! else — background, table, manipulation-relevant geometry — is preserved.
//!
//! The pipeline has two halves:
//!
//! * [`conditions`] turns the prompt into a triple of control signals: visual
//!   tokens from a grounding resampler, a binary layout mask (1 = preserve,
//!   0 = editable), and depth-derived pose residuals scaled by a control
//!   knob.
//! * [`editor`] inverts each frame into a set of latent anchors, then
//!   re-denoises from noise while progressively fusing the anchors back in
//!   under a linearly decaying mask, injecting the visual and pose conditions
//!   along the way.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`];
//! `f64` is the default precision used by the CLI (see [`Real`]).

pub mod conditions;
pub mod diffusion;
pub mod editor;
mod error;
pub mod metrics;
pub mod pipeline;
pub mod scene;
mod scalar;

pub mod cli;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar precision for the CLI and pipeline entry points.
pub type Real = f64;

/// H×W×3 image with values in `[0, 1]`, channel-last.
pub type Image<F> = ndarray::Array3<F>;

/// H×W mask; layout masks hold exactly `{0, 1}` (1 = preserve).
pub type Mask<F> = ndarray::Array2<F>;

/// Latent tensor of arbitrary rank (vector latents for the analytic backend,
/// H×W×C for image-space backends).
pub type Latent<F> = ndarray::ArrayD<F>;

/// Token matrix, one row per token.
pub type Tokens<F> = ndarray::Array2<F>;

/// Tool version recorded in edit manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
