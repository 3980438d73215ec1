//! Amodal instance segmentation on synthetic occlusion scenes, with a shape
//! prior extracted from the attention maps of a small conditioned diffusion
//! model.
//!
//! Pipeline: [`scenes`] generates datasets with exact amodal/visible/occluding
//! ground truth; [`roi`] pools per-instance features from a small trainable
//! backbone; [`visocc`] predicts occluding mask, visible mask, and category;
//! [`diffusion`] is the conditioned denoiser whose attention maps [`diffsp`]
//! aggregates into a shape prior; [`amodal`] gates ROI features with that
//! prior to predict the amodal mask. [`train`], [`eval`], and [`ablate`] wire
//! the pieces into runs.

pub mod error;
pub mod mask;
pub mod roi;
pub mod visocc;
pub mod scenes;

pub use error::CoreError;

pub type Result<T> = std::result::Result<T, CoreError>;
