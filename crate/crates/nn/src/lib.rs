//! Minimal reverse-mode autodiff over `ndarray`, sized for small vision models.
//!
//! The engine is a flat tape: every operation records its output value and a
//! backward closure. All compute is single-threaded and deterministic; matrix
//! products go through `ndarray`'s matrixmultiply path. The element type is
//! generic over [`Elem`] so the same layers can train in `f32` (the checkpoint
//! dtype) and be finite-difference checked in `f64`.

mod gradcheck;
mod kernels;
mod layers;
mod ops;
mod optim;
mod tape;

pub use gradcheck::{central_diff_check, GradCheckReport};
pub use kernels::bilinear_resize_array;
pub use layers::{
    zero_params, Conv2d, ConvTranspose2x2, Embedding, Linear, Module, Param,
};
pub use optim::SgdMomentum;
pub use tape::{Gradients, Tape, Var};

use ndarray::{LinalgScalar, ScalarOperand};

/// Element type for tensors: `f32` or `f64`.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssign
    + ScalarOperand
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn c(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn c(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// True when every entry is finite.
pub fn all_finite<F: Elem>(a: &ndarray::ArrayD<F>) -> bool {
    a.iter().all(|v| v.is_finite())
}
