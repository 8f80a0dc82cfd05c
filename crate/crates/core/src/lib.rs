//! One-shot learned optimizer for point-set registration.
//!
//! A registration scene is scored over a bounded grid of camera translations
//! with a Gaussian kernel-correlation similarity. A small 3D convolutional
//! network reads a 9×9×9 window of that score tensor around an initial guess
//! and regresses the offset to the global optimum in a single forward pass.
//! Classical derivative-free optimizers and the evaluation metrics used to
//! compare against them live alongside.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod error;
mod gemm;
pub mod net;
pub mod geometry;
pub mod landscape;
pub mod similarity;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
