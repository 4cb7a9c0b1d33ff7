//! Differentiable computation substrate.
//!
//! [`Tensor`] holds plain data; [`Tape`] records operations on [`Var`]
//! handles and runs reverse-mode differentiation. Everything is `f64`.

mod adam;
mod conv;
mod gradcheck;
mod linalg;
pub(crate) mod ops;
mod ssim;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv2d, image_gradient, SOBEL_X, SOBEL_Y};
pub use gradcheck::{grad_check, grad_check_indices, GradCheckReport, FD_STEP, REL_GUARD};
pub use linalg::{attention, cosine_similarity, MIN_NORM};
pub use ops::concat;
pub use ssim::{gaussian_window, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: image {height}x{width} is smaller than the required {min}x{min}")]
    ImageTooSmall { op: &'static str, height: usize, width: usize, min: usize },
    #[error("{op}: degenerate input: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("optimizer step counter overflow")]
    StepOverflow,
}
