//! Hierarchical-perception infrared/visible image fusion.
//!
//! - [`numerics`]: tensors, reverse-mode autograd, Adam, gradient checking.
//! - [`perception`]: four-question answers, text/image embeddings, batch
//!   similarity distributions and the answer cache.
//! - [`fusenet`]: the text-guided fusion network and its file format.
//! - [`objective`]: intensity, detail and hierarchical semantic losses.
//! - [`metrics`]: MSE, SSIM, PSNR, CC and Q^AB/F evaluation.
//! - [`pipeline`]: datasets, configuration, training, inference, evaluation.

pub mod fusenet;
mod hashing;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod perception;
pub mod pipeline;
pub mod raster;
