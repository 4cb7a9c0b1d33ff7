//! Differentiable structural similarity.

use super::conv::conv2d;
use super::tape::Var;
use super::tensor::dims4;
use super::{NumericsError, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size).map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian filter, "valid" extent.
fn blur<'t>(x: Var<'t>, row: Var<'t>, col: Var<'t>) -> Result<Var<'t>, NumericsError> {
    conv2d(conv2d(x, row, 1, 0)?, col, 1, 0)
}

/// Mean SSIM over all valid 11×11 Gaussian windows (σ = 1.5, unit dynamic range).
///
/// Inputs are N×1×H×W with H, W ≥ 11; the mean runs over every window of
/// every sample.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, NumericsError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(NumericsError::Shape { op: "ssim", detail: format!("{sa:?} vs {sb:?}") });
    }
    let (_, c, h, w) = dims4(&sa)?;
    if c != 1 {
        return Err(NumericsError::Shape { op: "ssim", detail: format!("expected one channel, got {c}") });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(NumericsError::ImageTooSmall { op: "ssim", height: h, width: w, min: SSIM_WINDOW });
    }
    let tape = a.tape();
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let row = tape.constant(Tensor::from_parts(vec![1, 1, 1, SSIM_WINDOW], taps.clone()));
    let col = tape.constant(Tensor::from_parts(vec![1, 1, SSIM_WINDOW, 1], taps));

    let mu_a = blur(a, row, col)?;
    let mu_b = blur(b, row, col)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = blur(a.square(), row, col)?.sub(mu_aa)?;
    let var_b = blur(b.square(), row, col)?.sub(mu_bb)?;
    let cov = blur(a.mul(b)?, row, col)?.sub(mu_ab)?;

    let luminance_num = mu_ab.scale(2.0).add_scalar(SSIM_C1);
    let contrast_num = cov.scale(2.0).add_scalar(SSIM_C2);
    let luminance_den = mu_aa.add(mu_bb)?.add_scalar(SSIM_C1);
    let contrast_den = var_a.add(var_b)?.add_scalar(SSIM_C2);
    let map = luminance_num.mul(contrast_num)?.div(luminance_den.mul(contrast_den)?)?;
    Ok(map.mean())
}
