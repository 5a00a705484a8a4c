//! Reconstruction quality metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over all target samples and features.
pub fn recon_mse(truth: &Tensor, recon: &Tensor) -> Result<f64> {
    if truth.shape() != recon.shape() {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} vs target {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    if truth.is_empty() {
        return Err(Error::contract("empty target"));
    }
    Ok(truth
        .values()
        .iter()
        .zip(recon.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.len() as f64)
}

/// PSNR in dB (capped at 100 for near-zero error) and single-window global
/// SSIM. Inputs are expected on a [0,1] scale.
pub fn image_quality(truth: &Tensor, recon: &Tensor) -> Result<(f64, f64)> {
    let mse = recon_mse(truth, recon)?;
    let psnr = if mse < 1e-10 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    };

    let n = truth.len() as f64;
    let mu_x = truth.values().iter().sum::<f64>() / n;
    let mu_y = recon.values().iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in truth.values().iter().zip(recon.values()) {
        var_x += (a - mu_x) * (a - mu_x);
        var_y += (b - mu_y) * (b - mu_y);
        cov += (a - mu_x) * (b - mu_y);
    }
    var_x /= n;
    var_y /= n;
    cov /= n;
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let ssim = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
    Ok((psnr, ssim))
}
