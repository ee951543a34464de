//! Quality metrics for generation traces. PSNR is computed on 8-bit
//! integers with exact integer MSE accumulation, capped at 100 dB so
//! bit-exact generations stay plottable.

use crate::error::{Result, SicError};
use crate::tensor::{Scalar, Tensor};

/// Reported PSNR ceiling; reached exactly when two images are bit-identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean squared error between two 8-bit buffers, on the 0–255 scale.
/// Exact: the sum of squared differences is accumulated in integers.
pub fn mse_u8(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SicError::usage(format!(
            "mse_u8: buffer sizes {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as i64 - y as i64;
        sum += (d * d) as u64;
    }
    Ok(sum as f64 / a.len() as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// psnr = 10·log₁₀(255²/mse) between 8-bit images, capped at 100 dB.
pub fn psnr_u8(a: &[u8], b: &[u8]) -> Result<f64> {
    Ok(psnr_from_mse(mse_u8(a, b)?))
}

/// MSE between a real-valued reconstruction (nominally in [0,1]) and an
/// 8-bit reference, on the 0–255 scale. Used for the reversibility measure
/// d(x₀, x̄₀), where x̄₀ never passes through rounding/clipping, and for
/// traces of rounding/clipping-ablated runs.
pub fn mse_real_vs_u8<T: Scalar>(real: &Tensor<T>, bytes: &[u8]) -> Result<f64> {
    if real.numel() != bytes.len() || bytes.is_empty() {
        return Err(SicError::usage(format!(
            "mse_real_vs_u8: {} tensor elements vs {} bytes",
            real.numel(),
            bytes.len()
        )));
    }
    let mut sum = 0.0f64;
    for (&r, &b) in real.data().iter().zip(bytes) {
        let d = r.to_f64() * 255.0 - b as f64;
        sum += d * d;
    }
    Ok(sum / bytes.len() as f64)
}

/// PSNR form of [`mse_real_vs_u8`], same cap as [`psnr_u8`].
pub fn psnr_real_vs_u8<T: Scalar>(real: &Tensor<T>, bytes: &[u8]) -> Result<f64> {
    Ok(psnr_from_mse(mse_real_vs_u8(real, bytes)?))
}

/// MSE between two real-valued images on the 0–255 scale.
pub fn mse_real<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(SicError::usage(format!(
            "mse_real: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut sum = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x.to_f64() - y.to_f64()) * 255.0;
        sum += d * d;
    }
    Ok(sum / a.numel() as f64)
}

/// PSNR form of [`mse_real`]; bit-identical inputs hit the cap exactly.
pub fn psnr_real<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse_real(a, b)?))
}
