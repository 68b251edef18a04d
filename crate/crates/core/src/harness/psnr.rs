use candle_core::Tensor;

use crate::error::{invalid, Error, Result};
use crate::nn;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

/// `10 log10(peak^2 / MSE)`, or `cap` when the images are identical.
pub fn psnr(a: &[f64], b: &[f64], peak: f64, cap: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("psnr on {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("psnr of empty images"));
    }
    if !(peak > 0.0) {
        return Err(invalid(format!("peak must be positive, got {peak}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

/// PSNR of two generator outputs in `[-1, 1]`, measured after mapping to `[0, 1]`.
pub fn psnr_signed_unit(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let map = |t: &Tensor| -> Result<Vec<f64>> {
        Ok(nn::to_f64_vec(t)?.into_iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
    };
    psnr(&map(a)?, &map(b)?, 1.0, DEFAULT_PSNR_CAP)
}
