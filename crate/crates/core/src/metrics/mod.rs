//! Full-reference (MSE, PSNR, SSIM) and no-reference (UCIQE, UIQM)
//! image quality metrics.

pub mod color;
mod noref;

pub use noref::{uciqe, uiqm, UciqeReport, UiqmReport};

use crate::error::{Error, Result};
use crate::image::{ImageRGB, CHANNELS};

/// Mean squared difference over all pixels and channels.
pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio for peak 1.0; `f64::INFINITY` for identical
/// images.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Single-scale SSIM with a uniform 8×8 window at every position,
/// averaged over windows and then channels.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let (pa, pb) = (a.channel(c), b.channel(c));
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / CHANNELS as f64)
}
