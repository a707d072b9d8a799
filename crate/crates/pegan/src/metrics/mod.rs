//! Quantitative evaluation: PSNR, SSIM, UQI, recognition-model accuracy,
//! and visual-Turing-sheet generation.
//!
//! Parameterizations are frozen for reproducibility: SSIM uses an 11x11
//! Gaussian window (sigma 1.5) with K1 = 0.01, K2 = 0.03; UQI is the same
//! local statistic with both stabilizers at zero over a uniform 8x8 window,
//! sliding at stride 1. Per-image values aggregate by arithmetic mean; PSNR
//! aggregates as the mean of per-image decibels.

mod recognizer;
mod report;
mod turing;

pub use recognizer::{recognition_accuracy, train_recognizer, Recognizer, RecognizerConfig};
pub use report::{evaluate_generator, evaluate_images, BandReport, EvalItem, MetricsReport};
pub use turing::{
    grade_responses, parse_answer_key, turing_sheet, write_answer_key, TuringLabel,
};

use crate::data::GlyphImage;
use crate::error::{Error, Result};

fn check_same_size(x: &GlyphImage, y: &GlyphImage) -> Result<()> {
    if x.width != y.width || x.height != y.height {
        return Err(Error::Shape(format!(
            "metric on {}x{} vs {}x{} images",
            x.width, x.height, y.width, y.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels; identical images return the
/// +infinity sentinel (`f64::INFINITY`).
pub fn psnr(x: &GlyphImage, y: &GlyphImage, max_value: f64) -> Result<f64> {
    check_same_size(x, y)?;
    let n = x.pixels.len() as f64;
    let mse: f64 = x
        .pixels
        .iter()
        .zip(&y.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity: mean of the local SSIM statistic over all valid
/// (fully inside) 11x11 windows, Gaussian-weighted.
pub fn ssim(x: &GlyphImage, y: &GlyphImage, max_value: f64) -> Result<f64> {
    check_same_size(x, y)?;
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            x.width, x.height
        )));
    }
    let w = gaussian_window();
    let c1 = (SSIM_K1 * max_value) * (SSIM_K1 * max_value);
    let c2 = (SSIM_K2 * max_value) * (SSIM_K2 * max_value);
    let (width, height) = (x.width, x.height);
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..=height - SSIM_WINDOW {
        for wx in 0..=width - SSIM_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for i in 0..SSIM_WINDOW {
                let row = (wy + i) * width + wx;
                let wrow = &w[i * SSIM_WINDOW..(i + 1) * SSIM_WINDOW];
                for j in 0..SSIM_WINDOW {
                    let (a, b) = (x.pixels[row + j], y.pixels[row + j]);
                    let g = wrow[j];
                    mx += g * a;
                    my += g * b;
                    sxx += g * a * a;
                    syy += g * b * b;
                    sxy += g * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let numerator = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let denominator = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += numerator / denominator;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

const UQI_WINDOW: usize = 8;

/// Universal quality index: the SSIM local statistic with both stabilizing
/// constants at zero, over a uniform 8x8 sliding window. Windows with a zero
/// denominator count as quality 1 when the two patches are identical and are
/// skipped otherwise; if every window is skipped the result is undefined and
/// surfaces as a numeric error.
pub fn uqi(x: &GlyphImage, y: &GlyphImage) -> Result<f64> {
    check_same_size(x, y)?;
    if x.width < UQI_WINDOW || x.height < UQI_WINDOW {
        return Err(Error::Shape(format!(
            "uqi needs at least {UQI_WINDOW}x{UQI_WINDOW} images, got {}x{}",
            x.width, x.height
        )));
    }
    let n = (UQI_WINDOW * UQI_WINDOW) as f64;
    let (width, height) = (x.width, x.height);
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..=height - UQI_WINDOW {
        for wx in 0..=width - UQI_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            let mut identical = true;
            for i in 0..UQI_WINDOW {
                let row = (wy + i) * width + wx;
                for j in 0..UQI_WINDOW {
                    let (a, b) = (x.pixels[row + j], y.pixels[row + j]);
                    identical &= a == b;
                    mx += a;
                    my += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            mx /= n;
            my /= n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            let numerator = (2.0 * (mx * my)) * (2.0 * cov);
            let denominator = (mx * mx + my * my) * (vx + vy);
            if denominator == 0.0 {
                if identical {
                    total += 1.0;
                    windows += 1;
                }
                continue;
            }
            total += numerator / denominator;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::Numeric(
            "uqi undefined: every window degenerated (distinct constant patches)".into(),
        ));
    }
    Ok(total / windows as f64)
}
