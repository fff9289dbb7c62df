//! Background-preservation metrics: MSE, PSNR, SSIM and a spectral structure
//! distance used as a stand-in for feature-based structure metrics.

use ndarray::{Array2, Array3, Axis};

use crate::codec::ImageBuffer;
use crate::error::{FiaError, Result};
use crate::spectral::fft2;

pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    /// Decibels; `f64::INFINITY` when `mse == 0`.
    pub psnr: f64,
    pub ssim: f64,
    pub spectral_structure_distance: f64,
    pub mask: Option<Array2<bool>>,
}

impl MetricReport {
    pub fn compute(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&Array2<bool>>) -> Result<Self> {
        let mse = mse(a, b, mask)?;
        Ok(Self {
            mse,
            psnr: psnr_from_mse(mse),
            ssim: ssim(a, b)?,
            spectral_structure_distance: spectral_structure_distance(a, b)?,
            mask: mask.cloned(),
        })
    }
}

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(FiaError::shape(a.pixels().shape(), b.pixels().shape()));
    }
    Ok(())
}

/// Mean squared difference over all channels of the pixels selected by
/// `mask` (every pixel when `None`).
pub fn mse(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&Array2<bool>>) -> Result<f64> {
    check_shapes(a, b)?;
    let (_, h, w) = a.pixels().dim();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(FiaError::shape(&[h, w], m.shape()));
        }
        if !m.iter().any(|&v| v) {
            return Err(FiaError::invalid("mask selects no pixels"));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.pixels().axis_iter(Axis(0)).zip(b.pixels().axis_iter(Axis(0))) {
        for ((idx, &x), &y) in pa.indexed_iter().zip(pb.iter()) {
            if mask.is_none_or(|m| m[idx]) {
                sum += (x - y) * (x - y);
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio with peak 1.0.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&Array2<bool>>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, mask)?))
}

/// Mean SSIM over non-overlapping 8×8 windows of the grayscale images.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_shapes(a, b)?;
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let (h, w) = ga.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FiaError::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0;
    let mut windows = 0usize;
    for wi in 0..h / SSIM_WINDOW {
        for wj in 0..w / SSIM_WINDOW {
            let rows = wi * SSIM_WINDOW..(wi + 1) * SSIM_WINDOW;
            let cols = wj * SSIM_WINDOW..(wj + 1) * SSIM_WINDOW;
            let pa = ga.slice(ndarray::s![rows.clone(), cols.clone()]);
            let pb = gb.slice(ndarray::s![rows, cols]);
            total += window_ssim(pa.iter().copied(), pb.iter().copied());
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// SSIM of two equally sized samples with population statistics.
pub fn window_ssim(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let pairs: Vec<(f64, f64)> = a.zip(b).collect();
    let n = pairs.len() as f64;
    let mu_a = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mu_b = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        var_a += (x - mu_a) * (x - mu_a);
        var_b += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    let (var_a, var_b, cov) = (var_a / n, var_b / n, cov / n);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// `‖log(1 + |F_a|) − log(1 + |F_b|)‖₂ / (H·W)` over grayscale spectra.
pub fn spectral_structure_distance(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    let spec = |img: &ImageBuffer| -> Result<Array2<f64>> {
        let g = img.grayscale().insert_axis(Axis(0));
        let s = fft2(&Array3::from(g))?;
        Ok(s.coeffs.index_axis(Axis(0), 0).mapv(|z| z.norm().ln_1p()))
    };
    let (sa, sb) = (spec(a)?, spec(b)?);
    let sq: f64 = sa.iter().zip(sb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt() / (h * w) as f64)
}
