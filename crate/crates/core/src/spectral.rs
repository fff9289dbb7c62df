//! Frequency-domain feature interaction.
//!
//! Source and target feature maps are moved to a DC-centred 2D spectrum,
//! split into low and high bands by a radially symmetric Gaussian mask, and
//! recombined crosswise: the source's high band with the target's low band
//! carries most of the weight, the opposite pairing the rest.
//!
//! Conventions: the forward transform is unscaled, the inverse is scaled by
//! `1 / (H·W)`. Frequencies are normalised so `u, v ∈ [-0.5, 0.5)`.

use ndarray::{s, Array, Array2, Array3, Axis, Dimension, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use crate::error::{ensure_same_shape, FiaError, Result};

/// Per-channel 2D DFT coefficients with the DC bin at `(H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub coeffs: Array3<Complex64>,
}

impl Spectrum {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.coeffs.dim()
    }
}

/// Gaussian low-pass mask over the centred frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LowPassFilter {
    pub mask: Array2<f64>,
    pub sigma: f64,
    pub normalized: bool,
}

/// Band weights: `lambda1` scales (source high + target low), `lambda2`
/// scales (source low + target high).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    lambda1: f64,
    lambda2: f64,
}

impl FusionWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1.is_finite() && lambda2.is_finite()) || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(FiaError::invalid(format!(
                "fusion weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn swapped(&self) -> Self {
        Self {
            lambda1: self.lambda2,
            lambda2: self.lambda1,
        }
    }
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.2,
        }
    }
}

/// Normalised frequency of centred bin `i` on an axis of length `n`.
pub fn centered_frequency(i: usize, n: usize) -> f64 {
    (i as f64 - (n / 2) as f64) / n as f64
}

fn centered_to_raw(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

fn raw_to_centered(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(h: usize, w: usize, direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows: planner.plan_fft(w, direction),
            cols: planner.plan_fft(h, direction),
        }
    }

    /// In-place unscaled 2D transform of every channel.
    fn apply(&self, data: &mut Array3<Complex64>) {
        let (_, h, _) = data.dim();
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for mut channel in data.axis_iter_mut(Axis(0)) {
            for mut row in channel.axis_iter_mut(Axis(0)) {
                match row.as_slice_mut() {
                    Some(buf) => self.rows.process(buf),
                    None => {
                        let mut buf = row.to_vec();
                        self.rows.process(&mut buf);
                        row.iter_mut().zip(buf).for_each(|(d, v)| *d = v);
                    }
                }
            }
            for mut col in channel.axis_iter_mut(Axis(1)) {
                column.iter_mut().zip(col.iter()).for_each(|(d, v)| *d = *v);
                self.cols.process(&mut column);
                col.iter_mut().zip(column.iter()).for_each(|(d, v)| *d = *v);
            }
        }
    }
}

/// Per-channel 2D DFT, shifted so DC sits at the grid centre.
pub fn fft2(f: &Array3<f64>) -> Result<Spectrum> {
    let (c, h, w) = f.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(FiaError::invalid(format!("empty grid {c}x{h}x{w}")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(FiaError::NonFinite("fft2 input".into()));
    }
    let mut raw = f.mapv(|v| Complex64::new(v, 0.0));
    Plans::new(h, w, FftDirection::Forward).apply(&mut raw);
    let coeffs = Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        raw[[ch, centered_to_raw(i, h), centered_to_raw(j, w)]]
    });
    Ok(Spectrum { coeffs })
}

/// Inverse of [`fft2`], returning the real part and the largest absolute
/// imaginary residue.
pub fn ifft2_with_residue(s: &Spectrum) -> (Array3<f64>, f64) {
    let (c, h, w) = s.dim();
    if c == 0 || h == 0 || w == 0 {
        return (Array3::zeros((c, h, w)), 0.0);
    }
    let mut raw = Array3::from_shape_fn((c, h, w), |(ch, k, l)| {
        s.coeffs[[ch, raw_to_centered(k, h), raw_to_centered(l, w)]]
    });
    Plans::new(h, w, FftDirection::Inverse).apply(&mut raw);
    let scale = 1.0 / (h * w) as f64;
    let residue = raw.iter().fold(0.0f64, |m, z| m.max((z.im * scale).abs()));
    (raw.mapv(|z| z.re * scale), residue)
}

/// Real part of the inverse transform.
pub fn ifft2(s: &Spectrum) -> Array3<f64> {
    ifft2_with_residue(s).0
}

/// Radial profile of the low-pass mask at normalised radius `r`.
///
/// Unnormalised, this is `exp(-r²/2σ²) / (2πσ²)`; normalised, it is divided by
/// its value at `r = 0`.
pub fn gaussian_lowpass_value(r: f64, sigma: f64, normalized: bool) -> f64 {
    let peak = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let value = peak * (-(r * r) / (2.0 * sigma * sigma)).exp();
    if normalized {
        value / peak
    } else {
        value
    }
}

/// Builds an `h × w` Gaussian low-pass mask over the centred grid.
///
/// The unnormalised amplitude exceeds one for `σ < 1/√(2π)`; those values are
/// clamped so the mask stays in `[0, 1]`.
pub fn make_gaussian_lowpass(h: usize, w: usize, sigma: f64, normalized: bool) -> Result<LowPassFilter> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(FiaError::invalid(format!("filter sigma must be positive, got {sigma}")));
    }
    if h == 0 || w == 0 {
        return Err(FiaError::invalid("filter grid must be non-empty"));
    }
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        let u = centered_frequency(i, h);
        let v = centered_frequency(j, w);
        gaussian_lowpass_value((u * u + v * v).sqrt(), sigma, normalized).min(1.0)
    });
    Ok(LowPassFilter {
        mask,
        sigma,
        normalized,
    })
}

/// Splits a spectrum into `(high, low)` bands, `low = s·L`, `high = s·(1 − L)`.
///
/// `high` is formed as `s − s·L` and `low` as `s − high`. For mask values in
/// `[0, 1]` the second subtraction is exact (Sterbenz), so `high + low`
/// equals `s` bit for bit.
pub fn decompose(s: &Spectrum, filter: &LowPassFilter) -> Result<(Spectrum, Spectrum)> {
    let (c, h, w) = s.dim();
    if filter.mask.dim() != (h, w) {
        return Err(FiaError::shape(&[h, w], filter.mask.shape()));
    }
    let mut high = Array3::zeros((c, h, w));
    let mut low = Array3::zeros((c, h, w));
    for ch in 0..c {
        Zip::from(high.slice_mut(s![ch, .., ..]))
            .and(low.slice_mut(s![ch, .., ..]))
            .and(s.coeffs.slice(s![ch, .., ..]))
            .and(&filter.mask)
            .for_each(|hi, lo, &z, &l| {
                let (h_re, l_re) = split_exact(z.re, l);
                let (h_im, l_im) = split_exact(z.im, l);
                *hi = Complex64::new(h_re, h_im);
                *lo = Complex64::new(l_re, l_im);
            });
    }
    Ok((Spectrum { coeffs: high }, Spectrum { coeffs: low }))
}

#[inline]
fn split_exact(x: f64, l: f64) -> (f64, f64) {
    let high = x - x * l;
    (high, x - high)
}

/// Cross-weighted band fusion of two real feature maps, returned in the
/// spatial domain.
pub fn fri_fuse(
    f_src: &Array3<f64>,
    f_tar: &Array3<f64>,
    filter: &LowPassFilter,
    weights: FusionWeights,
) -> Result<Array3<f64>> {
    ensure_same_shape(f_src, f_tar)?;
    // With weights summing to one, fusing a map with itself is the identity.
    if weights.lambda1 + weights.lambda2 == 1.0 && f_src == f_tar {
        return Ok(f_tar.clone());
    }
    let (src_high, src_low) = decompose(&fft2(f_src)?, filter)?;
    let (tar_high, tar_low) = decompose(&fft2(f_tar)?, filter)?;
    let (l1, l2) = (weights.lambda1, weights.lambda2);
    let mut fused = Array3::zeros(src_high.dim());
    Zip::from(&mut fused)
        .and(&src_high.coeffs)
        .and(&tar_low.coeffs)
        .and(&src_low.coeffs)
        .and(&tar_high.coeffs)
        .for_each(|out, &sh, &tl, &sl, &th| *out = (sh + tl) * l1 + (sl + th) * l2);
    Ok(ifft2(&Spectrum { coeffs: fused }))
}

/// Elementwise mean of two feature maps, the additive alternative to
/// [`fri_fuse`].
pub fn additive_fuse<D: Dimension>(f_src: &Array<f64, D>, f_tar: &Array<f64, D>) -> Result<Array<f64, D>> {
    ensure_same_shape(f_src, f_tar)?;
    Ok(Zip::from(f_src).and(f_tar).map_collect(|&a, &b| 0.5 * (a + b)))
}
