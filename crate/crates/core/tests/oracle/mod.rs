//! Direct-summation reference for the centred DFT and band fusion.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use std::f64::consts::PI;

fn freq(i: usize, n: usize) -> f64 {
    (i as f64 - (n / 2) as f64) / n as f64
}

/// `F[c, i, j] = Σ f[c, y, x] · exp(-2πi (k y / H + l x / W))` with
/// `k = i − H/2`, `l = j − W/2`.
pub fn dft(f: &Array3<f64>) -> Array3<Complex64> {
    let (c, h, w) = f.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let (k, l) = (i as f64 - (h / 2) as f64, j as f64 - (w / 2) as f64);
        let mut acc = Complex64::new(0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let phase = -2.0 * PI * (k * y as f64 / h as f64 + l * x as f64 / w as f64);
                acc += Complex64::from_polar(f[[ch, y, x]], phase);
            }
        }
        acc
    })
}

pub fn idft(s: &Array3<Complex64>) -> Array3<f64> {
    let (c, h, w) = s.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let (k, l) = (i as f64 - (h / 2) as f64, j as f64 - (w / 2) as f64);
                let phase = 2.0 * PI * (k * y as f64 / h as f64 + l * x as f64 / w as f64);
                acc += s[[ch, i, j]] * Complex64::from_polar(1.0, phase);
            }
        }
        acc.re / (h * w) as f64
    })
}

pub fn lowpass(h: usize, w: usize, sigma: f64, normalized: bool) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| {
        let r2 = freq(i, h).powi(2) + freq(j, w).powi(2);
        let g = (-r2 / (2.0 * sigma * sigma)).exp();
        if normalized {
            g
        } else {
            (g / (2.0 * PI * sigma * sigma)).min(1.0)
        }
    })
}

/// `ifft(λ1 (S·(1−L) + T·L) + λ2 (S·L + T·(1−L)))`.
pub fn fuse(src: &Array3<f64>, tar: &Array3<f64>, mask: &Array2<f64>, l1: f64, l2: f64) -> Array3<f64> {
    let (s, t) = (dft(src), dft(tar));
    let fused = Array3::from_shape_fn(s.dim(), |(c, i, j)| {
        let l = mask[[i, j]];
        let (sh, sl) = (s[[c, i, j]] * (1.0 - l), s[[c, i, j]] * l);
        let (th, tl) = (t[[c, i, j]] * (1.0 - l), t[[c, i, j]] * l);
        (sh + tl) * l1 + (sl + th) * l2
    });
    idft(&fused)
}
