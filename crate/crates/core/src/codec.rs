//! Lossless image↔latent codec: a space-to-depth patchify standing in for a
//! learned autoencoder.

use ndarray::Array3;

use crate::error::{FiaError, Result};

/// RGB image, `3 × H × W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pixels: Array3<f64>,
    pub provenance: String,
}

impl ImageBuffer {
    /// Wraps (and clamps) a `3 × H × W` pixel array.
    pub fn new(pixels: Array3<f64>, provenance: impl Into<String>) -> Result<Self> {
        if pixels.dim().0 != 3 {
            return Err(FiaError::invalid(format!(
                "image must have 3 channels, got {}",
                pixels.dim().0
            )));
        }
        Ok(Self {
            pixels: pixels.mapv(|v| v.clamp(0.0, 1.0)),
            provenance: provenance.into(),
        })
    }

    pub fn synthetic(pixels: Array3<f64>) -> Result<Self> {
        Self::new(pixels, "synthetic")
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Channel mean, `H × W`.
    pub fn grayscale(&self) -> ndarray::Array2<f64> {
        let (_, h, w) = self.pixels.dim();
        ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
            (self.pixels[[0, i, j]] + self.pixels[[1, i, j]] + self.pixels[[2, i, j]]) / 3.0
        })
    }
}

/// `(C, H, W) → (C·p², H/p, W/p)`; output channel `c·p² + dy·p + dx` at
/// `(i, j)` holds input `(c, i·p + dy, j·p + dx)`.
pub fn space_to_depth(x: &Array3<f64>, patch: usize) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(FiaError::invalid(format!(
            "grid {h}x{w} is not divisible by patch {patch}"
        )));
    }
    let pp = patch * patch;
    Ok(Array3::from_shape_fn((c * pp, h / patch, w / patch), |(k, i, j)| {
        let (ch, r) = (k / pp, k % pp);
        x[[ch, i * patch + r / patch, j * patch + r % patch]]
    }))
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(z: &Array3<f64>, patch: usize) -> Result<Array3<f64>> {
    let (k, h, w) = z.dim();
    let pp = patch * patch;
    if patch == 0 || k % pp != 0 {
        return Err(FiaError::invalid(format!(
            "{k} channels do not factor by patch {patch}"
        )));
    }
    Ok(Array3::from_shape_fn((k / pp, h * patch, w * patch), |(c, y, x)| {
        z[[c * pp + (y % patch) * patch + x % patch, y / patch, x / patch]]
    }))
}

pub fn encode(img: &ImageBuffer, patch: usize) -> Result<Array3<f64>> {
    space_to_depth(img.pixels(), patch)
}

pub fn decode(latent: &Array3<f64>, patch: usize) -> Result<ImageBuffer> {
    if latent.dim().0 != 3 * patch * patch {
        return Err(FiaError::invalid(format!(
            "latent with {} channels does not decode with patch {patch}",
            latent.dim().0
        )));
    }
    ImageBuffer::new(depth_to_space(latent, patch)?, "decoded")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        let n = (3 * h * w) as f64;
        ImageBuffer::synthetic(Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            ((c * h + i) * w + j) as f64 / n
        }))
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for patch in [1, 2, 4] {
            let img = ramp(8, 12);
            let back = decode(&encode(&img, patch).unwrap(), patch).unwrap();
            assert_eq!(back.pixels(), img.pixels());
        }
    }

    #[test]
    fn patch_one_is_identity() {
        let img = ramp(3, 5);
        assert_eq!(&encode(&img, 1).unwrap(), img.pixels());
    }

    #[test]
    fn quadrants_land_in_channel_blocks() {
        let img = ramp(4, 4);
        let z = encode(&img, 2).unwrap();
        assert_eq!(z.dim(), (12, 2, 2));
        for c in 0..3 {
            for (qi, qj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let block: Vec<f64> = (0..4).map(|r| z[[c * 4 + r, qi, qj]]).collect();
                let quadrant: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| img.pixels()[[c, 2 * qi + dy, 2 * qj + dx]])
                    .collect();
                assert_eq!(block, quadrant);
            }
        }
    }

    #[test]
    fn rejects_indivisible_grids() {
        assert!(encode(&ramp(5, 4), 2).is_err());
        assert!(decode(&Array3::zeros((10, 2, 2)), 2).is_err());
        assert!(space_to_depth(&Array3::zeros((1, 2, 2)), 0).is_err());
    }

    #[test]
    fn image_values_are_clamped() {
        let img = ImageBuffer::synthetic(Array3::from_elem((3, 1, 2), 1.7)).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
        assert!(ImageBuffer::synthetic(Array3::zeros((1, 2, 2))).is_err());
    }
}
