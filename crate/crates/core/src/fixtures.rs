//! Procedural test images. Everything here is generated, nothing is loaded.

use ndarray::{Array2, Array3};

use crate::codec::ImageBuffer;
use crate::error::Result;

/// A named image with an optional background mask and an edit prompt pair.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub image: ImageBuffer,
    /// `true` on pixels that an edit should leave alone.
    pub background: Option<Array2<bool>>,
    pub source_prompt: &'static str,
    pub target_prompt: &'static str,
}

pub fn gradient(h: usize, w: usize) -> Result<ImageBuffer> {
    let pixels = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let y = i as f64 / (h.max(2) - 1) as f64;
        let x = j as f64 / (w.max(2) - 1) as f64;
        match c {
            0 => x,
            1 => y,
            _ => 0.5 * (x + y),
        }
    });
    ImageBuffer::new(pixels, "fixture:gradient")
}

pub fn checkerboard(h: usize, w: usize, cell: usize) -> Result<ImageBuffer> {
    let cell = cell.max(1);
    let pixels = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let on = (i / cell + j / cell).is_multiple_of(2);
        let base = if on { 0.8 } else { 0.2 };
        base - 0.05 * c as f64
    });
    ImageBuffer::new(pixels, "fixture:checkerboard")
}

/// A warm disc on a cool striped background; the mask marks every pixel
/// outside the disc plus a two-pixel margin.
pub fn blob_on_stripes(h: usize, w: usize) -> Result<(ImageBuffer, Array2<bool>)> {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let r = h.min(w) as f64 * 0.25;
    let dist = |i: usize, j: usize| ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt();
    let pixels = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        if dist(i, j) <= r {
            [0.85, 0.35, 0.2][c]
        } else {
            let stripe = 0.5 + 0.3 * (j as f64 * std::f64::consts::PI / 4.0 + i as f64 * 0.2).sin();
            [0.25 * stripe, 0.6 * stripe, 0.3 + 0.5 * stripe][c]
        }
    });
    let mask = Array2::from_shape_fn((h, w), |(i, j)| dist(i, j) > r + 2.0);
    Ok((ImageBuffer::new(pixels, "fixture:blob_on_stripes")?, mask))
}

pub fn steering(h: usize, w: usize) -> Result<Fixture> {
    let (image, mask) = blob_on_stripes(h, w)?;
    Ok(Fixture {
        name: "blob",
        image,
        background: Some(mask),
        source_prompt: "a red ball in front of a striped wall",
        target_prompt: "a blue cube in front of a striped wall",
    })
}

/// The full set, keyed by the names accepted on the command line.
pub fn fixture_set(h: usize, w: usize) -> Result<Vec<Fixture>> {
    Ok(vec![
        steering(h, w)?,
        Fixture {
            name: "gradient",
            image: gradient(h, w)?,
            background: None,
            source_prompt: "a smooth gradient",
            target_prompt: "a rough gradient",
        },
        Fixture {
            name: "checker",
            image: checkerboard(h, w, 8)?,
            background: None,
            source_prompt: "a black and white checkerboard",
            target_prompt: "a red and white checkerboard",
        },
    ])
}

pub fn by_name(name: &str, h: usize, w: usize) -> Result<Fixture> {
    fixture_set(h, w)?
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| crate::FiaError::invalid(format!("unknown fixture {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_in_range_and_deterministic() {
        let a = fixture_set(32, 32).unwrap();
        let b = fixture_set(32, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert!(x.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(x.image.pixels().dim(), (3, 32, 32));
        }
    }

    #[test]
    fn blob_mask_excludes_the_disc() {
        let (img, mask) = blob_on_stripes(32, 32).unwrap();
        assert!(!mask[[16, 16]]);
        assert!(mask[[0, 0]]);
        let bg = mask.iter().filter(|&&m| m).count();
        assert!(bg > 32 * 32 / 2 && bg < 32 * 32);
        assert_eq!(img.pixels()[[0, 16, 16]], 0.85);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(by_name("checker", 16, 16).unwrap().name, "checker");
        assert!(by_name("nope", 16, 16).is_err());
    }
}
