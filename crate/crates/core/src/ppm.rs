//! Binary PPM (P6, maxval 255) reading and writing.

use std::path::Path;

use ndarray::Array3;

use crate::codec::ImageBuffer;
use crate::error::{FiaError, Result};

pub fn to_ppm_bytes(img: &ImageBuffer) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let px = img.pixels();
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out.push((px[[c, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn from_ppm_bytes(bytes: &[u8], provenance: &str) -> Result<ImageBuffer> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(FiaError::Format("not a binary PPM (P6)".into()));
    }
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(FiaError::Format(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(FiaError::Format("empty image".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(FiaError::Format("truncated header".into())),
    }
    let raster = &bytes[pos..];
    let expected = 3 * width * height;
    if raster.len() != expected {
        return Err(FiaError::Format(format!(
            "expected {expected} raster bytes, found {}",
            raster.len()
        )));
    }
    let pixels = Array3::from_shape_fn((3, height, width), |(c, i, j)| {
        raster[(i * width + j) * 3 + c] as f64 / 255.0
    });
    ImageBuffer::new(pixels, provenance)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    from_ppm_bytes(&bytes, &path.display().to_string())
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, to_ppm_bytes(img))?;
    Ok(())
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(FiaError::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FiaError::Format(format!("bad header field {:?}", String::from_utf8_lossy(tok))))
}
