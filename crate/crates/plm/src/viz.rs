//! Binary PGM (P5) rendering of contact maps: ground truth as black
//! and white, predicted probabilities as a grayscale ramp.

use crate::corpus::ContactMap;
use crate::error::{Error, Result};
use crate::metrics::ContactBand;

/// Wraps one byte per pixel in a P5 header, row-major, maxval 255.
pub fn pgm_bytes(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "{} pixels cannot fill a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// True contacts render white (255), everything else black.
pub fn contact_truth_pixels(map: &ContactMap) -> Vec<u8> {
    let l = map.size();
    let mut pixels = vec![0u8; l * l];
    for i in 0..l {
        for j in 0..l {
            if map.contact(i, j) {
                pixels[i * l + j] = 255;
            }
        }
    }
    pixels
}

/// Probabilities in [0, 1] render as round(255 * p); inputs are clamped
/// first. The matrix must be square.
pub fn contact_score_pixels(scores: &[Vec<f64>]) -> Result<Vec<u8>> {
    let l = scores.len();
    if scores.iter().any(|row| row.len() != l) {
        return Err(Error::InvalidArgument("score matrix must be square".into()));
    }
    let mut pixels = Vec::with_capacity(l * l);
    for row in scores {
        for &s in row {
            pixels.push((255.0 * s.clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(pixels)
}

/// Blacks out every pixel whose |i - j| separation the band excludes.
pub fn apply_band(pixels: &mut [u8], size: usize, band: ContactBand) {
    for i in 0..size {
        for j in 0..size {
            if !band.admits(i.abs_diff(j)) {
                pixels[i * size + j] = 0;
            }
        }
    }
}
