//! Images for the kernel-fitting task.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::kernelgen::gabor::{gabor_layer_forward, GaborLayer};
use crate::kernelgen::grid::make_grid;
use crate::numerics::io::read_file;
use crate::{RngStream, Scalar, Tensor};

/// A Gabor image on the `[−1, 1]²` grid:
/// `exp(−½ γ² (x² + y²)) · sin(2π f (x cos θ + y sin θ) + phase)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborTarget {
    /// Carrier frequency in Hz over the two-unit domain.
    pub freq: f64,
    /// Carrier direction (radians from the x axis).
    pub orientation: f64,
    /// Envelope width; the envelope's standard deviation is `1 / γ`.
    pub gamma: f64,
    /// `π / 2` gives a cosine carrier with value 1 at the origin.
    pub phase: f64,
}

impl GaborTarget {
    pub fn new(freq: f64) -> Self {
        GaborTarget {
            freq,
            orientation: 0.0,
            gamma: 2.0,
            phase: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Samples `t` on a `k × k` grid. Amplitude is 1: the envelope peaks at 1 at
/// the origin.
///
/// The image is a one-channel Gabor layer evaluated by the kernel
/// generator's own forward pass.
pub fn make_gabor_target<T: Scalar>(k: usize, t: &GaborTarget) -> Result<Tensor<T>> {
    ensure!(t.freq >= 0.0 && t.freq.is_finite(), "target frequency must be finite and ≥ 0");
    ensure!(t.gamma > 0.0 && t.gamma.is_finite(), "envelope width must be positive");
    let grid = make_grid::<T>(2, k)?;
    let w = std::f64::consts::TAU * t.freq;
    let layer = GaborLayer::from_widths(
        vec![Tensor::from_f64([1], &[t.gamma])?],
        vec![Tensor::zeros([1]), Tensor::zeros([1])],
        Tensor::from_f64([1, 2], &[w * t.orientation.cos(), w * t.orientation.sin()])?,
        Tensor::from_f64([1], &[t.phase])?,
    )?;
    gabor_layer_forward(&grid, &layer)?.reshape([k, k])
}

/// `k × k` image of independent `U(−1, 1)` values.
pub fn noise_target<T: Scalar>(k: usize, seed: u64) -> Result<Tensor<T>> {
    RngStream::new(seed).uniform(-1.0, 1.0, k * k)?.reshape([k, k])
}

/// Loads a square image from an `FXT1` tensor file (values as stored) or an
/// 8-bit binary PGM (`P5`, values scaled to `[0, 1]`).
pub fn load_image_target<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img: Tensor<T> = if path.extension().is_some_and(|e| e == "pgm") {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, pixels) = parse_pgm(&bytes)?;
        Tensor::new([h, w], pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect())?
    } else {
        read_file(path)?
    };
    ensure!(
        img.rank() == 2 && img.shape()[0] == img.shape()[1],
        "target image must be square, got {:?}",
        img.shape()
    );
    Ok(img)
}

/// Parses a binary 8-bit PGM into `(width, height, pixels)`.
fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = |d: &str| Error::format("PGM image", d.to_owned());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("only binary P5 images are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the pixels
    let pixels = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, pixels))
}
