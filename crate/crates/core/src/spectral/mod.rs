//! Bandwidth analysis of generated kernels.
//!
//! Frequencies are in Hz over the two-unit kernel domain: a `k`-point
//! kernel is sampled at `(k − 1) / 2` samples per unit and resolves
//! frequencies up to `(k − 1) / 4`.

pub mod bounds;
pub mod oracle;

use crate::error::{ensure, Result};
use crate::flexconv::mask::{gaussian_mask, GaussianMask};
use crate::kernelgen::grid::make_grid;
use crate::kernelgen::magnet::{magnet_forward, Magnet};
use crate::{Scalar, Tensor};

pub use bounds::{
    aliasing_loss, aliasing_loss_on_tape, max_freq_envelope, max_freq_flexconv, max_freq_magnet, max_freq_magnet_on_tape,
    max_freq_mask, max_freq_mask_on_tape, max_freq_sine, nyquist,
};
pub use oracle::{empirical_spectrum, enumerate_frequency_set, spectral_mass_above, FrequencySet, FrequencyTerm, BIN_HZ};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectrumConfig {
    /// Envelope cutoff in standard deviations.
    pub sigma_cut: f64,
    /// Empirical bins below this fraction of the peak magnitude are ignored.
    pub significance_ratio: f64,
    /// Use `max_j W_g` instead of `max_j |W_g|` for sine frequencies.
    pub signed_weights: bool,
    /// Window applied to the samples before the empirical transform.
    pub taper: Taper,
}

/// Sample window for the empirical spectrum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Taper {
    /// Samples as they are; edge discontinuities of the periodic extension
    /// leak into every bin.
    #[default]
    Rectangular,
    Hann,
    /// Four-term Blackman-Harris: sidelobes below −92 dB, main lobe ±2 bins.
    BlackmanHarris,
}

impl Taper {
    /// Weight of sample `i` out of `n` (periodic form).
    pub fn weight(self, i: usize, n: usize) -> f64 {
        let t = std::f64::consts::TAU * i as f64 / n as f64;
        match self {
            Taper::Rectangular => 1.0,
            Taper::Hann => 0.5 - 0.5 * t.cos(),
            Taper::BlackmanHarris => 0.35875 - 0.48829 * t.cos() + 0.14128 * (2.0 * t).cos() - 0.01168 * (3.0 * t).cos(),
        }
    }
}

impl std::str::FromStr for Taper {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" => Ok(Taper::Rectangular),
            "hann" => Ok(Taper::Hann),
            "blackman-harris" => Ok(Taper::BlackmanHarris),
            other => Err(crate::Error::contract(format!("unknown taper {other:?}"))),
        }
    }
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            sigma_cut: 2.0,
            significance_ratio: 1e-3,
            signed_weights: false,
            taper: Taper::Rectangular,
        }
    }
}

impl SpectrumConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma_cut > 0.0, "sigma_cut must be positive");
        ensure!(
            self.significance_ratio > 0.0 && self.significance_ratio < 1.0,
            "significance_ratio must lie in (0, 1)"
        );
        Ok(())
    }
}

/// Analytic and measured bandwidth of one layer's kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub f_plus_magnet: f64,
    pub f_plus_mask: f64,
    pub f_plus_flexconv: f64,
    pub f_nyquist: f64,
    pub empirical_max: f64,
    /// Penalty on `f_plus_flexconv`.
    pub aliasing_loss: f64,
}

impl SpectrumReport {
    pub const CSV_HEADER: &'static str =
        "layer,f_plus_magnet,f_plus_mask,f_plus_flexconv,f_nyquist,empirical_max,aliasing_loss";

    pub fn csv_row(&self, layer: &str) -> String {
        format!(
            "{layer},{},{},{},{},{},{}",
            self.f_plus_magnet, self.f_plus_mask, self.f_plus_flexconv, self.f_nyquist, self.empirical_max, self.aliasing_loss
        )
    }
}

/// Bounds for `magnet`, optionally windowed by `mask`, with the empirical
/// maximum of the same (masked) kernel sampled at `k` points per axis.
/// Without a mask `f_plus_mask` is 0.
pub fn spectrum_report<T: Scalar>(
    magnet: &Magnet<Tensor<T>>,
    mask: Option<&GaussianMask<Tensor<T>>>,
    k: usize,
    cfg: &SpectrumConfig,
) -> Result<SpectrumReport> {
    cfg.validate()?;
    let grid = make_grid(magnet.shape.dims, k)?;
    let mut kernel = magnet_forward(&grid, magnet)?;
    let (f_plus_magnet, f_plus_mask, f_plus_flexconv) = match mask {
        Some(mask) => {
            let w = gaussian_mask(&grid, mask)?;
            let p = w.len();
            let data = kernel.values.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v *= w.data()[i % p];
            }
            max_freq_flexconv(magnet, mask, cfg)?
        }
        None => {
            let f = max_freq_magnet(magnet, cfg)?;
            (f, 0.0, f)
        }
    };
    let f_nyquist = nyquist(k)?;
    Ok(SpectrumReport {
        f_plus_magnet,
        f_plus_mask,
        f_plus_flexconv,
        f_nyquist,
        empirical_max: empirical_spectrum(&kernel, cfg)?,
        aliasing_loss: aliasing_loss(f_plus_flexconv, f_nyquist),
    })
}
