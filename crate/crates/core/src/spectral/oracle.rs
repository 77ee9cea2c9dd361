//! Brute-force and FFT checks for the analytic bounds.

use crate::error::{Error, Result};
use crate::kernelgen::magnet::{Kernel, Magnet};
use crate::numerics::fft::{bin_frequency, fft_nd};
use crate::spectral::bounds::max_freq_sine;
use crate::spectral::{SpectrumConfig, Taper};
use crate::{Scalar, Tensor};

pub const MAX_ENUM_LAYERS: usize = 4;
pub const MAX_ENUM_HIDDEN: usize = 8;

/// One combined frequency `Σ_l s_l ω_l[i_l]` (Hz) with the channel chosen in
/// every layer and the signs used (`signs[0]` is always `+1`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyTerm {
    pub hz: f64,
    pub channels: Vec<usize>,
    pub signs: Vec<i8>,
}

/// Every combined frequency of a network, where channel `i` of layer `l`
/// contributes its dominant sine frequency `ω_l[i] = f_sine(W_g[l, i, :])`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySet {
    pub terms: Vec<FrequencyTerm>,
}

impl FrequencySet {
    /// All frequencies including the mirrored (negated) terms.
    pub fn frequencies(&self) -> Vec<f64> {
        self.terms.iter().flat_map(|t| [t.hz, -t.hz]).collect()
    }

    pub fn max(&self) -> f64 {
        self.frequencies().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Enumerates `N_hid^L · 2^(L−1)` terms; refuses networks beyond
/// [`MAX_ENUM_LAYERS`] layers or [`MAX_ENUM_HIDDEN`] channels.
pub fn enumerate_frequency_set<T: Scalar>(m: &Magnet<Tensor<T>>, cfg: &SpectrumConfig) -> Result<FrequencySet> {
    let s = m.shape;
    if s.layers > MAX_ENUM_LAYERS {
        return Err(Error::TooLarge {
            what: "layers for frequency enumeration",
            got: s.layers,
            limit: MAX_ENUM_LAYERS,
        });
    }
    if s.hidden > MAX_ENUM_HIDDEN {
        return Err(Error::TooLarge {
            what: "channels for frequency enumeration",
            got: s.hidden,
            limit: MAX_ENUM_HIDDEN,
        });
    }
    let omega: Vec<Vec<f64>> = m
        .gabor
        .iter()
        .map(|g| {
            let w = g.weight.to_f64_vec();
            w.chunks(s.dims).map(|row| max_freq_sine(row, cfg)).collect()
        })
        .collect();
    let mut terms = Vec::new();
    let tuples = s.hidden.pow(s.layers as u32);
    for t in 0..tuples {
        let mut channels = Vec::with_capacity(s.layers);
        let mut rest = t;
        for _ in 0..s.layers {
            channels.push(rest % s.hidden);
            rest /= s.hidden;
        }
        for pattern in 0..1usize << (s.layers - 1) {
            let signs: Vec<i8> = (0..s.layers)
                .map(|l| if l > 0 && pattern >> (l - 1) & 1 == 1 { -1 } else { 1 })
                .collect();
            let hz = (0..s.layers).map(|l| signs[l] as f64 * omega[l][channels[l]]).sum();
            terms.push(FrequencyTerm {
                hz,
                channels: channels.clone(),
                signs,
            });
        }
    }
    Ok(FrequencySet { terms })
}

/// Frequency (Hz) of every bin of a periodic transform over `n` samples
/// spanning two units.
fn bin_hz(b: usize, n: usize) -> f64 {
    bin_frequency(b, n).abs() * n as f64 / 2.0
}

/// Magnitude spectra of every channel of `kernel`, treating the first
/// `k − 1` samples per axis as one period of the two-unit domain (so bin `b`
/// is `b / 2` Hz). Each entry pairs a bin's frequency (largest per-axis
/// magnitude) with its magnitude.
fn channel_spectra<T: Scalar>(kernel: &Kernel<T>, taper: Taper) -> Result<Vec<Vec<(f64, f64)>>> {
    let k = kernel.resolution;
    if k < 3 {
        return Err(Error::contract("empirical spectrum needs k ≥ 3"));
    }
    let n = k - 1;
    let d = kernel.dims;
    let p = k.pow(d as u32);
    let mut out = Vec::new();
    for ch in kernel.values.data().chunks(p) {
        let w = |i: usize| T::lit(taper.weight(i, n));
        let (period, shape): (Vec<T>, Vec<usize>) = if d == 1 {
            ((0..n).map(|i| ch[i] * w(i)).collect(), vec![n])
        } else {
            (
                (0..n)
                    .flat_map(|r| (0..n).map(move |c| (r, c)))
                    .map(|(r, c)| ch[r * k + c] * w(r) * w(c))
                    .collect(),
                vec![n, n],
            )
        };
        let spec = fft_nd(&Tensor::new(shape, period)?, &(0..d).collect::<Vec<_>>())?;
        let mags = spec.magnitude();
        let entries = mags
            .data()
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let hz = if d == 1 {
                    bin_hz(i, n)
                } else {
                    bin_hz(i / n, n).max(bin_hz(i % n, n))
                };
                (hz, m.to_f64_lossy())
            })
            .collect();
        out.push(entries);
    }
    Ok(out)
}

/// Highest frequency (Hz) whose magnitude reaches `significance_ratio` times
/// the peak magnitude, over all channels of `kernel`.
pub fn empirical_spectrum<T: Scalar>(kernel: &Kernel<T>, cfg: &SpectrumConfig) -> Result<f64> {
    let spectra = channel_spectra(kernel, cfg.taper)?;
    let peak = spectra.iter().flatten().map(|e| e.1).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(0.0);
    }
    Ok(spectra
        .iter()
        .flatten()
        .filter(|e| e.1 >= cfg.significance_ratio * peak)
        .map(|e| e.0)
        .fold(0.0, f64::max))
}

/// Fraction of spectral power (squared magnitude) strictly above `hz`.
pub fn spectral_mass_above<T: Scalar>(kernel: &Kernel<T>, hz: f64, taper: Taper) -> Result<f64> {
    let spectra = channel_spectra(kernel, taper)?;
    let (mut above, mut total) = (0.0, 0.0);
    for (f, m) in spectra.iter().flatten() {
        total += m * m;
        if *f > hz {
            above += m * m;
        }
    }
    Ok(if total == 0.0 { 0.0 } else { above / total })
}

/// Width of one frequency bin (Hz).
pub const BIN_HZ: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::init::{init_magnet, InitConfig};
    use crate::kernelgen::magnet::MagnetShape;
    use crate::spectral::bounds::max_freq_magnet;
    use crate::RngStream;
    use std::f64::consts::PI;

    fn kernel_1d(f: impl Fn(f64) -> f64, k: usize) -> Kernel<f64> {
        let v: Vec<f64> = (0..k).map(|i| f(-1.0 + 2.0 * i as f64 / (k - 1) as f64)).collect();
        Kernel {
            values: Tensor::new([1, 1, k], v).unwrap(),
            resolution: k,
            dims: 1,
        }
    }

    #[test]
    fn single_tone_and_constant() {
        let cfg = SpectrumConfig::default();
        let tone = kernel_1d(|x| (2.0 * PI * 3.0 * x).sin(), 33);
        assert!((empirical_spectrum(&tone, &cfg).unwrap() - 3.0).abs() <= BIN_HZ);
        let flat = kernel_1d(|_| 0.7, 33);
        assert_eq!(empirical_spectrum(&flat, &cfg).unwrap(), 0.0);
        // a tone that is not periodic on the domain leaks everywhere unless tapered
        let off = kernel_1d(|x| (2.0 * PI * 3.3 * x).sin(), 65);
        assert_eq!(empirical_spectrum(&off, &cfg).unwrap(), 16.0);
        let tapered = SpectrumConfig {
            taper: Taper::BlackmanHarris,
            ..cfg
        };
        assert!(empirical_spectrum(&off, &tapered).unwrap() <= 3.3 + 4.0 * BIN_HZ);
        assert_eq!(spectral_mass_above(&tone, 2.5, Taper::Rectangular).unwrap(), 1.0);
        assert!(spectral_mass_above(&tone, 3.0, Taper::Rectangular).unwrap() < 1e-20);
    }

    #[test]
    fn two_dimensional_bins_use_largest_axis() {
        let k = 17;
        let mut v = Vec::new();
        for r in 0..k {
            for c in 0..k {
                let (x, y) = (-1.0 + 2.0 * c as f64 / 16.0, -1.0 + 2.0 * r as f64 / 16.0);
                v.push((2.0 * PI * (1.0 * x + 2.5 * y)).cos());
            }
        }
        let kern = Kernel {
            values: Tensor::new([1, 1, k, k], v).unwrap(),
            resolution: k,
            dims: 2,
        };
        assert_eq!(empirical_spectrum(&kern, &SpectrumConfig::default()).unwrap(), 2.5);
    }

    fn shape(layers: usize, hidden: usize) -> MagnetShape {
        MagnetShape {
            dims: 1,
            layers,
            hidden,
            in_channels: 1,
            out_channels: 1,
            isotropic: false,
        }
    }

    #[test]
    fn two_single_channel_layers() {
        let mut m = init_magnet::<f64>(shape(2, 1), &InitConfig::default(), &mut RngStream::new(0)).unwrap();
        m.gabor[0].weight = Tensor::from_f64([1, 1], &[2.0 * PI * 3.0]).unwrap();
        m.gabor[1].weight = Tensor::from_f64([1, 1], &[2.0 * PI * 5.0]).unwrap();
        let set = enumerate_frequency_set(&m, &SpectrumConfig::default()).unwrap();
        let mut f = set.frequencies();
        f.sort_by(f64::total_cmp);
        let expect = [-8.0, -2.0, 2.0, 8.0];
        assert!(f.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12), "{f:?}");
    }

    #[test]
    fn one_layer_set_is_the_layer_frequencies() {
        let m = init_magnet::<f64>(shape(1, 5), &InitConfig::default(), &mut RngStream::new(1)).unwrap();
        let set = enumerate_frequency_set(&m, &SpectrumConfig::default()).unwrap();
        let expect: Vec<f64> = m.gabor[0].weight.data().iter().map(|w| w.abs() / (2.0 * PI)).collect();
        assert_eq!(set.terms.iter().map(|t| t.hz).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn set_maximum_is_sum_of_layer_maxima() {
        let cfg = SpectrumConfig::default();
        let m = init_magnet::<f64>(shape(3, 4), &InitConfig::default(), &mut RngStream::new(2)).unwrap();
        let set = enumerate_frequency_set(&m, &cfg).unwrap();
        assert_eq!(set.terms.len(), 4usize.pow(3) * 4);
        let expect: f64 = m
            .gabor
            .iter()
            .map(|g| g.weight.data().iter().map(|w| w.abs() / (2.0 * PI)).fold(0.0, f64::max))
            .sum();
        assert!((set.max() - expect).abs() < 1e-12);
        assert!(set.max() <= max_freq_magnet(&m, &cfg).unwrap());
    }

    #[test]
    fn enumeration_guard() {
        let cfg = SpectrumConfig::default();
        let big = init_magnet::<f64>(shape(5, 2), &InitConfig::default(), &mut RngStream::new(0)).unwrap();
        assert!(matches!(enumerate_frequency_set(&big, &cfg), Err(Error::TooLarge { limit: 4, .. })));
        let wide = init_magnet::<f64>(shape(2, 9), &InitConfig::default(), &mut RngStream::new(0)).unwrap();
        assert!(matches!(enumerate_frequency_set(&wide, &cfg), Err(Error::TooLarge { limit: 8, .. })));
    }
}
