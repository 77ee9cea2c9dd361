//! Analytic frequency bounds (in Hz over the `[−1, 1]` kernel domain) and
//! the bandwidth penalty.

use std::f64::consts::TAU;

use crate::error::{ensure, Result};
use crate::flexconv::mask::GaussianMask;
use crate::kernelgen::magnet::Magnet;
use crate::numerics::params::constants;
use crate::numerics::tape::{Tape, Var};
use crate::spectral::SpectrumConfig;
use crate::{Scalar, Tensor};

/// Highest sine frequency of one row of sine weights: `max_j |w_j| / 2π`,
/// or the signed `max_j w_j / 2π` when `cfg.signed_weights` is set.
pub fn max_freq_sine(row: &[f64], cfg: &SpectrumConfig) -> f64 {
    row.iter()
        .map(|&w| if cfg.signed_weights { w } else { w.abs() })
        .fold(f64::NEG_INFINITY, f64::max)
        / TAU
}

/// Spectral spread added by Gaussian envelopes of widths `gammas` (one per
/// axis): `σ_cut · min_d γ_d / 2π`.
pub fn max_freq_envelope(gammas: &[f64], cfg: &SpectrumConfig) -> f64 {
    cfg.sigma_cut * gammas.iter().copied().fold(f64::INFINITY, f64::min) / TAU
}

/// Spread added by the size mask: `σ_cut / (max_d σ_d · 2π)`.
pub fn max_freq_mask(sigmas: &[f64], cfg: &SpectrumConfig) -> f64 {
    cfg.sigma_cut / (sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max) * TAU)
}

/// `(k − 1) / 4`: half the sampling rate of a `k`-point grid over two units.
pub fn nyquist(k: usize) -> Result<f64> {
    ensure!(k >= 2, "nyquist frequency needs k ≥ 2, got {k}");
    Ok((k - 1) as f64 / 4.0)
}

/// `(max(f⁺, f_Nyq) − f_Nyq)²`.
pub fn aliasing_loss(f_plus: f64, f_nyq: f64) -> f64 {
    (f_plus.max(f_nyq) - f_nyq).powi(2)
}

/// Records `Σ_l max_i (f_sine[l, i] + f_env[l, i])` on `tape`; shape `[1]`.
pub fn max_freq_magnet_on_tape<T: Scalar>(tape: &mut Tape<T>, m: &Magnet<Var>, cfg: &SpectrumConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    for layer in &m.gabor {
        let w = if cfg.signed_weights {
            layer.weight
        } else {
            tape.abs(layer.weight)
        };
        let sine = tape.max_last(w)?;
        let sine = tape.scale(sine, T::lit(1.0 / TAU));
        let mut gamma = tape.softplus(layer.gamma_raw[0]);
        for raw in &layer.gamma_raw[1..] {
            let g = tape.softplus(*raw);
            gamma = tape.minimum(gamma, g)?;
        }
        let env = tape.scale(gamma, T::lit(cfg.sigma_cut / TAU));
        let per_channel = tape.add(sine, env)?;
        let layer_max = tape.max(per_channel)?;
        total = Some(match total {
            None => layer_max,
            Some(t) => tape.add(t, layer_max)?,
        });
    }
    total.ok_or_else(|| crate::Error::contract("network has no gabor layers"))
}

/// Records `σ_cut / (max_d σ_d · 2π)` on `tape`; shape `[1]`.
pub fn max_freq_mask_on_tape<T: Scalar>(tape: &mut Tape<T>, mask: &GaussianMask<Var>, cfg: &SpectrumConfig) -> Result<Var> {
    let mut sigma = tape.softplus(mask.sigma_raw[0]);
    for raw in &mask.sigma_raw[1..] {
        let s = tape.softplus(*raw);
        sigma = tape.maximum(sigma, s)?;
    }
    let inv = tape.recip(sigma);
    Ok(tape.scale(inv, T::lit(cfg.sigma_cut / TAU)))
}

/// Records `relu(f⁺ − f_Nyq)²`, which equals the penalty above and has zero
/// gradient whenever `f⁺ ≤ f_Nyq`.
pub fn aliasing_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, f_plus: Var, f_nyq: f64) -> Var {
    let excess = tape.add_scalar(f_plus, T::lit(-f_nyq));
    let hinge = tape.relu(excess);
    tape.square(hinge)
}

pub fn max_freq_magnet<T: Scalar>(m: &Magnet<Tensor<T>>, cfg: &SpectrumConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = constants(m, &mut tape);
    let f = max_freq_magnet_on_tape(&mut tape, &vars, cfg)?;
    Ok(tape.value(f).item()?.to_f64_lossy())
}

/// Bound on a masked kernel: `f⁺_MAGNet + f⁺_mask`. Returns
/// `(f⁺_MAGNet, f⁺_mask, f⁺_FlexConv)`.
pub fn max_freq_flexconv<T: Scalar>(m: &Magnet<Tensor<T>>, mask: &GaussianMask<Tensor<T>>, cfg: &SpectrumConfig) -> Result<(f64, f64, f64)> {
    let f_magnet = max_freq_magnet(m, cfg)?;
    let sigmas: Vec<f64> = mask.sigmas().iter().map(|s| s.to_f64_lossy()).collect();
    let f_mask = max_freq_mask(&sigmas, cfg);
    Ok((f_magnet, f_mask, f_magnet + f_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::gabor::GaborLayer;
    use crate::kernelgen::linear::Linear;
    use crate::kernelgen::magnet::MagnetShape;
    use std::f64::consts::PI;

    fn cfg() -> SpectrumConfig {
        SpectrumConfig::default()
    }

    #[test]
    fn sine_rows() {
        assert_eq!(max_freq_sine(&[2.0 * PI, 4.0 * PI], &cfg()), 2.0);
        assert_eq!(max_freq_sine(&[0.0, 0.0], &cfg()), 0.0);
        assert_eq!(max_freq_sine(&[-6.0 * PI, 2.0 * PI], &cfg()), 3.0);
        let signed = SpectrumConfig {
            signed_weights: true,
            ..cfg()
        };
        assert_eq!(max_freq_sine(&[-6.0 * PI, 2.0 * PI], &signed), 1.0);
    }

    #[test]
    fn envelope_and_mask_terms() {
        assert_eq!(max_freq_envelope(&[PI, PI], &cfg()), 1.0);
        assert_eq!(max_freq_envelope(&[PI, 4.0 * PI], &cfg()), 1.0);
        assert!(max_freq_envelope(&[1e-12], &cfg()) < 1e-12);
        assert!((max_freq_mask(&[1.0, 2.0], &cfg()) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(max_freq_mask(&[1e9, 1e9], &cfg()) < 1e-9);
    }

    #[test]
    fn nyquist_values() {
        assert_eq!(nyquist(33).unwrap(), 8.0);
        assert_eq!(nyquist(5).unwrap(), 1.0);
        assert_eq!(nyquist(1025).unwrap(), 256.0);
        assert!(nyquist(1).is_err());
    }

    #[test]
    fn hinge_values_and_gradient() {
        assert_eq!(aliasing_loss(7.0, 8.0), 0.0);
        assert_eq!(aliasing_loss(8.0, 8.0), 0.0);
        assert_eq!(aliasing_loss(10.0, 8.0), 4.0);
        for (f, expect_grad) in [(7.0, 0.0), (8.0, 0.0), (10.0, 4.0)] {
            let mut tape = Tape::<f64>::new();
            let v = tape.param("f", Tensor::scalar(f));
            let l = aliasing_loss_on_tape(&mut tape, v, 8.0);
            assert_eq!(tape.value(l).item().unwrap(), aliasing_loss(f, 8.0));
            assert_eq!(tape.backward(l).unwrap()["f"].data()[0], expect_grad);
        }
    }

    fn one_channel_layer(w: &[f64], gamma: f64) -> GaborLayer<Tensor<f64>> {
        let d = w.len();
        GaborLayer::from_widths(
            vec![Tensor::from_vec(vec![gamma]); d],
            vec![Tensor::from_vec(vec![0.0]); d],
            Tensor::from_f64([1, d], w).unwrap(),
            Tensor::from_vec(vec![0.0]),
        )
        .unwrap()
    }

    fn net(layers: Vec<GaborLayer<Tensor<f64>>>) -> Magnet<Tensor<f64>> {
        let dims = layers[0].dims();
        let n = layers.len();
        Magnet {
            shape: MagnetShape {
                dims,
                layers: n,
                hidden: 1,
                in_channels: 1,
                out_channels: 1,
                isotropic: false,
            },
            gabor: layers,
            hidden: (1..n)
                .map(|_| Linear {
                    weight: Tensor::ones([1, 1]),
                    bias: Tensor::zeros([1]),
                })
                .collect(),
            output: Linear {
                weight: Tensor::ones([1, 1]),
                bias: Tensor::zeros([1]),
            },
        }
    }

    #[test]
    fn magnet_bound_examples() {
        let single = net(vec![one_channel_layer(&[2.0 * PI, 0.0], 2.0 * PI)]);
        assert!((max_freq_magnet(&single, &cfg()).unwrap() - 3.0).abs() < 1e-12);
        // each layer: 1 Hz sine + 0.5 Hz envelope
        let two = net(vec![one_channel_layer(&[2.0 * PI], PI / 2.0), one_channel_layer(&[-2.0 * PI], PI / 2.0)]);
        assert!((max_freq_magnet(&two, &cfg()).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flexconv_bound_is_additive() {
        let m = net(vec![one_channel_layer(&[2.0 * PI, 0.0], 2.0 * PI)]);
        let mask = GaussianMask::new(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        let (fm, fk, ff) = max_freq_flexconv(&m, &mask, &cfg()).unwrap();
        assert_eq!(ff, fm + fk);
        assert!((fk - 1.0 / (2.0 * PI)).abs() < 1e-12);
    }
}
