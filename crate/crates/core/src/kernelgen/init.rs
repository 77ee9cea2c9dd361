use crate::error::{ensure, Result};
use crate::kernelgen::gabor::GaborLayer;
use crate::kernelgen::linear::Linear;
use crate::kernelgen::magnet::{Magnet, MagnetShape};
use crate::numerics::tape::softplus_inv;
use crate::{RngStream, Scalar, Tensor};

/// Initialization hyperparameters for [`init_magnet`].
///
/// Envelope widths of Gabor layer `l` (1-based) are drawn from
/// `Gamma(shape = alpha / l, rate = beta)`, so deeper layers start with
/// smaller widths on average. Sine frequencies are uniform in `[−1, 1]`,
/// scaled by `sine_weight_scale` (default `linear_scale / √L`) and by
/// `√(γ / E[γ])` of the matching channel and axis, which ties wide envelopes
/// to low frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub alpha: f64,
    pub beta: f64,
    pub linear_scale: f64,
    pub sine_weight_scale: Option<f64>,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            alpha: 6.0,
            beta: 1.0,
            linear_scale: 25.6,
            sine_weight_scale: None,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha > 0.0 && self.beta > 0.0 && self.linear_scale > 0.0,
            "alpha, beta and linear_scale must be positive"
        );
        if let Some(s) = self.sine_weight_scale {
            ensure!(s > 0.0, "sine_weight_scale must be positive");
        }
        Ok(())
    }

    pub fn sine_scale(&self, layers: usize) -> f64 {
        self.sine_weight_scale
            .unwrap_or(self.linear_scale / (layers as f64).sqrt())
    }
}

/// Draws a fresh network. Phases are uniform in `±2π`; hidden and output
/// maps are uniform in `±1/√N_hid` with zero output bias.
pub fn init_magnet<T: Scalar>(shape: MagnetShape, cfg: &InitConfig, rng: &mut RngStream) -> Result<Magnet<Tensor<T>>> {
    shape.validate()?;
    cfg.validate()?;
    let h = shape.hidden;
    let d = shape.dims;
    let two_pi = 2.0 * std::f64::consts::PI;
    let scale = cfg.sine_scale(shape.layers);
    let widths = if shape.isotropic { 1 } else { d };

    let mut gabor = Vec::with_capacity(shape.layers);
    for l in 1..=shape.layers {
        let a = cfg.alpha / l as f64;
        let mean = a / cfg.beta;
        let gamma: Vec<Tensor<f64>> = (0..widths)
            .map(|_| rng.gamma(a, cfg.beta, h))
            .collect::<Result<_>>()?;
        let mu = (0..d).map(|_| rng.uniform(-1.0, 1.0, h)).collect::<Result<Vec<Tensor<f64>>>>()?;
        let u: Tensor<f64> = rng.uniform(-1.0, 1.0, h * d)?;
        let weight: Vec<f64> = (0..h * d)
            .map(|ij| {
                let (i, j) = (ij / d, ij % d);
                let g = gamma[j.min(widths - 1)].data()[i];
                u.data()[ij] * scale * (g / mean).sqrt()
            })
            .collect();
        let bias: Tensor<f64> = rng.uniform(-two_pi, two_pi, h)?;
        gabor.push(GaborLayer {
            gamma_raw: gamma.iter().map(|g| g.map(softplus_inv).cast()).collect(),
            mu: mu.iter().map(Tensor::cast).collect(),
            weight: Tensor::from_f64([h, d], &weight)?,
            bias: bias.cast(),
        });
    }

    let bound = 1.0 / (h as f64).sqrt();
    let mut hidden = Vec::with_capacity(shape.layers - 1);
    for _ in 1..shape.layers {
        hidden.push(Linear {
            weight: rng.uniform(-bound, bound, h * h)?.reshape([h, h])?,
            bias: rng.uniform(-bound, bound, h)?,
        });
    }
    let n = shape.outputs();
    let output = Linear {
        weight: rng.uniform(-bound, bound, n * h)?.reshape([n, h])?,
        bias: Tensor::zeros([n]),
    };
    let m = Magnet {
        shape,
        gabor,
        hidden,
        output,
    };
    m.validate()?;
    Ok(m)
}
