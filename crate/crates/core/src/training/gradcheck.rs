//! Randomised gradient checks of a FlexConv layer with the bandwidth penalty.
//!
//! The loss contains maxima, an absolute value, a hinge and a data-dependent
//! crop, all of which have kinks. A central difference straddling a kink is
//! not a derivative, so cases whose parameters lie within [`KINK_MARGIN`] of
//! one are redrawn from the next derived stream.

use std::f64::consts::TAU;

use crate::error::{ensure, Error, Result};
use crate::flexconv::{flexconv_on_tape, gaussian_mask, ConvConfig, FlexConv, GaussianMask};
use crate::kernelgen::grid::{make_grid, CoordinateGrid};
use crate::kernelgen::{init_magnet, InitConfig, MagnetShape};
use crate::numerics::params::{finite_difference_grad, max_relative_error, param_count, register};
use crate::numerics::tape::Tape;
use crate::spectral::{max_freq_flexconv, nyquist, SpectrumConfig};
use crate::training::loss::{combine_on_tape, layer_penalty_on_tape, RegTarget};
use crate::{RngStream, Tensor, Var};

/// Minimum distance of every kink argument from its switching point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Denominator floor of the relative error.
pub const ERROR_FLOOR: f64 = 1e-6;

const MAX_ATTEMPTS: u64 = 1000;

#[derive(Clone, Debug)]
pub struct GradcheckCase {
    pub seed: u64,
    /// Number of redraws needed to clear every kink.
    pub attempts: u64,
    pub layer: FlexConv<Tensor<f64>>,
    pub input: Tensor<f64>,
    /// Fixed random weights contracting the layer output to a scalar.
    pub projection: Tensor<f64>,
    pub k: usize,
    pub conv: ConvConfig,
    pub lambda: f64,
    pub target: RegTarget,
    pub spectrum: SpectrumConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub dims: usize,
    pub layers: usize,
    pub hidden: usize,
    pub k: usize,
    pub params: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    /// Whether the penalty was above its hinge.
    pub penalty_active: bool,
}

impl GradcheckCase {
    /// Draws a layer of random shape, mask, input and kernel size.
    pub fn random(seed: u64) -> Result<Self> {
        let root = RngStream::new(seed);
        for attempt in 0..MAX_ATTEMPTS {
            let case = Self::draw(seed, attempt, &mut root.derive(attempt))?;
            if case.kink_distance()? >= KINK_MARGIN {
                return Ok(case);
            }
        }
        Err(Error::contract(format!("seed {seed}: no kink-free case in {MAX_ATTEMPTS} draws")))
    }

    fn draw(seed: u64, attempts: u64, rng: &mut RngStream) -> Result<Self> {
        let dims = 1 + rng.below(2);
        let shape = MagnetShape {
            dims,
            layers: 1 + rng.below(3),
            hidden: 1 + rng.below(4),
            in_channels: 1 + rng.below(2),
            out_channels: 1 + rng.below(2),
            isotropic: dims == 2 && rng.below(4) == 0,
        };
        let magnet = init_magnet::<f64>(shape, &InitConfig::default(), rng)?;
        let mu: Vec<f64> = (0..dims).map(|_| rng.next_f64() * 0.6 - 0.3).collect();
        let sigma: Vec<f64> = (0..dims).map(|_| 0.3 + 0.7 * rng.next_f64()).collect();
        let mask = GaussianMask::new(&mu, &sigma)?;
        let k = [5, 9, 33][rng.below(3)];
        let causal = dims == 1 && rng.below(2) == 0;
        let n: usize = if dims == 1 { 12 } else { 6 };
        let spatial = n.pow(dims as u32);
        let batch_shape = if dims == 1 {
            vec![1, shape.in_channels, n]
        } else {
            vec![1, shape.in_channels, n, n]
        };
        let input = rng.uniform(-1.0, 1.0, shape.in_channels * spatial)?.reshape(batch_shape)?;
        let mut out_shape = input.shape().to_vec();
        out_shape[1] = shape.out_channels;
        let projection = rng.uniform(-1.0, 1.0, shape.out_channels * spatial)?.reshape(out_shape)?;
        Ok(GradcheckCase {
            seed,
            attempts,
            layer: FlexConv { magnet, mask },
            input,
            projection,
            k,
            conv: ConvConfig { causal, ..ConvConfig::default() },
            lambda: 0.1,
            target: if rng.below(2) == 0 { RegTarget::Magnet } else { RegTarget::FlexConv },
            spectrum: SpectrumConfig::default(),
        })
    }

    fn grid(&self) -> Result<CoordinateGrid<f64>> {
        make_grid(self.layer.magnet.shape.dims, self.k)
    }

    /// `mean(y ⊙ P) + λ · L_HF` for parameters `p`.
    pub fn loss_on_tape(&self, tape: &mut Tape<f64>, p: &FlexConv<Var>) -> Result<Var> {
        let grid = self.grid()?;
        let x = tape.constant(self.input.clone());
        let y = flexconv_on_tape(tape, x, &grid, p, &self.conv)?;
        let proj = tape.constant(self.projection.clone());
        let prod = tape.mul(y, proj)?;
        let task = tape.mean(prod);
        let penalty = layer_penalty_on_tape(tape, p, self.k, self.target, &self.spectrum)?;
        Ok(combine_on_tape(tape, task, &[penalty], self.lambda)?.0)
    }

    fn loss(&self, p: &FlexConv<Tensor<f64>>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = register(p, "", &mut tape);
        let out = self.loss_on_tape(&mut tape, &vars)?;
        tape.value(out).item()
    }

    fn f_plus(&self) -> Result<f64> {
        let (f_magnet, _, f_flex) = max_freq_flexconv(&self.layer.magnet, &self.layer.mask, &self.spectrum)?;
        Ok(match self.target {
            RegTarget::Magnet => f_magnet,
            RegTarget::FlexConv => f_flex,
        })
    }

    /// Smallest distance from any kink of the loss, in the units of the
    /// quantity compared at that kink.
    pub fn kink_distance(&self) -> Result<f64> {
        let mut d = f64::INFINITY;
        let cfg = &self.spectrum;
        for g in &self.layer.magnet.gabor {
            let w = g.weight.data();
            let dims = g.weight.shape()[1];
            let gammas: Vec<Vec<f64>> = g.gammas().iter().map(|t| t.data().to_vec()).collect();
            let hidden = g.hidden();
            let row_max = |i: usize| w[i * dims..(i + 1) * dims].iter().map(|x| x.abs()).fold(0.0, f64::max);
            let env = |i: usize| gammas.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
            let per_unit: Vec<f64> = (0..hidden).map(|i| row_max(i) / TAU + cfg.sigma_cut * env(i) / TAU).collect();
            d = d.min(top_two_gap(&per_unit));
            // only the winning unit's inner maxima reach the loss
            let best = (0..hidden).max_by(|&a, &b| per_unit[a].total_cmp(&per_unit[b])).unwrap_or(0);
            let row: Vec<f64> = w[best * dims..(best + 1) * dims].iter().map(|x| x.abs()).collect();
            d = d.min(top_two_gap(&row)).min(row_max(best));
            let widths: Vec<f64> = gammas.iter().map(|v| v[best]).collect();
            d = d.min(top_two_gap(&widths));
        }
        if self.target == RegTarget::FlexConv {
            let sigmas = self.layer.mask.sigmas();
            d = d.min(top_two_gap(&sigmas));
        }
        d = d.min((self.f_plus()? - nyquist(self.k)?).abs());
        let window = gaussian_mask(&self.grid()?, &self.layer.mask)?;
        for &v in window.data() {
            d = d.min((v - self.conv.crop_threshold).abs());
        }
        Ok(d)
    }

    /// Compares reverse-mode gradients with central differences of step `h`.
    pub fn check(&self, h: f64) -> Result<GradcheckReport> {
        ensure!(h > 0.0, "finite difference step must be positive");
        let mut tape = Tape::new();
        let vars = register(&self.layer, "", &mut tape);
        let out = self.loss_on_tape(&mut tape, &vars)?;
        let analytic = tape.backward(out)?.clone();
        let numeric = finite_difference_grad(|p| self.loss(p), &self.layer, h)?;
        let (max_relative_error, worst_param) = max_relative_error(&analytic, &numeric, ERROR_FLOOR)?;
        let s = self.layer.magnet.shape;
        Ok(GradcheckReport {
            seed: self.seed,
            dims: s.dims,
            layers: s.layers,
            hidden: s.hidden,
            k: self.k,
            params: param_count(&self.layer),
            max_relative_error,
            worst_param,
            penalty_active: self.f_plus()? > nyquist(self.k)?,
        })
    }
}

/// Gap between the largest and second-largest entries (∞ for one entry).
fn top_two_gap(v: &[f64]) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    match sorted.as_slice() {
        [a, b, ..] => a - b,
        _ => f64::INFINITY,
    }
}
