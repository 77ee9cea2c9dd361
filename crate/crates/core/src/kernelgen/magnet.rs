//! Multiplicative Gabor networks.
//!
//! `h¹ = g¹`, `hˡ = (Wˡ hˡ⁻¹ + bˡ) ⊙ gˡ` for `l = 2..L`, and the kernel is
//! `W_out hᴸ + b_out`, one output per (out, in) channel pair.

use crate::error::{ensure, Result};
use crate::kernelgen::gabor::{gabor_on_tape, GaborLayer};
use crate::kernelgen::grid::CoordinateGrid;
use crate::kernelgen::linear::Linear;
use crate::numerics::params::{constants, join, ParamTree};
use crate::numerics::tape::{Tape, Var};
use crate::{Scalar, Tensor};

/// Sizes that fix every parameter shape of a [`Magnet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MagnetShape {
    pub dims: usize,
    pub layers: usize,
    pub hidden: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub isotropic: bool,
}

impl MagnetShape {
    pub fn outputs(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dims == 1 || self.dims == 2, "kernel dims must be 1 or 2, got {}", self.dims);
        ensure!(
            self.layers >= 1 && self.hidden >= 1 && self.in_channels >= 1 && self.out_channels >= 1,
            "layer and channel counts must be at least 1: {self:?}"
        );
        Ok(())
    }
}

/// Parameters of a multiplicative Gabor network. With isotropic layers this
/// is the plain (non-anisotropic) variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Magnet<P> {
    pub shape: MagnetShape,
    pub gabor: Vec<GaborLayer<P>>,
    /// `L − 1` maps `[N_hid, N_hid]` between consecutive Gabor layers.
    pub hidden: Vec<Linear<P>>,
    /// `[N_out·N_in, N_hid]`; output row `o·N_in + i` is kernel channel `(o, i)`.
    pub output: Linear<P>,
}

impl<P> ParamTree<P> for Magnet<P> {
    type Mapped<Q> = Magnet<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Magnet<Q> {
        Magnet {
            shape: self.shape,
            gabor: self
                .gabor
                .iter()
                .enumerate()
                .map(|(l, g)| g.map_params(&join(prefix, &format!("gabor.{l}")), f))
                .collect(),
            hidden: self
                .hidden
                .iter()
                .enumerate()
                .map(|(l, h)| h.map_params(&join(prefix, &format!("hidden.{l}")), f))
                .collect(),
            output: self.output.map_params(&join(prefix, "output"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (l, g) in self.gabor.iter_mut().enumerate() {
            g.visit_params_mut(&join(prefix, &format!("gabor.{l}")), f);
        }
        for (l, h) in self.hidden.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("hidden.{l}")), f);
        }
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}

impl<T: Scalar> Magnet<Tensor<T>> {
    /// Checks every tensor shape against `self.shape` and that all values
    /// are finite.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        s.validate()?;
        ensure!(self.gabor.len() == s.layers, "expected {} gabor layers, found {}", s.layers, self.gabor.len());
        ensure!(self.hidden.len() + 1 == s.layers, "expected {} hidden maps, found {}", s.layers - 1, self.hidden.len());
        for g in &self.gabor {
            ensure!(g.weight.shape() == [s.hidden, s.dims], "sine weights must be [{}, {}]", s.hidden, s.dims);
            ensure!(g.mu.len() == s.dims, "one envelope centre per axis");
            let widths = if s.isotropic { 1 } else { s.dims };
            ensure!(g.gamma_raw.len() == widths, "expected {widths} envelope width vectors");
            for t in g.gamma_raw.iter().chain(&g.mu).chain([&g.bias]) {
                ensure!(t.shape() == [s.hidden], "per-channel gabor parameters must be [{}]", s.hidden);
            }
        }
        for h in &self.hidden {
            ensure!(h.weight.shape() == [s.hidden, s.hidden] && h.bias.shape() == [s.hidden], "hidden map must be [{0}, {0}]", s.hidden);
        }
        ensure!(
            self.output.weight.shape() == [s.outputs(), s.hidden] && self.output.bias.shape() == [s.outputs()],
            "output map must be [{}, {}]",
            s.outputs(),
            s.hidden
        );
        let mut bad = None;
        self.visit_params("", &mut |n, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(n.to_owned());
            }
        });
        match bad {
            Some(name) => Err(crate::Error::numeric(name, "non-finite parameter")),
            None => Ok(()),
        }
    }
}

/// Sampled kernel `[N_out, N_in, k…]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub values: Tensor<T>,
    pub resolution: usize,
    pub dims: usize,
}

impl<T: Scalar> Kernel<T> {
    pub fn out_channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Values of one (out, in) channel pair, flattened over space.
    pub fn channel(&self, o: usize, i: usize) -> &[T] {
        let p = self.resolution.pow(self.dims as u32);
        let start = (o * self.in_channels() + i) * p;
        &self.values.data()[start..start + p]
    }
}

/// Records the network on `tape`; returns the kernel `[N_out, N_in, k…]`.
pub fn magnet_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, m: &Magnet<Var>) -> Result<Var> {
    let out = magnet_points_on_tape(tape, grid, m)?;
    flat_to_kernel(tape, grid, out, m.shape.out_channels, m.shape.in_channels)
}

/// Network outputs per grid point, `[P, N_out·N_in]`.
pub fn magnet_points_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, m: &Magnet<Var>) -> Result<Var> {
    let s = m.shape;
    ensure!(s.dims == grid.dims(), "network has {} axes, grid has {}", s.dims, grid.dims());
    let points = tape.constant(grid.points());
    let mut h = gabor_on_tape(tape, grid, points, &m.gabor[0])?;
    for (lin, layer) in m.hidden.iter().zip(&m.gabor[1..]) {
        let g = gabor_on_tape(tape, grid, points, layer)?;
        let z = tape.linear(h, lin.weight, Some(lin.bias))?;
        h = tape.mul(z, g)?;
    }
    tape.linear(h, m.output.weight, Some(m.output.bias))
}

/// `[P, N_out·N_in]` → `[N_out, N_in, k…]`.
pub(crate) fn flat_to_kernel<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, flat: Var, out_ch: usize, in_ch: usize) -> Result<Var> {
    let t = tape.transpose(flat)?;
    let mut shape = vec![out_ch, in_ch];
    shape.extend(grid.spatial_shape());
    tape.reshape(t, &shape)
}

/// Samples the network on `grid`.
pub fn magnet_forward<T: Scalar>(grid: &CoordinateGrid<T>, m: &Magnet<Tensor<T>>) -> Result<Kernel<T>> {
    m.validate()?;
    let mut tape = Tape::new();
    let vars = constants(m, &mut tape);
    let out = magnet_on_tape(&mut tape, grid, &vars)?;
    let values = tape.value(out).clone();
    values.check_finite("magnet_forward")?;
    Ok(Kernel {
        values,
        resolution: grid.resolution(),
        dims: grid.dims(),
    })
}

/// [`magnet_forward`] restricted to networks with isotropic envelopes.
pub fn mgn_forward<T: Scalar>(grid: &CoordinateGrid<T>, m: &Magnet<Tensor<T>>) -> Result<Kernel<T>> {
    ensure!(
        m.shape.isotropic || m.shape.dims == 1,
        "mgn_forward needs isotropic gabor layers"
    );
    magnet_forward(grid, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::grid::make_grid;
    use crate::numerics::tape::softplus;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    fn tiny(dims: usize) -> Magnet<Tensor<f64>> {
        let shape = MagnetShape {
            dims,
            layers: 2,
            hidden: 1,
            in_channels: 1,
            out_channels: 1,
            isotropic: false,
        };
        let layer = |g: f64, mu: f64, w: f64, b: f64| {
            GaborLayer::from_widths(vec![t(&[g]); dims], vec![t(&[mu]); dims], Tensor::full([1, dims], w), t(&[b])).unwrap()
        };
        Magnet {
            shape,
            gabor: vec![layer(1.5, 0.2, 3.0, 0.4), layer(0.7, -0.3, -1.1, 1.3)],
            hidden: vec![Linear {
                weight: Tensor::from_f64([1, 1], &[0.8]).unwrap(),
                bias: t(&[-0.25]),
            }],
            output: Linear {
                weight: Tensor::from_f64([1, 1], &[1.7]).unwrap(),
                bias: t(&[0.05]),
            },
        }
    }

    #[test]
    fn two_layer_hand_evaluation() {
        let m = tiny(1);
        let grid = make_grid::<f64>(1, 3).unwrap();
        let k = magnet_forward(&grid, &m).unwrap();
        assert_eq!(k.values.shape(), &[1, 1, 3]);
        for (i, x) in [-1.0f64, 0.0, 1.0].into_iter().enumerate() {
            let g1 = (-0.5 * (1.5 * (x - 0.2)).powi(2)).exp() * (3.0 * x + 0.4).sin();
            let g2 = (-0.5 * (0.7 * (x + 0.3)).powi(2)).exp() * (-1.1 * x + 1.3).sin();
            let h2 = (0.8 * g1 - 0.25) * g2;
            let expect = 1.7 * h2 + 0.05;
            assert!((k.values.data()[i] - expect).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn zero_weights_give_constant_bias() {
        let mut m = tiny(2);
        m.hidden[0].weight = Tensor::zeros([1, 1]);
        m.output.weight = Tensor::zeros([1, 1]);
        m.output.bias = t(&[0.37]);
        let k = magnet_forward(&make_grid(2, 5).unwrap(), &m).unwrap();
        assert!(k.values.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn stored_widths_round_trip_through_softplus() {
        let m = tiny(1);
        assert!((softplus(m.gabor[0].gamma_raw[0].data()[0]) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn validation_catches_shape_and_value_errors() {
        let mut m = tiny(1);
        m.output.bias = t(&[0.0, 0.0]);
        assert!(magnet_forward(&make_grid(1, 3).unwrap(), &m).is_err());
        let mut m = tiny(1);
        m.hidden[0].bias = t(&[f64::NAN]);
        let err = magnet_forward(&make_grid(1, 3).unwrap(), &m).unwrap_err();
        assert!(matches!(err, crate::Error::Numeric { .. }), "{err}");
        let m = tiny(1);
        assert!(magnet_forward(&make_grid(2, 3).unwrap(), &m).is_err());
    }

    #[test]
    fn channel_layout() {
        let mut m = tiny(1);
        m.shape.in_channels = 2;
        m.shape.out_channels = 3;
        m.output.weight = Tensor::zeros([6, 1]);
        m.output.bias = t(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let k = magnet_forward(&make_grid(1, 4).unwrap(), &m).unwrap();
        assert_eq!(k.values.shape(), &[3, 2, 4]);
        assert_eq!(k.channel(2, 1), &[5.0; 4]);
        assert_eq!(k.channel(1, 0), &[2.0; 4]);
    }
}
