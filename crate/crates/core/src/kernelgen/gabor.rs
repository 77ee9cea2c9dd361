//! Anisotropic and isotropic Gabor basis layers.

use crate::error::{ensure, Result};
use crate::kernelgen::grid::CoordinateGrid;
use crate::numerics::params::{constants, join, ParamTree};
use crate::numerics::tape::{softplus, softplus_inv, Tape, Var};
use crate::{Scalar, Tensor};

pub(crate) const AXES: [&str; 2] = ["x", "y"];

/// One multi-channel Gabor filter
/// `exp(−½ Σ_d (γ_d (x_d − μ_d))²) · sin(W_g x + b_g)`.
///
/// Envelope widths are stored unconstrained; the effective width is
/// `γ = softplus(gamma_raw)`, which stays positive under any update. An
/// isotropic layer keeps one shared width vector for all axes.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborLayer<P> {
    /// One entry per axis, or a single entry shared by every axis.
    pub gamma_raw: Vec<P>,
    /// Envelope centres, one entry per axis (grid units).
    pub mu: Vec<P>,
    /// Sine frequencies `[N_hid, D]` in radians per unit.
    pub weight: P,
    /// Sine phases `[N_hid]` in radians.
    pub bias: P,
}

impl<P> GaborLayer<P> {
    pub fn dims(&self) -> usize {
        self.mu.len()
    }

    pub fn is_isotropic(&self) -> bool {
        self.gamma_raw.len() == 1 && self.mu.len() > 1
    }

    fn gamma_names(&self) -> Vec<String> {
        if self.gamma_raw.len() == 1 && self.mu.len() > 1 {
            vec!["gamma".to_owned()]
        } else {
            AXES[..self.gamma_raw.len()].iter().map(|a| format!("gamma_{a}")).collect()
        }
    }
}

impl<P> ParamTree<P> for GaborLayer<P> {
    type Mapped<Q> = GaborLayer<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GaborLayer<Q> {
        let names = self.gamma_names();
        GaborLayer {
            gamma_raw: self
                .gamma_raw
                .iter()
                .zip(&names)
                .map(|(g, n)| f(&join(prefix, n), g))
                .collect(),
            mu: self
                .mu
                .iter()
                .zip(AXES)
                .map(|(m, a)| f(&join(prefix, &format!("mu_{a}")), m))
                .collect(),
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let names = self.gamma_names();
        for (g, n) in self.gamma_raw.iter_mut().zip(&names) {
            f(&join(prefix, n), g);
        }
        for (m, a) in self.mu.iter_mut().zip(AXES) {
            f(&join(prefix, &format!("mu_{a}")), m);
        }
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> GaborLayer<Tensor<T>> {
    /// Builds a layer from positive envelope widths `gamma` (one tensor per
    /// axis, or one shared tensor).
    pub fn from_widths(gamma: Vec<Tensor<T>>, mu: Vec<Tensor<T>>, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let d = mu.len();
        ensure!(d == 1 || d == 2, "gabor layer needs 1 or 2 axes, got {d}");
        ensure!(
            gamma.len() == d || gamma.len() == 1,
            "need one width vector per axis or a shared one"
        );
        ensure!(weight.rank() == 2 && weight.shape()[1] == d, "weight must be [N_hid, {d}]");
        let h = weight.shape()[0];
        ensure!(bias.shape() == [h], "bias must be [{h}]");
        for t in gamma.iter().chain(&mu) {
            ensure!(t.shape() == [h], "envelope parameters must be [{h}]");
        }
        for g in &gamma {
            ensure!(
                g.data().iter().all(|&v| v > T::zero()),
                "envelope widths must be strictly positive"
            );
        }
        Ok(GaborLayer {
            gamma_raw: gamma.iter().map(|g| g.map(softplus_inv)).collect(),
            mu,
            weight,
            bias,
        })
    }

    pub fn hidden(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Effective widths per axis (`D` tensors, repeated for isotropic layers).
    pub fn gammas(&self) -> Vec<Tensor<T>> {
        (0..self.dims())
            .map(|d| self.gamma_raw[d.min(self.gamma_raw.len() - 1)].map(softplus))
            .collect()
    }
}

/// Records the layer on `tape`; returns `[P, N_hid]` responses.
pub fn gabor_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, points: Var, layer: &GaborLayer<Var>) -> Result<Var> {
    let d = grid.dims();
    ensure!(
        layer.dims() == d,
        "gabor layer has {} axes but the grid has {}",
        layer.dims(),
        d
    );
    let h = tape.shape(layer.bias)[0];
    let mut energy = None;
    for axis in 0..d {
        let coords = tape.constant(grid.coordinate_columns(axis, h));
        let neg_mu = tape.neg(layer.mu[axis]);
        let centred = tape.add_row(coords, neg_mu)?;
        let gamma = tape.softplus(layer.gamma_raw[axis.min(layer.gamma_raw.len() - 1)]);
        let scaled = tape.mul_row(centred, gamma)?;
        let sq = tape.square(scaled);
        energy = Some(match energy {
            None => sq,
            Some(e) => tape.add(e, sq)?,
        });
    }
    let energy = energy.expect("at least one axis");
    let half = tape.scale(energy, T::lit(-0.5));
    let envelope = tape.exp(half);
    let phase = tape.linear(points, layer.weight, Some(layer.bias))?;
    let carrier = tape.sin(phase);
    tape.mul(envelope, carrier)
}

/// Evaluates one Gabor layer on every grid point: `[P, N_hid]`.
pub fn gabor_layer_forward<T: Scalar>(grid: &CoordinateGrid<T>, layer: &GaborLayer<Tensor<T>>) -> Result<Tensor<T>> {
    ensure!(
        layer.weight.shape().get(1) == Some(&grid.dims()),
        "sine weights have {:?} columns, grid has {} axes",
        layer.weight.shape().get(1),
        grid.dims()
    );
    let mut tape = Tape::new();
    let vars = constants(layer, &mut tape);
    let points = tape.constant(grid.points());
    let out = gabor_on_tape(&mut tape, grid, points, &vars)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::grid::make_grid;
    use std::f64::consts::PI;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn peak_of_envelope_with_quarter_phase_is_one() {
        let grid = make_grid::<f64>(2, 3).unwrap();
        // centre the envelope on grid point (x, y) = (0, 1)
        let layer = GaborLayer::from_widths(
            vec![t(&[3.7]), t(&[0.4])],
            vec![t(&[0.0]), t(&[1.0])],
            Tensor::zeros([1, 2]),
            t(&[PI / 2.0]),
        )
        .unwrap();
        let out = gabor_layer_forward(&grid, &layer).unwrap();
        // row y = 1 (index 2), column x = 0 (index 1)
        assert!((out.data()[2 * 3 + 1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vanishing_width_leaves_pure_sine() {
        let grid = make_grid::<f64>(2, 9).unwrap();
        let layer = GaborLayer::from_widths(
            vec![t(&[1e-9]), t(&[1e-9])],
            vec![t(&[0.0]), t(&[0.0])],
            Tensor::from_f64([1, 2], &[2.0 * PI, 0.0]).unwrap(),
            t(&[0.0]),
        )
        .unwrap();
        let out = gabor_layer_forward(&grid, &layer).unwrap();
        let pts = grid.points();
        for i in 0..grid.num_points() {
            let x = pts.get(&[i, 0]);
            assert!((out.data()[i] - (2.0 * PI * x).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn isotropic_envelope_is_symmetric() {
        let grid = make_grid::<f64>(2, 3).unwrap();
        let layer = GaborLayer::from_widths(
            vec![t(&[2.0])],
            vec![t(&[0.0]), t(&[0.0])],
            Tensor::zeros([1, 2]),
            t(&[PI / 2.0]),
        )
        .unwrap();
        assert!(layer.is_isotropic());
        let out = gabor_layer_forward(&grid, &layer).unwrap();
        let along_x = out.data()[3 + 2]; // (x, y) = (1, 0)
        let along_y = out.data()[2 * 3 + 1]; // (x, y) = (0, 1)
        assert!((along_x - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(along_x, along_y);
    }

    #[test]
    fn rejects_nonpositive_width_and_axis_mismatch() {
        assert!(GaborLayer::from_widths(vec![t(&[0.0])], vec![t(&[0.0])], Tensor::zeros([1, 1]), t(&[0.0])).is_err());
        let layer = GaborLayer::from_widths(vec![t(&[1.0])], vec![t(&[0.0])], Tensor::zeros([1, 1]), t(&[0.0])).unwrap();
        let grid2 = make_grid::<f64>(2, 3).unwrap();
        assert!(gabor_layer_forward(&grid2, &layer).is_err());
    }

    #[test]
    fn parameter_names() {
        let layer = GaborLayer::from_widths(
            vec![t(&[1.0]), t(&[1.0])],
            vec![t(&[0.0]), t(&[0.0])],
            Tensor::zeros([1, 2]),
            t(&[0.0]),
        )
        .unwrap();
        let mut names = Vec::new();
        layer.visit_params("g0", &mut |n, _| names.push(n.to_owned()));
        assert_eq!(names, ["g0.gamma_x", "g0.gamma_y", "g0.mu_x", "g0.mu_y", "g0.weight", "g0.bias"]);
    }
}
