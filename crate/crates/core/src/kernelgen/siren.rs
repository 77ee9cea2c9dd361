//! Sine-activated coordinate network used as a kernel-generator baseline.
//!
//! Every hidden layer computes `sin(ω₀ W h + b)`; the phase `b` is not
//! scaled by `ω₀`.

use crate::error::{ensure, Result};
use crate::kernelgen::grid::CoordinateGrid;
use crate::kernelgen::linear::Linear;
use crate::kernelgen::magnet::{flat_to_kernel, Kernel};
use crate::numerics::params::{constants, join, ParamTree};
use crate::numerics::tape::{Tape, Var};
use crate::{RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirenShape {
    pub dims: usize,
    pub layers: usize,
    pub hidden: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub omega_0: f64,
}

impl SirenShape {
    pub fn outputs(&self) -> usize {
        self.in_channels * self.out_channels
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        (self.dims * h + h) + (self.layers - 1) * (h * h + h) + self.outputs() * (h + 1)
    }

    /// Smallest hidden width whose parameter count reaches `target`.
    pub fn matching_width(dims: usize, layers: usize, in_channels: usize, out_channels: usize, omega_0: f64, target: usize) -> Self {
        let mut s = SirenShape {
            dims,
            layers,
            hidden: 1,
            in_channels,
            out_channels,
            omega_0,
        };
        while s.param_count() < target {
            s.hidden += 1;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Siren<P> {
    pub shape: SirenShape,
    pub layers: Vec<Linear<P>>,
    pub output: Linear<P>,
}

impl<P> ParamTree<P> for Siren<P> {
    type Mapped<Q> = Siren<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Siren<Q> {
        Siren {
            shape: self.shape,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, h)| h.map_params(&join(prefix, &format!("sine.{l}")), f))
                .collect(),
            output: self.output.map_params(&join(prefix, "output"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (l, h) in self.layers.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("sine.{l}")), f);
        }
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}

/// Uniform first-layer weights in `±1/fan_in`, deeper weights in
/// `±√(6/fan_in)/ω₀`, phases in `±π`, zero output bias.
pub fn init_siren<T: Scalar>(shape: SirenShape, rng: &mut RngStream) -> Result<Siren<Tensor<T>>> {
    ensure!(shape.omega_0 > 0.0, "omega_0 must be positive");
    ensure!(
        (shape.dims == 1 || shape.dims == 2) && shape.layers >= 1 && shape.hidden >= 1 && shape.outputs() >= 1,
        "invalid siren shape {shape:?}"
    );
    let pi = std::f64::consts::PI;
    let mut layers = Vec::with_capacity(shape.layers);
    for l in 0..shape.layers {
        let fan_in = if l == 0 { shape.dims } else { shape.hidden };
        let bound = if l == 0 {
            1.0 / fan_in as f64
        } else {
            (6.0 / fan_in as f64).sqrt() / shape.omega_0
        };
        layers.push(Linear {
            weight: rng.uniform(-bound, bound, shape.hidden * fan_in)?.reshape([shape.hidden, fan_in])?,
            bias: rng.uniform(-pi, pi, shape.hidden)?,
        });
    }
    let bound = (6.0 / shape.hidden as f64).sqrt() / shape.omega_0;
    let output = Linear {
        weight: rng
            .uniform(-bound, bound, shape.outputs() * shape.hidden)?
            .reshape([shape.outputs(), shape.hidden])?,
        bias: Tensor::zeros([shape.outputs()]),
    };
    Ok(Siren { shape, layers, output })
}

pub fn siren_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, s: &Siren<Var>) -> Result<Var> {
    ensure!(s.shape.dims == grid.dims(), "network has {} axes, grid has {}", s.shape.dims, grid.dims());
    let mut h = tape.constant(grid.points());
    for layer in &s.layers {
        let z = tape.linear(h, layer.weight, None)?;
        let z = tape.scale(z, T::lit(s.shape.omega_0));
        let z = tape.add_row(z, layer.bias)?;
        h = tape.sin(z);
    }
    let out = tape.linear(h, s.output.weight, Some(s.output.bias))?;
    flat_to_kernel(tape, grid, out, s.shape.out_channels, s.shape.in_channels)
}

pub fn siren_forward<T: Scalar>(grid: &CoordinateGrid<T>, s: &Siren<Tensor<T>>) -> Result<Kernel<T>> {
    let mut tape = Tape::new();
    let vars = constants(s, &mut tape);
    let out = siren_on_tape(&mut tape, grid, &vars)?;
    let values = tape.value(out).clone();
    values.check_finite("siren_forward")?;
    Ok(Kernel {
        values,
        resolution: grid.resolution(),
        dims: grid.dims(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::grid::make_grid;
    use crate::numerics::params::param_count;

    #[test]
    fn single_flat_layer_gives_constant_one() {
        let shape = SirenShape {
            dims: 2,
            layers: 1,
            hidden: 1,
            in_channels: 1,
            out_channels: 1,
            omega_0: 30.0,
        };
        let s = Siren {
            shape,
            layers: vec![Linear {
                weight: Tensor::zeros([1, 2]),
                bias: Tensor::from_vec(vec![std::f64::consts::FRAC_PI_2]),
            }],
            output: Linear {
                weight: Tensor::ones([1, 1]),
                bias: Tensor::zeros([1]),
            },
        };
        let k = siren_forward(&make_grid(2, 5).unwrap(), &s).unwrap();
        assert_eq!(k.values.shape(), &[1, 1, 5, 5]);
        assert!(k.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn parameter_count_formula_matches_tree() {
        let shape = SirenShape::matching_width(2, 3, 1, 1, 30.0, 2817);
        let s = init_siren::<f64>(shape, &mut RngStream::new(3)).unwrap();
        assert_eq!(param_count(&s), shape.param_count());
        assert!(shape.param_count() >= 2817);
        let smaller = SirenShape { hidden: shape.hidden - 1, ..shape };
        assert!(smaller.param_count() < 2817);
    }

    #[test]
    fn rejects_nonpositive_omega() {
        let shape = SirenShape {
            dims: 1,
            layers: 1,
            hidden: 2,
            in_channels: 1,
            out_channels: 1,
            omega_0: 0.0,
        };
        assert!(init_siren::<f64>(shape, &mut RngStream::new(0)).is_err());
    }
}
