use crate::error::{ensure, Result};
use crate::kernelgen::gabor::AXES;
use crate::kernelgen::grid::CoordinateGrid;
use crate::numerics::params::{constants, join, ParamTree};
use crate::numerics::tape::{softplus, softplus_inv, Tape, Var};
use crate::{Scalar, Tensor};

/// Separable Gaussian window `Π_d exp(−½ ((x_d − μ_d) / σ_d)²)` with
/// `σ_d = softplus(sigma_raw_d)`. Each leaf is a one-element tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMask<P> {
    pub mu: Vec<P>,
    pub sigma_raw: Vec<P>,
}

impl<P> GaussianMask<P> {
    pub fn dims(&self) -> usize {
        self.mu.len()
    }
}

impl<P> ParamTree<P> for GaussianMask<P> {
    type Mapped<Q> = GaussianMask<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GaussianMask<Q> {
        GaussianMask {
            mu: self
                .mu
                .iter()
                .zip(AXES)
                .map(|(m, a)| f(&join(prefix, &format!("mu_{a}")), m))
                .collect(),
            sigma_raw: self
                .sigma_raw
                .iter()
                .zip(AXES)
                .map(|(s, a)| f(&join(prefix, &format!("sigma_raw_{a}")), s))
                .collect(),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (m, a) in self.mu.iter_mut().zip(AXES) {
            f(&join(prefix, &format!("mu_{a}")), m);
        }
        for (s, a) in self.sigma_raw.iter_mut().zip(AXES) {
            f(&join(prefix, &format!("sigma_raw_{a}")), s);
        }
    }
}

impl<T: Scalar> GaussianMask<Tensor<T>> {
    /// Window centred at `mu` with standard deviations `sigma` (one per axis).
    pub fn new(mu: &[f64], sigma: &[f64]) -> Result<Self> {
        ensure!(
            (mu.len() == 1 || mu.len() == 2) && mu.len() == sigma.len(),
            "mask needs one centre and one width per axis (1 or 2 axes)"
        );
        ensure!(sigma.iter().all(|&s| s > 0.0), "mask widths must be positive");
        Ok(GaussianMask {
            mu: mu.iter().map(|&m| Tensor::scalar(T::lit(m))).collect(),
            sigma_raw: sigma
                .iter()
                .map(|&s| Tensor::scalar(softplus_inv(T::lit(s))))
                .collect(),
        })
    }

    /// Small centred window for images: `μ = 0`, `σ² = 0.125` per axis.
    pub fn for_images(dims: usize) -> Result<Self> {
        let s = 0.125f64.sqrt();
        Self::new(&vec![0.0; dims], &vec![s; dims])
    }

    /// Window on the newest sample of a causal sequence kernel:
    /// `μ = +1`, `σ² = 0.125`.
    pub fn for_sequences() -> Result<Self> {
        Self::new(&[1.0], &[0.125f64.sqrt()])
    }

    pub fn sigmas(&self) -> Vec<T> {
        self.sigma_raw.iter().map(|s| softplus(s.data()[0])).collect()
    }

    pub fn centres(&self) -> Vec<T> {
        self.mu.iter().map(|m| m.data()[0]).collect()
    }
}

/// Records the window on `tape`; returns one value per grid point, `[P]`.
pub fn mask_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, m: &GaussianMask<Var>) -> Result<Var> {
    ensure!(
        m.dims() == grid.dims() && m.sigma_raw.len() == grid.dims(),
        "mask has {} axes, grid has {}",
        m.dims(),
        grid.dims()
    );
    let mut energy = None;
    for d in 0..grid.dims() {
        let coords = tape.constant(grid.coordinate_columns(d, 1));
        let neg_mu = tape.neg(m.mu[d]);
        let centred = tape.add_row(coords, neg_mu)?;
        let sigma = tape.softplus(m.sigma_raw[d]);
        let inv = tape.recip(sigma);
        let z = tape.mul_row(centred, inv)?;
        let sq = tape.square(z);
        energy = Some(match energy {
            None => sq,
            Some(e) => tape.add(e, sq)?,
        });
    }
    let half = tape.scale(energy.expect("at least one axis"), T::lit(-0.5));
    let w = tape.exp(half);
    tape.reshape(w, &[grid.num_points()])
}

/// Samples the window on `grid`; shape `[k…]`.
pub fn gaussian_mask<T: Scalar>(grid: &CoordinateGrid<T>, p: &GaussianMask<Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = constants(p, &mut tape);
    let w = mask_on_tape(&mut tape, grid, &vars)?;
    tape.value(w).clone().reshape(grid.spatial_shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::grid::make_grid;

    #[test]
    fn peak_is_exactly_one_on_grid() {
        let grid = make_grid::<f64>(2, 5).unwrap();
        let m = GaussianMask::new(&[0.5, -1.0], &[0.3, 0.7]).unwrap();
        let w = gaussian_mask(&grid, &m).unwrap();
        // x = 0.5 is column 3, y = −1 is row 0
        assert_eq!(w.get(&[0, 3]), 1.0);
        assert!(w.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn unit_width_one_unit_away() {
        let grid = make_grid::<f64>(2, 3).unwrap();
        let m = GaussianMask::new(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let w = gaussian_mask(&grid, &m).unwrap();
        assert!((w.get(&[1, 2]) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn very_wide_window_is_flat() {
        let grid = make_grid::<f64>(2, 33).unwrap();
        let m = GaussianMask::new(&[0.0, 0.0], &[1e3, 1e3]).unwrap();
        let w = gaussian_mask(&grid, &m).unwrap();
        assert!(w.data().iter().all(|&v| (1.0 - v) < 1e-6));
    }

    #[test]
    fn task_priors() {
        let img = GaussianMask::<Tensor<f64>>::for_images(2).unwrap();
        assert!((img.sigmas()[0].powi(2) - 0.125).abs() < 1e-14);
        assert_eq!(img.centres(), [0.0, 0.0]);
        let seq = GaussianMask::<Tensor<f64>>::for_sequences().unwrap();
        assert_eq!(seq.centres(), [1.0]);
        assert!(GaussianMask::<Tensor<f64>>::new(&[0.0], &[0.0]).is_err());
        assert!(gaussian_mask(&make_grid(1, 5).unwrap(), &img).is_err());
    }
}
