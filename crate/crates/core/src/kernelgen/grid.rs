use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Evenly spaced sample positions spanning `[-1, 1]^D`.
///
/// For `D = 2` the grid is stored row-major with the row index running along
/// `y` and the column index along `x`; each point holds `[x, y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid<T> {
    dims: usize,
    resolution: usize,
    axis: Vec<T>,
    positions: Tensor<T>,
}

/// Builds the `k`-point-per-axis grid over `[-1, 1]^dims`.
pub fn make_grid<T: Scalar>(dims: usize, k: usize) -> Result<CoordinateGrid<T>> {
    if dims != 1 && dims != 2 {
        return Err(Error::UnsupportedDims(dims));
    }
    if k == 0 {
        return Err(Error::contract("grid resolution must be at least 1"));
    }
    let axis: Vec<T> = (0..k)
        .map(|i| {
            if k == 1 {
                T::zero()
            } else {
                T::lit(-1.0 + 2.0 * i as f64 / (k - 1) as f64)
            }
        })
        .collect();
    let positions = if dims == 1 {
        Tensor::new([k, 1], axis.clone())?
    } else {
        let mut data = Vec::with_capacity(2 * k * k);
        for &y in &axis {
            for &x in &axis {
                data.push(x);
                data.push(y);
            }
        }
        Tensor::new([k, k, 2], data)?
    };
    Ok(CoordinateGrid {
        dims,
        resolution: k,
        axis,
        positions,
    })
}

impl<T: Scalar> CoordinateGrid<T> {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Coordinates along one axis (shared by all axes).
    pub fn axis(&self) -> &[T] {
        &self.axis
    }

    /// Positions shaped `[k, D]` or `[k, k, D]`.
    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        vec![self.resolution; self.dims]
    }

    pub fn num_points(&self) -> usize {
        self.resolution.pow(self.dims as u32)
    }

    /// Positions flattened to `[P, D]`.
    pub fn points(&self) -> Tensor<T> {
        self.positions
            .clone()
            .reshape([self.num_points(), self.dims])
            .expect("grid point count")
    }

    /// Coordinate `d` of every point, broadcast to `[P, width]`.
    pub fn coordinate_columns(&self, d: usize, width: usize) -> Tensor<T> {
        let p = self.positions.data();
        let data = (0..self.num_points())
            .flat_map(|i| std::iter::repeat_n(p[i * self.dims + d], width))
            .collect();
        Tensor::new([self.num_points(), width], data).expect("grid point count")
    }

    /// Distance between neighbouring samples, `2 / (k − 1)`.
    pub fn spacing(&self) -> T {
        if self.resolution < 2 {
            T::zero()
        } else {
            T::lit(2.0 / (self.resolution - 1) as f64)
        }
    }

    /// Samples per unit length, `(k − 1) / 2`.
    pub fn sampling_rate(&self) -> f64 {
        (self.resolution as f64 - 1.0) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_line() {
        let g = make_grid::<f64>(1, 3).unwrap();
        assert_eq!(g.axis(), &[-1.0, 0.0, 1.0]);
        assert_eq!(g.points().shape(), &[3, 1]);
    }

    #[test]
    fn two_points_hit_both_ends() {
        assert_eq!(make_grid::<f64>(1, 2).unwrap().axis(), &[-1.0, 1.0]);
        assert_eq!(make_grid::<f64>(1, 1).unwrap().axis(), &[0.0]);
    }

    #[test]
    fn square_grid_corner_and_spacing() {
        let g = make_grid::<f64>(2, 33).unwrap();
        assert_eq!(g.positions().shape(), &[33, 33, 2]);
        assert_eq!(g.positions().get(&[0, 0, 0]), -1.0);
        assert_eq!(g.positions().get(&[0, 0, 1]), -1.0);
        assert_eq!(g.positions().get(&[32, 32, 0]), 1.0);
        assert_eq!(g.spacing(), 1.0 / 16.0);
        for w in g.axis().windows(2) {
            assert_eq!(w[1] - w[0], 1.0 / 16.0);
        }
        // x varies along columns, y along rows
        assert_eq!(g.positions().get(&[0, 1, 0]), -1.0 + 1.0 / 16.0);
        assert_eq!(g.positions().get(&[1, 0, 1]), -1.0 + 1.0 / 16.0);
    }

    #[test]
    fn unsupported_dimensionality() {
        assert!(matches!(make_grid::<f64>(3, 5), Err(Error::UnsupportedDims(3))));
        assert!(make_grid::<f64>(0, 5).is_err());
        assert!(make_grid::<f64>(1, 0).is_err());
    }
}
