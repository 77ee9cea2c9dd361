//! N-dimensional discrete Fourier transforms over selected axes.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{ensure, Result};
use crate::{Scalar, Tensor};

/// Row-major complex array, the result of [`fft_nd`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Complex<T>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Ok(ComplexTensor { shape, data })
    }

    pub fn from_real(t: &Tensor<T>) -> Self {
        ComplexTensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| Complex::new(x, T::zero())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn re(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|c| c.re).collect())
            .expect("shape preserved")
    }

    pub fn magnitude(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|c| c.norm()).collect())
            .expect("shape preserved")
    }
}

/// Unnormalized forward DFT of `t` along each axis in `dims`.
pub fn fft_nd<T: Scalar>(t: &Tensor<T>, dims: &[usize]) -> Result<ComplexTensor<T>> {
    let mut out = ComplexTensor::from_real(t);
    transform(&mut out, dims, true)?;
    Ok(out)
}

/// Inverse of [`fft_nd`], including the `1/n` normalization.
pub fn ifft_nd<T: Scalar>(spec: &ComplexTensor<T>, dims: &[usize]) -> Result<ComplexTensor<T>> {
    let mut out = spec.clone();
    transform(&mut out, dims, false)?;
    let n: usize = dims.iter().map(|&d| out.shape[d]).product();
    let scale = T::one() / T::lit(n as f64);
    for v in &mut out.data {
        *v = *v * scale;
    }
    Ok(out)
}

fn transform<T: Scalar>(t: &mut ComplexTensor<T>, dims: &[usize], forward: bool) -> Result<()> {
    let mut planner = FftPlanner::<T>::new();
    for (i, &d) in dims.iter().enumerate() {
        ensure!(d < t.shape.len(), "axis {d} out of range for {:?}", t.shape);
        ensure!(!dims[..i].contains(&d), "axis {d} listed twice");
        ensure!(t.shape[d] >= 1, "axis {d} has zero extent");
        let n = t.shape[d];
        if n == 1 {
            continue;
        }
        let plan = if forward {
            planner.plan_fft_forward(n)
        } else {
            planner.plan_fft_inverse(n)
        };
        let stride: usize = t.shape[d + 1..].iter().product();
        let outer: usize = t.shape[..d].iter().product();
        let mut lane = vec![Complex::new(T::zero(), T::zero()); n];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (k, v) in lane.iter_mut().enumerate() {
                    *v = t.data[base + k * stride];
                }
                plan.process(&mut lane);
                for (k, v) in lane.iter().enumerate() {
                    t.data[base + k * stride] = *v;
                }
            }
        }
    }
    Ok(())
}

/// Frequency in cycles per sample of DFT bin `b` for an `n`-point transform,
/// folded into `[-n/2, n/2]` and scaled by `1/n`.
pub fn bin_frequency(b: usize, n: usize) -> f64 {
    let signed = if 2 * b > n { b as f64 - n as f64 } else { b as f64 };
    signed / n as f64
}
