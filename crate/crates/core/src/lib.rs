//! Continuous convolution kernels with learnable size.
//!
//! Kernels are generated by multiplicative anisotropic Gabor networks
//! ([`kernelgen`]), windowed by a learnable Gaussian mask and cropped
//! ([`flexconv`]), and kept below the Nyquist frequency of their sampling grid
//! by an analytic bandwidth penalty ([`spectral`]). [`training`] holds the
//! optimizer, schedules and the reference experiments.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below name the `f64` instantiations used for verification.

// `!(x < y)` is used on purpose so that NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod scalar;

pub mod flexconv;
pub mod kernelgen;
pub mod numerics;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use numerics::fft::{fft_nd, ifft_nd, ComplexTensor};
pub use numerics::params::{finite_difference_grad, ParamTree};
pub use numerics::rng::RngStream;
pub use numerics::tape::{ConvMode, Gradients, Tape, Var};
pub use numerics::tensor::Tensor;
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Magnet64 = kernelgen::Magnet<Tensor<f64>>;
pub type Kernel64 = kernelgen::Kernel<f64>;
pub type Grid64 = kernelgen::CoordinateGrid<f64>;
