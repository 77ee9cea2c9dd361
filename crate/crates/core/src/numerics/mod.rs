//! Differentiable computation substrate: tensors, reverse-mode gradients,
//! Fourier transforms, convolution kernels and seeded sampling.

pub mod conv;
pub mod fft;
pub mod io;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
