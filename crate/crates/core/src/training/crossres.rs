//! Convolving one continuous kernel at two resolutions.
//!
//! A kernel sampled on `k` points and on `2k − 1` points spans the same
//! physical extent; the fine grid has half the spacing. With a signal sampled
//! at matching rates, fine-grid output at even indices approximates coarse
//! output scaled by `2^D`, so it is multiplied by `((k − 1)/(2k − 2))^D`
//! before comparing.

use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::kernelgen::Kernel;
use crate::numerics::conv::{correlate_direct, ConvGeometry};
use crate::{RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    /// Cycles per unit of kernel coordinate, `(y, x)`.
    pub freq: [f64; 2],
    pub phase: f64,
    pub amplitude: f64,
}

/// A finite sum of 2-D cosines.
#[derive(Clone, Debug, PartialEq)]
pub struct BandLimitedSignal {
    pub components: Vec<Component>,
}

impl BandLimitedSignal {
    /// `count` components with every per-axis frequency in `[-max_hz, max_hz]`.
    pub fn random(rng: &mut RngStream, count: usize, max_hz: f64) -> Self {
        let components = (0..count)
            .map(|_| Component {
                freq: [0, 1].map(|_| (2.0 * rng.next_f64() - 1.0) * max_hz),
                phase: 2.0 * PI * rng.next_f64(),
                amplitude: 0.5 + rng.next_f64(),
            })
            .collect();
        BandLimitedSignal { components }
    }

    pub fn max_hz(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.freq)
            .map(f64::abs)
            .fold(0.0, f64::max)
    }

    /// `[n, n]` samples at `(i·spacing, j·spacing)`.
    pub fn sample<T: Scalar>(&self, n: usize, spacing: f64) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i as f64 * spacing, j as f64 * spacing);
                let v: f64 = self
                    .components
                    .iter()
                    .map(|c| c.amplitude * (2.0 * PI * (c.freq[0] * y + c.freq[1] * x) + c.phase).cos())
                    .sum();
                data.push(T::lit(v));
            }
        }
        Tensor::new([n, n], data)
    }
}

/// Relative L2 error between the scaled fine-grid and the coarse-grid valid
/// correlations of `signal`, over every channel pair.
///
/// `coarse` and `fine` must be the same 2-D kernel sampled at `k` and
/// `2k − 1`; the coarse signal has `n_coarse` samples per axis.
pub fn cross_resolution_error<T: Scalar>(coarse: &Kernel<T>, fine: &Kernel<T>, signal: &BandLimitedSignal, n_coarse: usize) -> Result<f64> {
    let k = coarse.resolution;
    ensure!(coarse.dims == 2 && fine.dims == 2, "cross-resolution comparison needs 2-D kernels");
    ensure!(k >= 2 && fine.resolution == 2 * k - 1, "fine kernel must have 2k − 1 = {} points, got {}", 2 * k - 1, fine.resolution);
    ensure!(
        coarse.out_channels() == fine.out_channels() && coarse.in_channels() == fine.in_channels(),
        "channel counts differ between resolutions"
    );
    ensure!(n_coarse >= k, "signal of {n_coarse} samples is shorter than the kernel ({k})");
    let n_fine = 2 * n_coarse - 1;
    let spacing = 2.0 / (k - 1) as f64;
    let xs = signal.sample::<T>(n_coarse, spacing)?;
    let xf = signal.sample::<T>(n_fine, spacing / 2.0)?;
    let geometry = |n: usize, kk: usize| ConvGeometry {
        batch: 1,
        in_channels: 1,
        out_channels: 1,
        input: [n, n],
        kernel: [kk, kk],
        pad: [(0, 0); 2],
    };
    let gc = geometry(n_coarse, k);
    let gf = geometry(n_fine, fine.resolution);
    let [m, _] = gc.output();
    let [mf, _] = gf.output();
    // (1/2)^D with D = 2.
    let scale = 0.25;
    let (mut num, mut den) = (0.0, 0.0);
    for o in 0..coarse.out_channels() {
        for i in 0..coarse.in_channels() {
            let yc = correlate_direct(&gc, xs.data(), coarse.channel(o, i))?;
            let yf = correlate_direct(&gf, xf.data(), fine.channel(o, i))?;
            for p in 0..m {
                for q in 0..m {
                    let c = yc[p * m + q].to_f64_lossy();
                    let f = scale * yf[2 * p * mf + 2 * q].to_f64_lossy();
                    num += (f - c) * (f - c);
                    den += c * c;
                }
            }
        }
    }
    ensure!(den > 0.0, "coarse response is identically zero");
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelgen::grid::make_grid;
    use crate::kernelgen::magnet::magnet_forward;
    use crate::kernelgen::{init_magnet, InitConfig, MagnetShape};

    fn sampled(k: usize, f: impl Fn(f64, f64) -> f64) -> Kernel<f64> {
        let axis: Vec<f64> = (0..k).map(|i| -1.0 + 2.0 * i as f64 / (k - 1) as f64).collect();
        let data = axis.iter().flat_map(|&y| axis.iter().map(move |&x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Kernel {
            values: Tensor::new([1, 1, k, k], data).unwrap(),
            resolution: k,
            dims: 2,
        }
    }

    #[test]
    fn smooth_kernel_agrees_across_resolutions() {
        let bump = |y: f64, x: f64| (-4.0 * (x * x + y * y)).exp();
        let sig = BandLimitedSignal::random(&mut RngStream::new(3), 4, 1.5);
        assert!(sig.max_hz() <= 1.5);
        let e = cross_resolution_error(&sampled(17, bump), &sampled(33, bump), &sig, 40).unwrap();
        assert!(e < 0.02, "{e}");
    }

    #[test]
    fn high_frequency_kernel_disagrees() {
        let smooth = |y: f64, x: f64| (-4.0 * (x * x + y * y)).exp();
        let wiggly = |y: f64, x: f64| smooth(y, x) * (2.0 * PI * 7.0 * (x + y)).cos();
        let sig = BandLimitedSignal::random(&mut RngStream::new(3), 4, 3.0);
        let good = cross_resolution_error(&sampled(17, smooth), &sampled(33, smooth), &sig, 40).unwrap();
        let bad = cross_resolution_error(&sampled(17, wiggly), &sampled(33, wiggly), &sig, 40).unwrap();
        assert!(bad > 0.05 && good < bad, "good {good} bad {bad}");
    }

    #[test]
    fn works_with_generated_kernels() {
        let shape = MagnetShape { dims: 2, layers: 2, hidden: 4, in_channels: 2, out_channels: 3, isotropic: false };
        let m = init_magnet::<f64>(shape, &InitConfig::default(), &mut RngStream::new(0)).unwrap();
        let kc = magnet_forward(&make_grid(2, 9).unwrap(), &m).unwrap();
        let kf = magnet_forward(&make_grid(2, 17).unwrap(), &m).unwrap();
        let sig = BandLimitedSignal::random(&mut RngStream::new(1), 3, 1.0);
        let e = cross_resolution_error(&kc, &kf, &sig, 20).unwrap();
        assert!(e.is_finite());
        assert!(cross_resolution_error(&kc, &kc, &sig, 20).is_err());
    }
}
