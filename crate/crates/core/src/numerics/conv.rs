//! Multi-channel cross-correlation kernels.
//!
//! Every routine computes
//!
//! ```text
//! out[b, o, y, x] = Σ_c Σ_i Σ_j in[b, c, y + i − pad_top, x + j − pad_left] · k[o, c, i, j]
//! ```
//!
//! with zeros outside the input. One-dimensional signals use a height of 1.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{ensure, Result};
use crate::Scalar;

/// Shapes and zero padding of one batched cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input spatial extents `(height, width)`.
    pub input: [usize; 2],
    /// Kernel spatial extents `(height, width)`.
    pub kernel: [usize; 2],
    /// `(before, after)` zero padding per spatial axis.
    pub pad: [(usize, usize); 2],
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        for axis in 0..2 {
            let (before, after) = self.pad[axis];
            ensure!(self.kernel[axis] >= 1, "empty kernel axis {axis}");
            ensure!(
                before < self.kernel[axis] && after < self.kernel[axis],
                "padding {:?} must be smaller than kernel extent {}",
                self.pad[axis],
                self.kernel[axis]
            );
            ensure!(
                self.input[axis] + before + after >= self.kernel[axis],
                "kernel extent {} exceeds padded input {}",
                self.kernel[axis],
                self.input[axis] + before + after
            );
        }
        Ok(())
    }

    pub fn output(&self) -> [usize; 2] {
        [0, 1].map(|a| self.input[a] + self.pad[a].0 + self.pad[a].1 + 1 - self.kernel[a])
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.input[0] * self.input[1]
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel[0] * self.kernel[1]
    }

    pub fn output_len(&self) -> usize {
        let [h, w] = self.output();
        self.batch * self.out_channels * h * w
    }

    fn check_slices<T>(&self, x: &[T], k: &[T]) -> Result<()> {
        self.validate()?;
        ensure!(x.len() == self.input_len(), "input length mismatch");
        ensure!(k.len() == self.kernel_len(), "kernel length mismatch");
        Ok(())
    }
}

/// Unfolds one batch element into a `[C·kh·kw, Ho·Wo]` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let [h, w] = g.input;
    let [kh, kw] = g.kernel;
    let [ho, wo] = g.output();
    let (pt, pl) = (g.pad[0].0, g.pad[1].0);
    for c in 0..g.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * ho * wo;
                let dst = &mut cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = oy + i;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < pt || iy - pt >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pt) * w..(iy - pt + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox + j;
                        *v = if ix < pl || ix - pl >= w {
                            T::zero()
                        } else {
                            src[ix - pl]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch-matrix gradient into `dx`.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let [h, w] = g.input;
    let [kh, kw] = g.kernel;
    let [ho, wo] = g.output();
    let (pt, pl) = (g.pad[0].0, g.pad[1].0);
    for c in 0..g.in_channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * ho * wo;
                let src = &cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = oy + i;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pt) * w..(iy - pt + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = ox + j;
                        if ix >= pl && ix - pl < w {
                            dst[ix - pl] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Spatial-domain cross-correlation (patch unfolding + matrix product).
pub fn correlate_direct<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T]) -> Result<Vec<T>> {
    g.check_slices(x, k)?;
    let [h, w] = g.input;
    let [ho, wo] = g.output();
    let patch = g.in_channels * g.kernel[0] * g.kernel[1];
    let (in_stride, out_stride) = (g.in_channels * h * w, g.out_channels * ho * wo);
    let mut out = vec![T::zero(); g.output_len()];
    let mut cols = vec![T::zero(); patch * ho * wo];
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        T::gemm(
            g.out_channels,
            patch,
            ho * wo,
            T::one(),
            k,
            patch as isize,
            1,
            &cols,
            (ho * wo) as isize,
            1,
            T::zero(),
            &mut out[b * out_stride..(b + 1) * out_stride],
            (ho * wo) as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of [`correlate_direct`] with respect to input and kernel.
pub fn correlate_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    k: &[T],
    grad_out: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    g.check_slices(x, k)?;
    ensure!(grad_out.len() == g.output_len(), "output gradient length mismatch");
    let [h, w] = g.input;
    let [ho, wo] = g.output();
    let patch = g.in_channels * g.kernel[0] * g.kernel[1];
    let (in_stride, out_stride) = (g.in_channels * h * w, g.out_channels * ho * wo);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut cols = vec![T::zero(); patch * ho * wo];
    let mut dcols = vec![T::zero(); patch * ho * wo];
    for b in 0..g.batch {
        let gout = &grad_out[b * out_stride..(b + 1) * out_stride];
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut cols);
        // dk += gout · colsᵀ
        T::gemm(
            g.out_channels,
            ho * wo,
            patch,
            T::one(),
            gout,
            (ho * wo) as isize,
            1,
            &cols,
            1,
            (ho * wo) as isize,
            T::one(),
            &mut dk,
            patch as isize,
            1,
        );
        // dcols = kᵀ · gout
        T::gemm(
            patch,
            g.out_channels,
            ho * wo,
            T::one(),
            k,
            1,
            patch as isize,
            gout,
            (ho * wo) as isize,
            1,
            T::zero(),
            &mut dcols,
            (ho * wo) as isize,
            1,
        );
        col2im(g, &dcols, &mut dx[b * in_stride..(b + 1) * in_stride]);
    }
    Ok((dx, dk))
}

/// Frequency-domain cross-correlation.
///
/// Inputs and flipped kernels are zero padded to at least the full linear
/// convolution size, multiplied in the Fourier domain and transformed back;
/// the requested output window is then read off the linear result.
pub fn correlate_fft<T: Scalar>(g: &ConvGeometry, x: &[T], k: &[T]) -> Result<Vec<T>> {
    g.check_slices(x, k)?;
    let [h, w] = g.input;
    let [kh, kw] = g.kernel;
    let [ho, wo] = g.output();
    let fh = h + kh - 1;
    let fw = w + kw - 1;
    let n = fh * fw;
    let mut planner = FftPlanner::<T>::new();
    let plan = Plan2d::new(&mut planner, fh, fw);

    // Flipped kernels: kf[i][j] = k[kh-1-i][kw-1-j].
    let mut kspec = vec![Complex::new(T::zero(), T::zero()); g.out_channels * g.in_channels * n];
    for oc in 0..g.out_channels * g.in_channels {
        let src = &k[oc * kh * kw..(oc + 1) * kh * kw];
        let dst = &mut kspec[oc * n..(oc + 1) * n];
        for i in 0..kh {
            for j in 0..kw {
                dst[(kh - 1 - i) * fw + (kw - 1 - j)].re = src[i * kw + j];
            }
        }
        plan.forward(dst);
    }

    let scale = T::one() / T::lit(n as f64);
    let (off_y, off_x) = (kh - 1 - g.pad[0].0, kw - 1 - g.pad[1].0);
    let mut out = vec![T::zero(); g.output_len()];
    let mut xspec = vec![Complex::new(T::zero(), T::zero()); g.in_channels * n];
    let mut acc = vec![Complex::new(T::zero(), T::zero()); n];
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let src = &x[(b * g.in_channels + c) * h * w..][..h * w];
            let dst = &mut xspec[c * n..(c + 1) * n];
            dst.fill(Complex::new(T::zero(), T::zero()));
            for y in 0..h {
                for xx in 0..w {
                    dst[y * fw + xx].re = src[y * w + xx];
                }
            }
            plan.forward(dst);
        }
        for o in 0..g.out_channels {
            acc.fill(Complex::new(T::zero(), T::zero()));
            for c in 0..g.in_channels {
                let ks = &kspec[(o * g.in_channels + c) * n..][..n];
                let xs = &xspec[c * n..(c + 1) * n];
                for ((a, &u), &v) in acc.iter_mut().zip(xs).zip(ks) {
                    *a = *a + u * v;
                }
            }
            plan.inverse(&mut acc);
            let dst = &mut out[(b * g.out_channels + o) * ho * wo..][..ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = acc[(y + off_y) * fw + xx + off_x].re * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Unnormalized 2-D FFT plan over a row-major `rows × cols` buffer.
pub(crate) struct Plan2d<T: Scalar> {
    rows: usize,
    cols: usize,
    row_fwd: std::sync::Arc<dyn rustfft::Fft<T>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<T>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<T>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<T>>,
}

impl<T: Scalar> Plan2d<T> {
    pub(crate) fn new(planner: &mut FftPlanner<T>, rows: usize, cols: usize) -> Self {
        Plan2d {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub(crate) fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, true);
    }

    pub(crate) fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, false);
    }

    fn run(&self, buf: &mut [Complex<T>], forward: bool) {
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        if self.cols > 1 {
            row.process(buf);
        }
        if self.rows > 1 {
            let mut column = vec![Complex::new(T::zero(), T::zero()); self.rows];
            for j in 0..self.cols {
                for i in 0..self.rows {
                    column[i] = buf[i * self.cols + j];
                }
                col.process(&mut column);
                for i in 0..self.rows {
                    buf[i * self.cols + j] = column[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal quadruple loop over the defining sum.
    fn correlate_naive(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let [h, w] = g.input;
        let [kh, kw] = g.kernel;
        let [ho, wo] = g.output();
        let mut out = vec![0.0; g.output_len()];
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y + i) as isize - g.pad[0].0 as isize;
                                    let ix = (xx + j) as isize - g.pad[1].0 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x[((b * g.in_channels + c) * h + iy as usize) * w
                                        + ix as usize]
                                        * k[((o * g.in_channels + c) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((b * g.out_channels + o) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geometries() -> Vec<ConvGeometry> {
        vec![
            ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 2,
                input: [7, 6],
                kernel: [3, 5],
                pad: [(1, 1), (2, 2)],
            },
            ConvGeometry {
                batch: 1,
                in_channels: 1,
                out_channels: 1,
                input: [1, 9],
                kernel: [1, 4],
                pad: [(0, 0), (3, 0)],
            },
            ConvGeometry {
                batch: 1,
                in_channels: 2,
                out_channels: 3,
                input: [5, 5],
                kernel: [4, 2],
                pad: [(0, 0), (0, 0)],
            },
        ]
    }

    #[test]
    fn direct_and_fft_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in geometries() {
            let x = random(&mut rng, g.input_len());
            let k = random(&mut rng, g.kernel_len());
            let reference = correlate_naive(&g, &x, &k);
            let direct = correlate_direct(&g, &x, &k).unwrap();
            let fft = correlate_fft(&g, &x, &k).unwrap();
            for ((r, d), f) in reference.iter().zip(&direct).zip(&fft) {
                assert!((r - d).abs() < 1e-12, "{g:?}");
                assert!((r - f).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <gout, conv(x, k)> is bilinear; its partial derivatives are the
        // adjoint maps, so perturbing x or k must agree with the returned
        // gradients exactly (up to rounding).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for g in geometries() {
            let x = random(&mut rng, g.input_len());
            let k = random(&mut rng, g.kernel_len());
            let gout = random(&mut rng, g.output_len());
            let (dx, dk) = correlate_backward(&g, &x, &k, &gout).unwrap();
            let dot = |y: &[f64]| y.iter().zip(&gout).map(|(a, b)| a * b).sum::<f64>();
            for idx in 0..x.len() {
                let mut e = vec![0.0; x.len()];
                e[idx] = 1.0;
                let expect = dot(&correlate_naive(&g, &e, &k));
                assert!((expect - dx[idx]).abs() < 1e-12);
            }
            for idx in 0..k.len() {
                let mut e = vec![0.0; k.len()];
                e[idx] = 1.0;
                let expect = dot(&correlate_naive(&g, &x, &e));
                assert!((expect - dk[idx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_padding_is_rejected() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            input: [1, 4],
            kernel: [1, 2],
            pad: [(0, 0), (2, 0)],
        };
        assert!(correlate_direct(&g, &[0.0; 4], &[0.0; 2]).is_err());
    }
}
