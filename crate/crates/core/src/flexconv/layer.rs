use std::ops::Range;

use crate::error::{ensure, Result};
use crate::flexconv::mask::{gaussian_mask, mask_on_tape, GaussianMask};
use crate::kernelgen::grid::{make_grid, CoordinateGrid};
use crate::kernelgen::magnet::{magnet_forward, magnet_points_on_tape, Kernel, Magnet};
use crate::numerics::params::{constants, join, ParamTree};
use crate::numerics::tape::{ConvMode, Tape, Var};
use crate::{Scalar, Tensor};

/// How a sampled kernel is cropped and applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvConfig {
    pub mode: ConvMode,
    /// Output at position `t` sees only inputs `≤ t` (1-D only).
    pub causal: bool,
    /// Kernel positions whose mask value does not exceed this are dropped.
    pub crop_threshold: f64,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            mode: ConvMode::Direct,
            causal: false,
            crop_threshold: 0.1,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.crop_threshold > 0.0 && self.crop_threshold < 1.0,
            "crop threshold must lie in (0, 1), got {}",
            self.crop_threshold
        );
        Ok(())
    }

    /// Kernel index aligned with the output position: the centre for
    /// "same" convolution, the last sample for causal convolution.
    pub fn anchor(&self, k: usize) -> usize {
        if self.causal {
            k - 1
        } else {
            (k - 1) / 2
        }
    }
}

/// Smallest odd kernel size covering `k_data` samples.
pub fn kernel_size_init(k_data: usize) -> usize {
    if k_data % 2 == 1 {
        k_data
    } else {
        k_data + 1
    }
}

/// Tightest box holding every mask value above `threshold`, widened to
/// contain the anchor index on each axis. Falls back to the largest value
/// when nothing clears the threshold.
pub fn crop_box<T: Scalar>(mask: &Tensor<T>, threshold: f64, anchor: usize) -> Vec<Range<usize>> {
    let shape = mask.shape();
    let thr = T::lit(threshold);
    let mut lo = vec![usize::MAX; shape.len()];
    let mut hi = vec![0usize; shape.len()];
    let mut best = (T::neg_infinity(), 0usize);
    for (flat, &v) in mask.data().iter().enumerate() {
        if v > best.0 {
            best = (v, flat);
        }
        if v > thr {
            widen(&mut lo, &mut hi, &unravel(flat, shape));
        }
    }
    if lo[0] == usize::MAX {
        widen(&mut lo, &mut hi, &unravel(best.1, shape));
    }
    let anchor = vec![anchor; shape.len()];
    widen(&mut lo, &mut hi, &anchor);
    lo.into_iter().zip(hi).map(|(a, b)| a..b + 1).collect()
}

fn widen(lo: &mut [usize], hi: &mut [usize], idx: &[usize]) {
    for d in 0..idx.len() {
        lo[d] = lo[d].min(idx[d]);
        hi[d] = hi[d].max(idx[d]);
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Zero padding `(before, after)` per axis that keeps `anchor` aligned with
/// each output position after cropping to `bx`.
pub fn crop_padding(bx: &[Range<usize>], anchor: usize) -> Vec<(usize, usize)> {
    bx.iter().map(|r| (anchor - r.start, r.end - 1 - anchor)).collect()
}

/// A masked kernel together with its crop window.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexKernel<T> {
    pub full: Kernel<T>,
    pub mask: Tensor<T>,
    pub masked: Kernel<T>,
    pub crop_box: Vec<Range<usize>>,
    pub anchor: usize,
}

impl<T: Scalar> FlexKernel<T> {
    /// Masked kernel restricted to the crop box, `[N_out, N_in, extents…]`.
    pub fn cropped(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let k = tape.constant(self.masked.values.clone());
        let (starts, extents) = box_parts(&self.crop_box);
        let c = tape.crop(k, &starts, &extents)?;
        Ok(tape.value(c).clone())
    }

    pub fn padding(&self) -> Vec<(usize, usize)> {
        crop_padding(&self.crop_box, self.anchor)
    }
}

fn box_parts(bx: &[Range<usize>]) -> (Vec<usize>, Vec<usize>) {
    bx.iter().map(|r| (r.start, r.len())).unzip()
}

pub fn apply_mask_and_crop<T: Scalar>(kernel: &Kernel<T>, mask: &Tensor<T>, cfg: &ConvConfig) -> Result<FlexKernel<T>> {
    cfg.validate()?;
    let spatial = &kernel.values.shape()[2..];
    ensure!(mask.shape() == spatial, "mask shape {:?} does not match kernel extents {:?}", mask.shape(), spatial);
    ensure!(!cfg.causal || kernel.dims == 1, "causal convolution is 1-D only");
    let p = mask.len();
    let data = kernel
        .values
        .data()
        .chunks(p)
        .flat_map(|c| c.iter().zip(mask.data()).map(|(&a, &b)| a * b))
        .collect();
    let anchor = cfg.anchor(kernel.resolution);
    Ok(FlexKernel {
        full: kernel.clone(),
        mask: mask.clone(),
        masked: Kernel {
            values: Tensor::new(kernel.values.shape().to_vec(), data)?,
            resolution: kernel.resolution,
            dims: kernel.dims,
        },
        crop_box: crop_box(mask, cfg.crop_threshold, anchor),
        anchor,
    })
}

/// Cross-correlates `signal: [B, N_in, spatial…]` with the cropped kernel.
/// Images get zero "same" padding, causal sequences left padding only.
pub fn convolve<T: Scalar>(signal: &Tensor<T>, fk: &FlexKernel<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    ensure!(
        signal.rank() == fk.masked.dims + 2,
        "signal must be [B, C, spatial…] with {} spatial axes",
        fk.masked.dims
    );
    ensure!(
        signal.shape()[1] == fk.masked.in_channels(),
        "signal has {} channels, kernel expects {}",
        signal.shape()[1],
        fk.masked.in_channels()
    );
    let mut tape = Tape::new();
    let x = tape.constant(signal.clone());
    let k = tape.constant(fk.cropped()?);
    let y = tape.conv(x, k, &fk.padding(), cfg.mode)?;
    Ok(tape.value(y).clone())
}

/// A learnable convolution: kernel network plus size mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexConv<P> {
    pub magnet: Magnet<P>,
    pub mask: GaussianMask<P>,
}

impl<P> ParamTree<P> for FlexConv<P> {
    type Mapped<Q> = FlexConv<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> FlexConv<Q> {
        FlexConv {
            magnet: self.magnet.map_params(&join(prefix, "magnet"), f),
            mask: self.mask.map_params(&join(prefix, "mask"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.magnet.visit_params_mut(&join(prefix, "magnet"), f);
        self.mask.visit_params_mut(&join(prefix, "mask"), f);
    }
}

/// Masked kernel `[N_out, N_in, k…]` and the mask `[P]` on `tape`.
pub fn masked_kernel_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, layer: &FlexConv<Var>) -> Result<(Var, Var)> {
    let s = layer.magnet.shape;
    let points = magnet_points_on_tape(tape, grid, &layer.magnet)?;
    let by_channel = tape.transpose(points)?;
    let mask = mask_on_tape(tape, grid, &layer.mask)?;
    let masked = tape.mul_row(by_channel, mask)?;
    let mut shape = vec![s.out_channels, s.in_channels];
    shape.extend(grid.spatial_shape());
    Ok((tape.reshape(masked, &shape)?, mask))
}

/// Full differentiable FlexConv on `x: [B, N_in, spatial…]`. The crop box is
/// computed from the current mask values and is not differentiated.
pub fn flexconv_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    grid: &CoordinateGrid<T>,
    layer: &FlexConv<Var>,
    cfg: &ConvConfig,
) -> Result<Var> {
    cfg.validate()?;
    ensure!(!cfg.causal || grid.dims() == 1, "causal convolution is 1-D only");
    let (kernel, mask) = masked_kernel_on_tape(tape, grid, layer)?;
    let mask_values = tape.value(mask).clone().reshape(grid.spatial_shape())?;
    let anchor = cfg.anchor(grid.resolution());
    let bx = crop_box(&mask_values, cfg.crop_threshold, anchor);
    let (starts, extents) = box_parts(&bx);
    let cropped = tape.crop(kernel, &starts, &extents)?;
    tape.conv(x, cropped, &crop_padding(&bx, anchor), cfg.mode)
}

/// Samples network and mask on a `k`-point grid.
pub fn flex_kernel<T: Scalar>(magnet: &Magnet<Tensor<T>>, mask: &GaussianMask<Tensor<T>>, k: usize, cfg: &ConvConfig) -> Result<FlexKernel<T>> {
    let grid = make_grid(magnet.shape.dims, k)?;
    let kernel = magnet_forward(&grid, magnet)?;
    let w = gaussian_mask(&grid, mask)?;
    apply_mask_and_crop(&kernel, &w, cfg)
}

/// Re-samples the continuous kernel at `k_dst` points per axis. The returned
/// factor `((k_src − 1) / (k_dst − 1))^D` rescales the new kernel so that a
/// convolution at the new sampling rate approximates the original one.
pub fn resample_kernel<T: Scalar>(
    magnet: &Magnet<Tensor<T>>,
    mask: &GaussianMask<Tensor<T>>,
    k_src: usize,
    k_dst: usize,
    cfg: &ConvConfig,
) -> Result<(FlexKernel<T>, T)> {
    ensure!(k_src >= 2 && k_dst >= 2, "resampling needs at least 2 points per axis");
    let fk = flex_kernel(magnet, mask, k_dst, cfg)?;
    let ratio = (k_src - 1) as f64 / (k_dst - 1) as f64;
    Ok((fk, T::lit(ratio.powi(magnet.shape.dims as i32))))
}

/// Samples a layer with the plain (non-tape) path.
pub fn flexconv_forward<T: Scalar>(x: &Tensor<T>, layer: &FlexConv<Tensor<T>>, k: usize, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let grid = make_grid(layer.magnet.shape.dims, k)?;
    let mut tape = Tape::new();
    let vars = constants(layer, &mut tape);
    let xv = tape.constant(x.clone());
    let y = flexconv_on_tape(&mut tape, xv, &grid, &vars, cfg)?;
    Ok(tape.value(y).clone())
}
