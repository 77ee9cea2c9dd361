//! Masked, cropped continuous convolution.

pub mod layer;
pub mod mask;

pub use layer::{
    apply_mask_and_crop, convolve, crop_box, crop_padding, flex_kernel, flexconv_forward, flexconv_on_tape, kernel_size_init,
    masked_kernel_on_tape, resample_kernel, ConvConfig, FlexConv, FlexKernel,
};
pub use mask::{gaussian_mask, mask_on_tape, GaussianMask};
