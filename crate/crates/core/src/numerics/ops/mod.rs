//! Differentiable operators, implemented as methods on [`Tape`](super::Tape).

mod conv;
mod elementwise;
mod fft;
mod linalg;
mod reduce;
mod resize;
mod shape;

pub use conv::Padding;
pub use elementwise::{gelu, gelu_grad, normal_cdf, sigmoid};
pub use fft::{fft2_planes, fft_radix2};
pub use reduce::LAYERNORM_EPS;
pub use resize::{bicubic_resize, bicubic_resize_to, cubic_weight, CATMULL_ROM_A};
