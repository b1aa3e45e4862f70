//! Differentiable layers recorded on an autodiff [`Tape`](crate::autodiff::Tape).

mod activation;
mod conv;
mod norm;
mod shape;

pub use activation::{point_distance, relu, softmax2};
pub use conv::{conv2d, conv_layer, deconv2d, ConvParams};
pub use norm::{batch_norm, BatchNormParams, BatchStats, BnMode};
pub use shape::{concat_channels, max_pool2, replicate_upsample};
