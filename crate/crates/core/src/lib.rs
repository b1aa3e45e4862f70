//! MEnet: metric-expression encoder-decoder for salient object segmentation.
//!
//! The crate contains a small define-by-run autodiff engine, the layer
//! vocabulary and model built on it, the combined metric / cross-entropy
//! objective, saliency inference, Jacobian robustness probes, evaluation
//! metrics, input distortions, a synthetic data pipeline and an SGD trainer.

// `!(x > 0.0)` checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod audit;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod distortions;
pub mod element;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod robustness;
pub mod saliency;
pub mod tensor;
pub mod trainer;

pub use element::Element;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
