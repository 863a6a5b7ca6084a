//! Normality normalization: a normalization layer that gaussianizes each
//! group of pre-activations with a Yeo–Johnson power transform (parameter
//! estimated in closed form by one Newton–Raphson step), adds scaled
//! Gaussian noise during training, and then applies the usual affine map.
//!
//! The crate also carries a small reverse-mode autodiff MLP trainer to
//! exercise the layer, and the normality / independence / robustness
//! diagnostics used to inspect trained models.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod noise_rng;
pub mod normalization;
pub mod power_transform;
pub mod tensor;

pub use data::{Dataset, SynthKind};
pub use error::{Error, Result};
pub use nn::{build_mlp, Mlp, MlpSpec, NormConfig, NormKind, TrainConfig};
pub use noise_rng::NoiseStream;
pub use normalization::{
    ConventionalNorm, GroupingMode, GroupingSpec, NoiseMode, NormLayerState, NormalityNorm,
};
pub use power_transform::{LambdaEstimate, Sample};
pub use tensor::Tensor;
