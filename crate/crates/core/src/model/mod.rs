//! Shared-bottom U-Net with three per-pixel classification heads.
//!
//! The trunk takes intensity plus two coordinate planes; the seg head
//! localizes joints over 22 classes, the other two classify narrowing
//! (5 grades) and erosion (6 grades). Gradients are computed by an
//! explicit reverse pass over cached activations.

pub mod checkpoint;
pub mod gradcheck;
mod loss;
mod network;
mod ops;
mod params;
mod scalar;

pub use loss::{combine, loss, LossTerms, LossWeights};
pub use network::{forward, gradients, input_planes, HeadLogits};
pub use params::{
    init_params, parameter_count, NetworkConfig, NetworkParams, ParamRole, ParamSpec, HEAD_CLASSES, INPUT_CHANNELS,
};
pub use scalar::Scalar;
