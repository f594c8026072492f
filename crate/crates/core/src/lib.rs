//! svh-core: multi-task joint localization and damage scoring.
//!
//! Pipeline stages, each in its own module:
//! joint schema -> preprocessing/augmentation -> per-pixel targets ->
//! U-Net with three heads -> training -> expected-value decoding and
//! ensembling -> RMSE evaluation and ablation sweeps. A procedural
//! generator of synthetic radiographs drives everything end to end.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod infer;
pub mod model;
pub mod preprocess;
pub mod schema;
pub mod synth;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
pub use image::{AnnotatedImage, GrayImage, JointAnnotation};
pub use schema::{ImageKey, JointSchema, Limb, PatientRecord, Side, Task};
