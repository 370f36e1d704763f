//! Weakly supervised object localization via combinational class activation
//! maps and non-local attention.
//!
//! The pipeline: a small trainable classifier ([`model`]) exposes its last
//! feature maps and FC weights; [`cam`] ranks the classes and combines the
//! ranked activation maps with a coefficient function from [`combine`];
//! [`localization`] thresholds the combined map into a bounding box; and
//! [`metrics`] scores classification and localization. [`synth`] generates
//! a deterministic dataset with known boxes, and [`storage`] pins the file
//! formats for tensors, checkpoints, manifests, reports and heatmaps.

pub mod cam;
pub mod combine;
pub mod error;
pub mod gradcheck;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod nonlocal;
pub mod storage;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
