//! Engine for two-level airspace-severity grading of chest X-ray images.
//!
//! The crate provides the full desk-scale pipeline: a dense tensor type with
//! reverse-mode autodiff, convolutional layer kernels with exact parameter
//! and FLOP accounting, a light-weight PEPE-pattern backbone with a severity
//! head, a data pipeline (manifest ingestion, preprocessing, augmentation,
//! patient-disjoint splitting, balanced batching, synthetic data), the
//! training recipe with Adam, confusion-matrix metrics, and occlusion-based
//! critical-factor explanations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod explain;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Dtype, Scalar, Tensor};
