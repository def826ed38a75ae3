//! Merging LoRA adapters by orthogonalizing their factors and merging
//! magnitudes and directions separately, with diagnostics and Monte Carlo
//! checks of the supporting theory.

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod merge;
pub mod ortho;
pub mod par;
pub mod report;
pub mod rng;

pub use checkpoint::{AdapterSet, AdapterSource, BaseCheckpoint, Checkpoint, Dtype, ExtractOptions, LoraLayer, TensorRecord};
pub use error::{Error, ParseErrorKind, Result};
pub use linalg::{DecoupledLayer, DirectionMatrix, MagnitudeMode, MagnitudeVector, TaskMatrix};
pub use merge::{MergeConfig, MergedLayer, Method, OutputMode};
pub use ortho::{OrthoConfig, OrthoStats};
