//! Checkpoint-level model merging.
//!
//! Reads and writes safetensors checkpoints, classifies tensors by their
//! structural role, and implements linear and spherical interpolation, task
//! arithmetic, TIES, DARE, RegMean and selective attention merging, plus
//! task-vector transfer and cosine-similarity analysis. Synthetic fixture
//! families make every method testable without real model weights.

pub mod analysis;
pub mod container;
pub mod dtype;
pub mod error;
pub mod fixtures;
pub mod merge;
pub mod rng;
pub mod sa;
pub mod schema;

pub use container::{load_checkpoint, save_checkpoint, validate_compatibility, Checkpoint, CompatibilityReport, Tensor};
pub use dtype::{Dtype, OutDtype};
pub use error::{Error, Result};
pub use merge::TaskVector;
