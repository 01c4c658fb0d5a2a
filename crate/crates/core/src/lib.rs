//! Recursive semantics-guided vessel segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]), the
//! segmentation network built on it ([`model`]), the recursive refinement
//! trainer ([`trainer`]), segmentation and topology metrics ([`metrics`],
//! [`connectivity`]) and dataset plumbing ([`dataset`]).

pub mod autodiff;
pub mod checkpoint;
pub mod connectivity;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use maps::{BinaryMask, ProbMap};
pub use model::{ArchConfig, RsgnParams};
pub use tensor::Tensor;
pub use trainer::{TileConfig, TrainConfig};
