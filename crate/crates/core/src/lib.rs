//! Kernel-based multilabel contrastive learning at desk scale.
//!
//! Each sample's features are mapped to a per-class mixture of isotropic (or
//! diagonal) exponential kernels. Training combines a mixture reconstruction
//! term, an asymmetric classification term and a contrastive term that pulls
//! same-class kernels of label-sharing samples together under a Bhattacharyya
//! similarity.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod data;
pub mod error;
pub mod grad;
pub mod kmm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod similarity;
pub mod trainer;
pub mod verify;

pub use error::{KmclError, Result};
