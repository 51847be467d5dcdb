//! Local–higher-order graph neural network (LHGNN) for audio classification
//! and tagging.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`params`], [`tape`]: dense arrays, named parameter storage and
//!   reverse-mode differentiation (32-bit for training, 64-bit for gradient checks).
//! - [`audio`]: WAV ingestion, log-mel features, feature cache and manifests.
//! - [`knn`] and [`clustering`]: per-sample k-nearest-neighbor sets and
//!   Fuzzy C-Means / k-means higher-order sets.
//! - [`lhg`]: the local–higher-order graph convolution.
//! - [`model`]: stem, LHG stages, ConvFFN, downsampling, head, checkpoints.
//! - [`train`]: AdamW, augmentation, losses, metrics, checkpoint averaging,
//!   the training loop and gradient checking.

pub mod audio;
pub mod clustering;
pub mod error;
mod kernels;
pub mod knn;
pub mod lhg;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use clustering::{ClusterState, ClusteringMethod, HigherOrderSet};
pub use error::{Error, Result};
pub use knn::NeighborSet;
pub use lhg::{KernelVariant, LhgConvParams};
pub use model::{Lhgnn, ModelConfig};
pub use params::{GradRecord, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
