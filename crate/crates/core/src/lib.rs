//! Self-supervised dense pixel embeddings that act both as instance-level
//! descriptors and as category-level landmarks.
//!
//! Embeddings are learned from image pairs related by a known correspondence
//! (a synthetic warp or ground-truth flow) by matching every source pixel
//! against the target with a softmax over inner products. Descriptor vector
//! exchange reconstructs each source vector from an auxiliary set of images
//! before matching, which forces vectors to stay compatible across object
//! instances.
//!
//! Modules:
//! - [`warp`]: random TPS warps and correspondence fields.
//! - [`nn`] and [`embedder`]: the dense embedding networks.
//! - [`dve`]: matching probabilities, correspondence loss and exchange.
//! - [`trainer`]: Siamese training and unsupervised finetuning.
//! - [`datasets`]: face benchmark loaders and the synthetic articulated arm.
//! - [`evalkit`]: matching benchmark, landmark regression and IOD error.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod dve;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod linalg;
pub mod nn;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
