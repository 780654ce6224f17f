//! Forward-only open-vocabulary panoptic segmentation.
//!
//! The engine consumes precomputed backbone features (a spatial SAM-style
//! map, a spatial CLIP-style map and per-category text embeddings) and runs
//! the mask-generation and classification graph on top of them:
//!
//! * [`pyramid`] turns the single-stride backbone map into four scales,
//! * [`decoder`] refines object queries with masked cross-attention and
//!   emits mask logits plus an IoU estimate per query,
//! * [`ldp`] pools per-mask embeddings from both feature streams,
//! * [`inference`] classifies masks, ensembles the two class streams and
//!   fuses everything into a panoptic map,
//! * [`metrics`] scores panoptic maps (PQ/SQ/RQ and mIoU).
//!
//! Training-time losses with analytic gradients live in [`losses`], with the
//! assignment solver they rely on in [`matching`].

pub mod cluster;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod inference;
pub mod ldp;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod pyramid;

pub use error::{Error, Result};
pub use numerics::Tensor;
