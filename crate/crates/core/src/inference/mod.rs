//! Open-vocabulary classification, score ensembling and panoptic fusion.

mod ensemble;
mod fusion;

pub use ensemble::{
    classify, ensemble, geometric_ensemble, mase, selective_entropy, ClassDistributions, FusedClassScores, SeConf,
    DEFAULT_ALPHA, DEFAULT_BETA, POW_FLOOR, SE_DENOM_EPS,
};
pub use fusion::{panoptic_fuse, semantic_project, FusionConfig, Upsample, VOID_CLASS};
