//! Frozen-backbone inputs, model weights and their on-disk tensor format.

mod bundle;
mod store;
mod synth;
mod weights;

pub use bundle::{load_bundle, save_bundle, FeatureBundle, BACKBONE_STRIDE};
pub use store::{
    encode_f32_le, read_manifest, read_tensor_dir, sha256_hex, take, write_tensor_dir, Manifest, TensorEntry,
    FORMAT_TAG, FORMAT_VERSION, MANIFEST_FILE,
};
pub use synth::{synth_bundle, synth_vocabulary, SynthSpec};
pub use weights::{init_weights, ArchConfig, ModelWeights, DEFAULT_TAU};
