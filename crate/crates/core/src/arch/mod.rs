//! The three transformer variants and full-model assembly.
//!
//! Every variant shares one parameter naming scheme (`embed`,
//! `layers.{l}.attn.*`, `layers.{l}.mlp.*`, `head.*`) and one forward
//! path; the variant decides which normalizations, scales and residual
//! rule are applied.
//!
//! Assumptions not pinned down elsewhere:
//! - GPT+ applies rotary embeddings before QK normalization.
//! - nGPT renormalizes the embedding matrix after every step like any
//!   other constrained matrix.
//! - nGPT uses one channel scale shared by queries and keys.

mod checkpoint;
mod config;
mod model;
mod params;
mod subsume;

pub use checkpoint::{decode, encode, model_records, read_file, write_file, Checkpoint, MAGIC, VERSION};
pub use config::{
    AttentionFactorMode, FactorConfig, ModelConfig, NuPMode, PresetSize, Variant, NU_ACF_DEFAULT, PRESET_CONTEXT,
    PRESET_VOCAB,
};
pub use model::{constraint_norms, token_norms, BlockTrace, Forward, LayerTrace, Model, Param};
pub use params::{group_counts, param_count, param_specs, Constraint, Group, LayerIndex, ModelIndex, ParamSpec, Role};
pub use subsume::{InferenceLayer, InferenceModel};

pub(crate) use model::normalize_axis;
