// SPDX-License-Identifier: MIT OR Apache-2.0

//! Transformer runtime with named hook sites for capture and intervention.
//!
//! Supported families: Llama, Qwen2, Qwen3, Gemma 3 (text) and GPT-2, loaded
//! from Hugging Face `config.json` + safetensors, plus seeded toy models.
//! Head slices refer to query heads; under grouped-query attention several
//! query heads share one key/value head, and patching a head slice only
//! changes that query head's output.

mod arch;
mod generate;
mod hooks;
mod model;
mod spec;
mod tokenizer;
mod toy;
mod transformer;
mod weights;

pub use arch::{Activation, Architecture, Positional, Rope};
pub use generate::{CacheMode, DecodeParams, Generation, StopCondition};
pub use hooks::{
    ActivationStore, Component, HookSite, PatchEntry, PatchOp, PatchPlan, PatchScope, Position,
    Provenance, ResolvedSite,
};
pub use model::{hash_tokens, load_model, AttentionWeights, ForwardOutput, Model};
pub use spec::{ArchitectureFamily, ModelSpec};
pub use tokenizer::{HfTokenizer, TokenId, TokenizerAdapter, WordTokenizer};
pub use toy::ToyConfig;
pub use transformer::{KvCache, Transformer};
pub use weights::{resolve_model_dir, TensorMap};

/// Build a toy model from an explicit configuration.
pub fn build_toy(cfg: &ToyConfig) -> crate::error::Result<Model> {
    toy::build(cfg)
}
