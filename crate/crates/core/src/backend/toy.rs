// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random-weight models with word-level tokenizers.
//!
//! `toy-qwen` follows the Qwen3 layout with a tokenizer that fuses `,\n`;
//! `toy-gemma` follows the Gemma 3 layout (sandwich norms, local/global
//! layers) with `,` and `\n` as separate tokens. Both load through the same
//! tensor-name path as real checkpoints.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::arch::Architecture;
use super::model::Model;
use super::spec::ArchitectureFamily;
use super::tokenizer::{TokenizerAdapter, WordTokenizer};
use super::transformer::Transformer;
use super::weights::TensorMap;
use crate::error::{Error, Result};

const TOY_VOCAB: &str = include_str!("../../data/toy_vocab.txt");
const EXTRA_WORDS: [&str; 4] = ["appear", "rhyming", "couplet", "Pair"];

/// Shape and seed of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Model id.
    pub name: String,
    /// `qwen3` or `gemma3`.
    pub family: ArchitectureFamily,
    /// Blocks.
    pub n_layers: usize,
    /// Residual width.
    pub hidden_size: usize,
    /// Query heads.
    pub n_heads: usize,
    /// Key/value heads.
    pub n_kv_heads: usize,
    /// Head width.
    pub head_dim: usize,
    /// MLP width.
    pub intermediate_size: usize,
    /// Weight seed.
    pub seed: u64,
    /// Emit `,\n` as one token.
    pub fuse_comma_newline: bool,
    /// Logit bias on newline-bearing tokens.
    pub newline_bias: f32,
    /// Logit bias on tokens that are neither spaced words nor newlines.
    pub other_bias: f32,
}

impl ToyConfig {
    /// Built-in configurations by id.
    pub fn by_name(name: &str) -> Option<Self> {
        let base = Self {
            name: name.to_string(),
            family: ArchitectureFamily::Qwen3,
            n_layers: 6,
            hidden_size: 64,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            intermediate_size: 128,
            seed: 1,
            fuse_comma_newline: true,
            newline_bias: 3.5,
            other_bias: -6.0,
        };
        match name {
            "toy-qwen" => Some(base),
            "toy-gemma" => Some(Self {
                family: ArchitectureFamily::Gemma3,
                n_layers: 8,
                seed: 2,
                fuse_comma_newline: false,
                newline_bias: 4.5,
                ..base
            }),
            _ => None,
        }
    }

    /// Word list behind the tokenizer.
    pub fn words() -> Vec<&'static str> {
        TOY_VOCAB
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .chain(EXTRA_WORDS)
            .collect()
    }
}

/// Build the model described by `cfg`.
pub fn build(cfg: &ToyConfig) -> Result<Model> {
    let tok = WordTokenizer::new(ToyConfig::words(), cfg.fuse_comma_newline);
    let vocab = tok.vocab_size();
    let gemma = match cfg.family {
        ArchitectureFamily::Gemma3 => true,
        ArchitectureFamily::Qwen3 => false,
        other => {
            return Err(Error::UnsupportedArchitecture {
                family: format!("toy {other}"),
                known: "qwen3, gemma3".into(),
            })
        }
    };
    let mut config = json!({
        "model_type": if gemma { "gemma3_text" } else { "qwen3" },
        "hidden_size": cfg.hidden_size,
        "num_hidden_layers": cfg.n_layers,
        "num_attention_heads": cfg.n_heads,
        "num_key_value_heads": cfg.n_kv_heads,
        "head_dim": cfg.head_dim,
        "intermediate_size": cfg.intermediate_size,
        "vocab_size": vocab,
        "max_position_embeddings": 512,
        "rms_norm_eps": 1e-6,
        "tie_word_embeddings": false,
    });
    if gemma {
        config["sliding_window"] = json!(8);
        config["sliding_window_pattern"] = json!(4);
        config["query_pre_attn_scalar"] = json!(cfg.head_dim);
        config["rope_theta"] = json!(1_000_000.0);
        config["rope_local_base_freq"] = json!(10_000.0);
    }
    let arch = Architecture::from_hf_config(&cfg.name, &config)?;
    let tensors = random_tensors(cfg, vocab, gemma, &tok);
    let net = Transformer::from_tensors(arch, tensors)?;
    Model::new(net, Arc::new(tok))
}

fn random_tensors(cfg: &ToyConfig, vocab: usize, gemma: bool, tok: &WordTokenizer) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden_size;
    let mut t = TensorMap::new();
    let mut gauss = |shape: &[usize], std: f32| -> ArrayD<f32> {
        let n = Normal::new(0.0f32, std).expect("valid std");
        let len = shape.iter().product();
        let v: Vec<f32> = (0..len).map(|_| n.sample(&mut rng)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape matches")
    };
    // Stored norm weights: Gemma folds (1 + w) at load, Qwen uses w directly.
    let norm_centre = if gemma { 0.0 } else { 1.0 };
    let norm = |g: &mut dyn FnMut(&[usize], f32) -> ArrayD<f32>, n: usize| {
        g(&[n], 0.1).mapv(|x| x + norm_centre)
    };
    let qd = cfg.n_heads * cfg.head_dim;
    let kvd = cfg.n_kv_heads * cfg.head_dim;
    let inv = |n: usize| 1.0 / (n as f32).sqrt();
    let depth = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
    // Gemma multiplies embeddings by sqrt(d) at lookup.
    let embed_std = if gemma { inv(d) } else { 1.0 };
    t.insert("model.embed_tokens.weight", gauss(&[vocab, d], embed_std));
    for i in 0..cfg.n_layers {
        let p = format!("model.layers.{i}");
        let a = format!("{p}.self_attn");
        t.insert(format!("{p}.input_layernorm.weight"), norm(&mut gauss, d));
        t.insert(format!("{a}.q_proj.weight"), gauss(&[qd, d], inv(d)));
        t.insert(format!("{a}.k_proj.weight"), gauss(&[kvd, d], inv(d)));
        t.insert(format!("{a}.v_proj.weight"), gauss(&[kvd, d], inv(d)));
        t.insert(format!("{a}.o_proj.weight"), gauss(&[d, qd], inv(qd) * depth * 4.0));
        t.insert(format!("{a}.q_norm.weight"), norm(&mut gauss, cfg.head_dim));
        t.insert(format!("{a}.k_norm.weight"), norm(&mut gauss, cfg.head_dim));
        if gemma {
            t.insert(format!("{p}.post_attention_layernorm.weight"), norm(&mut gauss, d));
            t.insert(format!("{p}.pre_feedforward_layernorm.weight"), norm(&mut gauss, d));
            t.insert(format!("{p}.post_feedforward_layernorm.weight"), norm(&mut gauss, d));
        } else {
            t.insert(format!("{p}.post_attention_layernorm.weight"), norm(&mut gauss, d));
        }
        let m = cfg.intermediate_size;
        t.insert(format!("{p}.mlp.gate_proj.weight"), gauss(&[m, d], inv(d)));
        t.insert(format!("{p}.mlp.up_proj.weight"), gauss(&[m, d], inv(d)));
        t.insert(format!("{p}.mlp.down_proj.weight"), gauss(&[d, m], inv(m) * depth * 4.0));
    }
    t.insert("model.norm.weight", norm(&mut gauss, d));
    t.insert("lm_head.weight", gauss(&[vocab, d], 2.0 * inv(d)));
    let bias: Vec<f32> = (0..vocab as u32)
        .map(|id| {
            let piece = tok.token_text(id).unwrap_or_default();
            if piece.contains('\n') {
                cfg.newline_bias
            } else if piece.len() > 2
                && piece.starts_with(' ')
                && piece[1..].chars().all(|c| c.is_ascii_alphabetic())
            {
                0.0
            } else {
                cfg.other_bias
            }
        })
        .collect();
    t.insert("lm_head_bias", ArrayD::from_shape_vec(IxDyn(&[vocab]), bias).expect("1-d"));
    t
}
