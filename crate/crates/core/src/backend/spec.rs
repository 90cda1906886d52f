// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model introspection: architecture families and [`ModelSpec`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Architecture families with a hook layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureFamily {
    /// Llama / Mistral: pre-norm RMSNorm, gated SiLU MLP, RoPE.
    Llama,
    /// Qwen2: Llama layout with q/k/v projection biases.
    Qwen2,
    /// Qwen3: Llama layout with per-head RMSNorm on queries and keys.
    Qwen3,
    /// Gemma 3 text decoder: sandwich norms, GELU MLP, local/global layers.
    Gemma3,
    /// GPT-2: LayerNorm, learned positions, fused qkv projection.
    Gpt2,
}

impl ArchitectureFamily {
    /// Every supported family.
    pub const ALL: [Self; 5] = [Self::Llama, Self::Qwen2, Self::Qwen3, Self::Gemma3, Self::Gpt2];

    /// Map a Hugging Face `model_type` to a family.
    pub fn from_model_type(model_type: &str) -> Result<Self> {
        match model_type {
            "llama" | "mistral" => Ok(Self::Llama),
            "qwen2" => Ok(Self::Qwen2),
            "qwen3" => Ok(Self::Qwen3),
            "gemma3" | "gemma3_text" => Ok(Self::Gemma3),
            "gpt2" => Ok(Self::Gpt2),
            other => Err(Error::UnsupportedArchitecture {
                family: other.to_string(),
                known: Self::known_layouts(),
            }),
        }
    }

    /// Human-readable list of hook layouts, for error messages.
    pub fn known_layouts() -> String {
        Self::ALL
            .iter()
            .map(|f| format!("{f} ({})", f.layout()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// One-line description of where the hook sites sit.
    pub fn layout(&self) -> &'static str {
        match self {
            Self::Llama | Self::Qwen2 | Self::Qwen3 => {
                "resid_post after mlp add; head = q-head slice before o_proj; GQA shares k/v"
            }
            Self::Gemma3 => {
                "resid_post after mlp add; attn_out/mlp_out after their post-norms; head = q-head slice before o_proj"
            }
            Self::Gpt2 => "resid_post after mlp add; head = slice before c_proj",
        }
    }
}

impl fmt::Display for ArchitectureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Llama => "llama",
            Self::Qwen2 => "qwen2",
            Self::Qwen3 => "qwen3",
            Self::Gemma3 => "gemma3",
            Self::Gpt2 => "gpt2",
        })
    }
}

/// Static description of a loaded (or introspected) model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Identifier the model was loaded under.
    pub model_id: String,
    /// Architecture family.
    pub family: ArchitectureFamily,
    /// Number of transformer blocks, L.
    pub n_layers: usize,
    /// Residual width, d.
    pub hidden_size: usize,
    /// Vocabulary size, |V|.
    pub vocab_size: usize,
    /// Query heads per layer.
    pub n_heads: usize,
    /// Key/value heads per layer.
    pub n_kv_heads: usize,
    /// Width of one head.
    pub head_dim: usize,
    /// MLP hidden width.
    pub intermediate_size: usize,
    /// Whether the tokenizer emits `,\n` as one token, when known.
    #[serde(default)]
    pub fuses_comma_newline: Option<bool>,
}

impl ModelSpec {
    /// Width of the concatenated head outputs.
    pub fn attention_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Total number of query heads.
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("vocab_size", self.vocab_size),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.n_kv_heads > 0 && self.n_heads % self.n_kv_heads != 0 {
            bad.push(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_heads, self.n_kv_heads
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ModelLoad(format!("{}: {}", self.model_id, bad.join("; "))))
        }
    }

    /// Introspect a Hugging Face `config.json` value. Multimodal wrappers
    /// are unwrapped to their `text_config`.
    pub fn from_hf_config(model_id: &str, config: &Value) -> Result<Self> {
        let cfg = text_config(config);
        let model_type = cfg
            .get("model_type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::ModelLoad(format!("{model_id}: config has no model_type")))?;
        let family = ArchitectureFamily::from_model_type(model_type)?;
        let spec = if family == ArchitectureFamily::Gpt2 {
            let d = req(cfg, "n_embd", model_id)?;
            let heads = req(cfg, "n_head", model_id)?;
            Self {
                model_id: model_id.to_string(),
                family,
                n_layers: req(cfg, "n_layer", model_id)?,
                hidden_size: d,
                vocab_size: req(cfg, "vocab_size", model_id)?,
                n_heads: heads,
                n_kv_heads: heads,
                head_dim: d / heads.max(1),
                intermediate_size: opt(cfg, "n_inner").unwrap_or(4 * d),
                fuses_comma_newline: None,
            }
        } else {
            let d = req(cfg, "hidden_size", model_id)?;
            let heads = req(cfg, "num_attention_heads", model_id)?;
            let head_dim = opt(cfg, "head_dim").unwrap_or(d / heads.max(1));
            let default_vocab = match family {
                ArchitectureFamily::Gemma3 => Some(262_208),
                _ => None,
            };
            Self {
                model_id: model_id.to_string(),
                family,
                n_layers: req(cfg, "num_hidden_layers", model_id)?,
                hidden_size: d,
                vocab_size: opt(cfg, "vocab_size")
                    .or(default_vocab)
                    .ok_or_else(|| missing("vocab_size", model_id))?,
                n_heads: heads,
                n_kv_heads: opt(cfg, "num_key_value_heads").unwrap_or(heads),
                head_dim,
                intermediate_size: req(cfg, "intermediate_size", model_id)?,
                fuses_comma_newline: None,
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Introspect a `config.json` file (or a directory containing one).
    pub fn from_config_path(model_id: &str, path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push("config.json");
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_hf_config(model_id, &serde_json::from_str(&text)?)
    }
}

pub(crate) fn text_config(config: &Value) -> &Value {
    match config.get("text_config") {
        Some(t) if t.is_object() => t,
        _ => config,
    }
}

fn missing(key: &str, model_id: &str) -> Error {
    Error::ModelLoad(format!("{model_id}: config lacks {key}"))
}

fn opt(cfg: &Value, key: &str) -> Option<usize> {
    cfg.get(key).and_then(Value::as_u64).map(|v| v as usize)
}

fn req(cfg: &Value, key: &str, model_id: &str) -> Result<usize> {
    opt(cfg, key).ok_or_else(|| missing(key, model_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn unknown_family_lists_layouts() {
        let err = ModelSpec::from_hf_config("x", &json!({"model_type": "t5"})).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("t5") && msg.contains("gemma3") && msg.contains("gpt2"));
    }

    #[test]
    fn multimodal_wrapper_is_unwrapped() {
        let cfg = json!({
            "model_type": "gemma3",
            "text_config": {
                "model_type": "gemma3_text", "hidden_size": 64, "num_hidden_layers": 2,
                "num_attention_heads": 4, "num_key_value_heads": 2, "head_dim": 16,
                "intermediate_size": 128
            }
        });
        let spec = ModelSpec::from_hf_config("g", &cfg).unwrap();
        assert_eq!(spec.family, ArchitectureFamily::Gemma3);
        assert_eq!(spec.vocab_size, 262_208);
        assert_eq!(spec.attention_width(), 64);
    }

    #[test]
    fn zero_layers_rejected() {
        let cfg = json!({
            "model_type": "llama", "hidden_size": 8, "num_hidden_layers": 0,
            "num_attention_heads": 2, "intermediate_size": 16, "vocab_size": 10
        });
        assert!(ModelSpec::from_hf_config("z", &cfg).is_err());
    }
}
