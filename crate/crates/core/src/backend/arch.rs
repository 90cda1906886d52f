// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerical architecture details parsed from Hugging Face configs.

use serde_json::Value;

use super::spec::{text_config, ArchitectureFamily, ModelSpec};
use crate::error::{Error, Result};

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// x * sigmoid(x).
    Silu,
    /// Tanh approximation of GELU.
    GeluTanh,
}

impl Activation {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "silu" | "swish" => Ok(Self::Silu),
            "gelu_pytorch_tanh" | "gelu_new" | "gelu_tanh" => Ok(Self::GeluTanh),
            other => Err(Error::ModelLoad(format!("unsupported activation {other:?}"))),
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f32) -> f32 {
        match self {
            Self::Silu => x / (1.0 + (-x).exp()),
            Self::GeluTanh => {
                const C: f32 = 0.797_884_6;
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

/// Rotary embedding frequencies for one layer type.
#[derive(Debug, Clone, PartialEq)]
pub struct Rope {
    /// Inverse frequencies, one per rotated pair.
    pub inv_freq: Vec<f32>,
}

impl Rope {
    /// Plain RoPE with base `theta` over `dim` rotated dimensions.
    pub fn new(theta: f64, dim: usize) -> Self {
        let inv_freq = (0..dim / 2)
            .map(|i| (1.0 / theta.powf((2 * i) as f64 / dim as f64)) as f32)
            .collect();
        Self { inv_freq }
    }

    fn from_params(p: &Value, dim: usize, default_theta: f64) -> Result<Self> {
        let theta = p
            .get("rope_theta")
            .and_then(Value::as_f64)
            .unwrap_or(default_theta);
        let mut rope = Self::new(theta, dim);
        let kind = p
            .get("rope_type")
            .or_else(|| p.get("type"))
            .and_then(Value::as_str)
            .unwrap_or("default");
        let f = |k: &str| p.get(k).and_then(Value::as_f64);
        match kind {
            "default" => {}
            "linear" => {
                let factor = f("factor").unwrap_or(1.0) as f32;
                rope.inv_freq.iter_mut().for_each(|x| *x /= factor);
            }
            "llama3" => {
                let factor = f("factor").unwrap_or(8.0);
                let low = f("low_freq_factor").unwrap_or(1.0);
                let high = f("high_freq_factor").unwrap_or(4.0);
                let old_ctx = f("original_max_position_embeddings").unwrap_or(8192.0);
                let low_wavelen = old_ctx / low;
                let high_wavelen = old_ctx / high;
                for x in rope.inv_freq.iter_mut() {
                    let inv = f64::from(*x);
                    let wavelen = 2.0 * std::f64::consts::PI / inv;
                    let scaled = if wavelen > low_wavelen { inv / factor } else { inv };
                    let medium = !(wavelen < high_wavelen) && !(wavelen > low_wavelen);
                    let out = if medium {
                        let smooth = (old_ctx / wavelen - low) / (high - low);
                        (1.0 - smooth) * scaled / factor + smooth * scaled
                    } else {
                        scaled
                    };
                    *x = out as f32;
                }
            }
            other => {
                return Err(Error::ModelLoad(format!(
                    "unsupported rope scaling type {other:?}"
                )))
            }
        }
        Ok(rope)
    }
}

/// Positional scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum Positional {
    /// Rotary embeddings, per layer.
    Rotary(Vec<Rope>),
    /// Learned absolute position embeddings.
    Learned,
}

/// Everything the forward pass needs beyond the weights themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    /// Public shape summary.
    pub spec: ModelSpec,
    /// MLP activation.
    pub activation: Activation,
    /// Normalization epsilon.
    pub norm_eps: f32,
    /// LayerNorm (GPT-2) rather than RMSNorm.
    pub layer_norm: bool,
    /// Gemma-style `(1 + w)` RMSNorm weights.
    pub norm_unit_offset: bool,
    /// Attention score scale.
    pub attn_scale: f32,
    /// Multiplier applied to token embeddings.
    pub embed_scale: f32,
    /// Sliding-window width per layer (`None` = full causal attention).
    pub windows: Vec<Option<usize>>,
    /// Positional scheme.
    pub positional: Positional,
    /// Maximum sequence length.
    pub max_positions: usize,
    /// Whether the unembedding reuses the token embedding.
    pub tied_embeddings: bool,
    /// Optional tanh soft-cap on final logits.
    pub final_softcap: Option<f32>,
}

impl Architecture {
    /// Parse a config.json value.
    pub fn from_hf_config(model_id: &str, config: &Value) -> Result<Self> {
        let spec = ModelSpec::from_hf_config(model_id, config)?;
        let cfg = text_config(config);
        let get_f = |k: &str| cfg.get(k).and_then(Value::as_f64);
        let get_s = |k: &str| cfg.get(k).and_then(Value::as_str);
        let family = spec.family;
        let hd = spec.head_dim;
        let n = spec.n_layers;
        let tied = cfg
            .get("tie_word_embeddings")
            .and_then(Value::as_bool)
            .unwrap_or(matches!(family, ArchitectureFamily::Gemma3 | ArchitectureFamily::Gpt2));
        let max_positions = cfg
            .get("max_position_embeddings")
            .or_else(|| cfg.get("n_positions"))
            .and_then(Value::as_u64)
            .unwrap_or(4096) as usize;
        let final_softcap = get_f("final_logit_softcapping").map(|x| x as f32);

        if family == ArchitectureFamily::Gpt2 {
            return Ok(Self {
                activation: Activation::parse(get_s("activation_function").unwrap_or("gelu_new"))?,
                norm_eps: get_f("layer_norm_epsilon").unwrap_or(1e-5) as f32,
                layer_norm: true,
                norm_unit_offset: false,
                attn_scale: (hd as f32).powf(-0.5),
                embed_scale: 1.0,
                windows: vec![None; n],
                positional: Positional::Learned,
                max_positions,
                tied_embeddings: tied,
                final_softcap,
                spec,
            });
        }

        let layer_types: Vec<String> = match cfg.get("layer_types").and_then(Value::as_array) {
            Some(a) => a
                .iter()
                .map(|v| v.as_str().unwrap_or("full_attention").to_string())
                .collect(),
            None if family == ArchitectureFamily::Gemma3 => {
                let pattern = cfg
                    .get("sliding_window_pattern")
                    .or_else(|| cfg.get("_sliding_window_pattern"))
                    .and_then(Value::as_u64)
                    .unwrap_or(6) as usize;
                (0..n)
                    .map(|i| {
                        if (i + 1) % pattern == 0 {
                            "full_attention".to_string()
                        } else {
                            "sliding_attention".to_string()
                        }
                    })
                    .collect()
            }
            None => vec!["full_attention".to_string(); n],
        };
        if layer_types.len() != n {
            return Err(Error::ModelLoad(format!(
                "{model_id}: {} layer types for {n} layers",
                layer_types.len()
            )));
        }
        let sliding_enabled = match family {
            ArchitectureFamily::Gemma3 => true,
            _ => cfg
                .get("use_sliding_window")
                .and_then(Value::as_bool)
                .unwrap_or(false),
        };
        let window = cfg.get("sliding_window").and_then(Value::as_u64).map(|w| w as usize);
        let windows = layer_types
            .iter()
            .map(|t| {
                if sliding_enabled && t == "sliding_attention" {
                    window
                } else {
                    None
                }
            })
            .collect();

        let default_theta = get_f("rope_theta").unwrap_or(10_000.0);
        let ropes = layer_types
            .iter()
            .map(|t| rope_for_layer(cfg, family, t, hd, default_theta))
            .collect::<Result<Vec<_>>>()?;

        let (activation, unit_offset, attn_scale, embed_scale) = match family {
            ArchitectureFamily::Gemma3 => (
                Activation::parse(
                    get_s("hidden_activation")
                        .or_else(|| get_s("hidden_act"))
                        .unwrap_or("gelu_pytorch_tanh"),
                )?,
                true,
                get_f("query_pre_attn_scalar").unwrap_or(hd as f64).powf(-0.5) as f32,
                (spec.hidden_size as f32).sqrt(),
            ),
            _ => (
                Activation::parse(get_s("hidden_act").unwrap_or("silu"))?,
                false,
                (hd as f32).powf(-0.5),
                1.0,
            ),
        };
        Ok(Self {
            activation,
            norm_eps: get_f("rms_norm_eps").unwrap_or(1e-6) as f32,
            layer_norm: false,
            norm_unit_offset: unit_offset,
            attn_scale,
            embed_scale,
            windows,
            positional: Positional::Rotary(ropes),
            max_positions,
            tied_embeddings: tied,
            final_softcap,
            spec,
        })
    }
}

fn rope_for_layer(
    cfg: &Value,
    family: ArchitectureFamily,
    layer_type: &str,
    dim: usize,
    default_theta: f64,
) -> Result<Rope> {
    if let Some(params) = cfg.get("rope_parameters").filter(|v| v.is_object()) {
        // Per-layer-type dictionaries, or a single shared dictionary.
        let p = params.get(layer_type).unwrap_or(params);
        return Rope::from_params(p, dim, default_theta);
    }
    if family == ArchitectureFamily::Gemma3 && layer_type == "sliding_attention" {
        let theta = cfg
            .get("rope_local_base_freq")
            .and_then(Value::as_f64)
            .unwrap_or(10_000.0);
        return Ok(Rope::new(theta, dim));
    }
    match cfg.get("rope_scaling").filter(|v| v.is_object()) {
        Some(scaling) => {
            let mut p = scaling.clone();
            p["rope_theta"] = Value::from(default_theta);
            Rope::from_params(&p, dim, default_theta)
        }
        None => Ok(Rope::new(default_theta, dim)),
    }
}
