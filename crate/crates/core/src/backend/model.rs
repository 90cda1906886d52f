// SPDX-License-Identifier: MIT OR Apache-2.0

//! The model handle: capture, patched forward passes, generation and
//! attention probabilities.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::arch::Architecture;
use super::generate::{CacheMode, DecodeParams, Generation, Sampler, StopCondition};
use super::hooks::{ActivationStore, PatchPlan, PatchScope, Provenance, ResolvedSite};
use super::spec::ModelSpec;
use super::tokenizer::{HfTokenizer, TokenId, TokenizerAdapter};
use super::toy::{self, ToyConfig};
use super::transformer::{Hooks, Transformer};
use super::weights::{resolve_model_dir, TensorMap};
use crate::error::{Error, Result};

/// Result of a single forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token logits at every position, `[T, |V|]`.
    pub logits: Array2<f32>,
    /// Requested activations.
    pub store: ActivationStore,
}

/// Post-softmax attention probabilities for a range of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    layers: BTreeMap<usize, Array3<f32>>,
}

impl AttentionWeights {
    /// Weight from `query` to `key` in `(layer, head)`.
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> Option<f32> {
        self.layers
            .get(&layer)
            .and_then(|a| a.get([head, query, key]).copied())
    }

    /// Full `[heads, query, key]` array for a layer.
    pub fn layer(&self, layer: usize) -> Option<&Array3<f32>> {
        self.layers.get(&layer)
    }

    /// Layers present.
    pub fn layer_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.keys().copied()
    }
}

/// A loaded model plus its tokenizer.
#[derive(Clone)]
pub struct Model {
    net: Arc<Transformer>,
    tokenizer: Arc<dyn TokenizerAdapter>,
    spec: ModelSpec,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).finish()
    }
}

/// Hash of a token sequence, used for provenance.
pub fn hash_tokens(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Load a model by id: a built-in toy model (`toy-qwen`, `toy-gemma`), a
/// local directory, or a Hugging Face hub-cache id.
pub fn load_model(model_id: &str) -> Result<Model> {
    if let Some(cfg) = ToyConfig::by_name(model_id) {
        return toy::build(&cfg);
    }
    Model::from_dir(model_id, resolve_model_dir(model_id)?)
}

fn eos_from(config: &Value) -> Option<TokenId> {
    match config.get("eos_token_id") {
        Some(Value::Number(n)) => n.as_u64().map(|v| v as TokenId),
        Some(Value::Array(a)) => a.first().and_then(Value::as_u64).map(|v| v as TokenId),
        _ => None,
    }
}

impl Model {
    /// Assemble from parts; detects comma–newline fusion from the tokenizer.
    pub fn new(net: Transformer, tokenizer: Arc<dyn TokenizerAdapter>) -> Result<Self> {
        let mut spec = net.arch().spec.clone();
        if tokenizer.vocab_size() > spec.vocab_size {
            tracing::warn!(
                tokenizer = tokenizer.vocab_size(),
                model = spec.vocab_size,
                "tokenizer can emit ids the model cannot embed"
            );
        }
        spec.fuses_comma_newline = Some(detect_fusion(tokenizer.as_ref())?);
        Ok(Self {
            net: Arc::new(net),
            tokenizer,
            spec,
        })
    }

    /// Load `config.json`, `*.safetensors` and `tokenizer.json` from a
    /// directory.
    pub fn from_dir(model_id: &str, dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_dir(model_id, dir.as_ref(), None)
    }

    /// Like [`from_dir`](Self::from_dir) but with an explicit tokenizer.
    pub fn from_dir_with_tokenizer(
        model_id: &str,
        dir: impl AsRef<Path>,
        tokenizer: Arc<dyn TokenizerAdapter>,
    ) -> Result<Self> {
        Self::load_dir(model_id, dir.as_ref(), Some(tokenizer))
    }

    fn load_dir(
        model_id: &str,
        dir: &Path,
        tokenizer: Option<Arc<dyn TokenizerAdapter>>,
    ) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: Value = serde_json::from_str(&text)?;
        let arch = Architecture::from_hf_config(model_id, &config)?;
        let net = Transformer::from_tensors(arch, TensorMap::load_dir(dir)?)?;
        let mut eos = eos_from(super::spec::text_config(&config)).or_else(|| eos_from(&config));
        if eos.is_none() {
            if let Ok(g) = std::fs::read_to_string(dir.join("generation_config.json")) {
                eos = serde_json::from_str::<Value>(&g).ok().and_then(|v| eos_from(&v));
            }
        }
        let tokenizer = match tokenizer {
            Some(t) => t,
            None => Arc::new(HfTokenizer::from_file(dir.join("tokenizer.json"), eos)?),
        };
        Self::new(net, tokenizer)
    }

    /// Model shape summary.
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Architecture details.
    pub fn arch(&self) -> &Architecture {
        self.net.arch()
    }

    /// The tokenizer.
    pub fn tokenizer(&self) -> &dyn TokenizerAdapter {
        self.tokenizer.as_ref()
    }

    /// Shared handle to the tokenizer.
    pub fn tokenizer_arc(&self) -> Arc<dyn TokenizerAdapter> {
        Arc::clone(&self.tokenizer)
    }

    /// Encode text.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        self.tokenizer.encode(text)
    }

    /// Decode ids.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.tokenizer.decode(ids)
    }

    fn check_sites(&self, sites: &[ResolvedSite], seq_len: usize) -> Result<()> {
        sites
            .iter()
            .try_for_each(|s| s.validate(&self.spec, Some(seq_len)))
    }

    /// One forward pass over `tokens` with an optional patch plan and a
    /// capture list. Every position counts as decode step 0 for the plan's
    /// scope. Site and width errors are raised before any computation.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        plan: Option<&PatchPlan>,
        capture: &[ResolvedSite],
    ) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::SiteRange("empty token sequence".into()));
        }
        self.check_sites(capture, tokens.len())?;
        let empty = PatchPlan::new();
        let plan = plan.unwrap_or(&empty);
        plan.validate(&self.spec)?;
        let mut hooks = Hooks::new(plan.entries(), &plan.scope, tokens.len(), capture);
        let mut cache = self.net.new_cache();
        let logits = self.net.forward(tokens, &mut cache, &mut hooks)?;
        let mut store = hooks.store;
        store.provenance = Provenance {
            prompt_hash: hash_tokens(tokens),
            decode_step: Some(0),
        };
        Ok(ForwardOutput { logits, store })
    }

    /// Capture activations at `sites` in one unpatched forward pass.
    pub fn capture(&self, tokens: &[TokenId], sites: &[ResolvedSite]) -> Result<ActivationStore> {
        Ok(self.forward(tokens, None, sites)?.store)
    }

    /// Logits at every position, optionally patched.
    pub fn logits(&self, tokens: &[TokenId], plan: Option<&PatchPlan>) -> Result<Array2<f32>> {
        Ok(self.forward(tokens, plan, &[])?.logits)
    }

    /// Post-softmax attention for layers in `layers`, `[head, query, key]`
    /// per layer; masked keys hold 0.
    pub fn attention_weights(
        &self,
        tokens: &[TokenId],
        layers: Range<usize>,
    ) -> Result<AttentionWeights> {
        if layers.start >= layers.end || layers.end > self.spec.n_layers {
            return Err(Error::SiteRange(format!(
                "layer range {layers:?} outside 0..{}",
                self.spec.n_layers
            )));
        }
        let scope = PatchScope::EveryStep;
        let mut hooks = Hooks::new(&[], &scope, tokens.len(), &[]);
        hooks.attention_layers = Some(layers);
        let mut cache = self.net.new_cache();
        self.net.forward(tokens, &mut cache, &mut hooks)?;
        Ok(AttentionWeights {
            layers: hooks.attention,
        })
    }

    /// Autoregressive sampling from `prompt`, applying `plan` to every
    /// position it targets (see [`PatchScope`]) and capturing `capture`.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        params: &DecodeParams,
        plan: Option<&PatchPlan>,
        capture: &[ResolvedSite],
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::SiteRange("empty prompt".into()));
        }
        params.validate()?;
        let empty = PatchPlan::new();
        let plan = plan.unwrap_or(&empty);
        plan.validate(&self.spec)?;
        let horizon = prompt.len() + params.max_new_tokens;
        for s in capture {
            s.validate(&self.spec, Some(horizon))?;
        }
        let mut sampler = Sampler::new(params);
        let mut seq = prompt.to_vec();
        let mut out = Generation {
            prompt: prompt.to_vec(),
            tokens: Vec::new(),
            text: String::new(),
            logprobs: Vec::new(),
            params: params.clone(),
            stopped: false,
            aborted: None,
            activations: None,
        };
        let mut hooks = Hooks::new(plan.entries(), &plan.scope, prompt.len(), capture);
        let mut cache = self.net.new_cache();
        let mut logits = self.net.forward(&seq, &mut cache, &mut hooks)?;
        let eos = self.tokenizer.eos_token();
        for step in 0..params.max_new_tokens {
            let last = logits.row(logits.nrows() - 1);
            let (tok, lp) = match sampler.sample(last.as_slice().expect("row-major")) {
                Ok(x) => x,
                Err(e) => {
                    out.aborted = Some(e.to_string());
                    break;
                }
            };
            seq.push(tok);
            out.tokens.push(tok);
            out.logprobs.push(lp);
            let is_eos = eos == Some(tok);
            let piece = self.tokenizer.token_text(tok)?;
            let stop = match params.stop {
                StopCondition::Newline => is_eos || piece.contains('\n'),
                StopCondition::Eos => is_eos,
                StopCondition::Never => false,
            };
            if stop {
                out.stopped = true;
                break;
            }
            if step + 1 == params.max_new_tokens {
                break;
            }
            logits = match params.cache {
                CacheMode::Incremental => self.net.forward(&[tok], &mut cache, &mut hooks)?,
                CacheMode::Recompute => {
                    self.net.truncate_cache(&mut cache, 0);
                    let full = self.net.forward(&seq, &mut cache, &mut hooks)?;
                    full.slice(ndarray::s![full.nrows() - 1.., ..]).to_owned()
                }
            };
        }
        out.text = self.tokenizer.decode(&out.tokens)?;
        if !capture.is_empty() {
            let mut store = hooks.store;
            store.provenance = Provenance {
                prompt_hash: hash_tokens(prompt),
                decode_step: Some(out.tokens.len()),
            };
            out.activations = Some(store);
        }
        Ok(out)
    }
}

fn detect_fusion(tok: &dyn TokenizerAdapter) -> Result<bool> {
    let ids = tok.encode("night,\nand")?;
    for id in ids {
        let text = tok.token_text(id)?;
        if text.contains(',') && text.contains('\n') {
            return Ok(true);
        }
    }
    Ok(false)
}
