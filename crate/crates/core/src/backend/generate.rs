// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode parameters, sampling and generation records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hooks::ActivationStore;
use super::tokenizer::TokenId;
use crate::error::{Error, Result};

/// When generation stops before the token budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    /// After the first token whose text contains a newline (or EOS).
    #[default]
    Newline,
    /// Only at EOS.
    Eos,
    /// Never; always emit `max_new_tokens`.
    Never,
}

/// How prompt positions are made visible to later steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Keys/values of patched positions are cached once and reused.
    #[default]
    Incremental,
    /// The whole sequence is recomputed (and re-patched) at every step.
    Recompute,
}

/// Sampling configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    /// Softmax temperature; 0 selects greedy decoding.
    pub temperature: f64,
    /// Nucleus mass.
    pub top_p: f64,
    /// RNG seed.
    pub seed: u64,
    /// Token budget.
    pub max_new_tokens: usize,
    /// Stop rule.
    pub stop: StopCondition,
    /// Cache strategy.
    pub cache: CacheMode,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            seed: 0,
            max_new_tokens: 20,
            stop: StopCondition::Newline,
            cache: CacheMode::Incremental,
        }
    }
}

impl DecodeParams {
    /// Greedy decoding with the given budget and stop rule.
    pub fn greedy(max_new_tokens: usize, stop: StopCondition) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens,
            stop,
            ..Self::default()
        }
    }

    /// Same parameters with a different seed.
    #[must_use]
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Reject impossible settings.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Intervention(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Intervention(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// One sampled continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Prompt token ids.
    pub prompt: Vec<TokenId>,
    /// Generated token ids.
    pub tokens: Vec<TokenId>,
    /// Decoded continuation.
    pub text: String,
    /// Log-probability of each chosen token under the model.
    pub logprobs: Vec<f64>,
    /// Parameters used.
    pub params: DecodeParams,
    /// Whether the stop condition fired.
    pub stopped: bool,
    /// Why the sample was abandoned, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    /// Captured activations, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<ActivationStore>,
}

impl Generation {
    /// Continuation text up to (not including) the first newline.
    pub fn line(&self) -> &str {
        self.text.split('\n').next().unwrap_or("")
    }
}

/// Token sampler owning the RNG stream for one generation.
#[derive(Debug)]
pub(crate) struct Sampler {
    rng: ChaCha8Rng,
    temperature: f64,
    top_p: f64,
}

impl Sampler {
    pub fn new(p: &DecodeParams) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(p.seed),
            temperature: p.temperature,
            top_p: p.top_p,
        }
    }

    /// Choose a token; returns `(token, log-prob under the raw logits)`.
    pub fn sample(&mut self, logits: &[f32]) -> Result<(TokenId, f64)> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Intervention("non-finite logits".into()));
        }
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let log_z = max
            + logits
                .iter()
                .map(|&x| (x as f64 - max).exp())
                .sum::<f64>()
                .ln();
        let chosen = if self.temperature == 0.0 {
            argmax(logits)
        } else {
            let t = self.temperature;
            let mut probs: Vec<(usize, f64)> = logits
                .iter()
                .enumerate()
                .map(|(i, &x)| (i, ((x as f64 - max) / t).exp()))
                .collect();
            let total: f64 = probs.iter().map(|p| p.1).sum();
            probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut kept = 0;
            let mut mass = 0.0;
            for (_, p) in &probs {
                mass += p / total;
                kept += 1;
                if mass >= self.top_p {
                    break;
                }
            }
            let probs = &probs[..kept];
            let kept_total: f64 = probs.iter().map(|p| p.1).sum();
            let mut u = self.rng.random::<f64>() * kept_total;
            let mut pick = probs[kept - 1].0;
            for &(i, p) in probs {
                if u < p {
                    pick = i;
                    break;
                }
                u -= p;
            }
            pick
        };
        Ok((chosen as TokenId, logits[chosen] as f64 - log_z))
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
