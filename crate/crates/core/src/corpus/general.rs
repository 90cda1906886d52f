// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded samples from a general-text corpus.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::backend::{TokenId, TokenizerAdapter};
use crate::error::{Error, Result};

/// Token-length window for samples. Documents shorter than `min_tokens`
/// are skipped; longer ones are truncated to `max_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBounds {
    /// Minimum token count.
    pub min_tokens: usize,
    /// Maximum token count kept.
    pub max_tokens: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        Self {
            min_tokens: 8,
            max_tokens: 32,
        }
    }
}

/// One sampled prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneralTextSample {
    /// Source document id.
    pub source_id: String,
    /// Index of the document in the corpus stream.
    pub source_offset: usize,
    /// Token ids.
    pub tokens: Vec<TokenId>,
    /// Split tag.
    pub split: Split,
}

#[derive(Deserialize)]
struct Doc {
    id: String,
    text: String,
}

/// Draw `n` documents (one sample per document, so splits are disjoint by
/// source), shuffle with `seed`, and tag the last `round(n / 6)` as
/// validation (1,000 / 200 for n = 1,200).
pub fn sample_general_text(
    corpus_path: impl AsRef<Path>,
    n: usize,
    bounds: LengthBounds,
    seed: u64,
    tok: &dyn TokenizerAdapter,
) -> Result<Vec<GeneralTextSample>> {
    if bounds.min_tokens > bounds.max_tokens || bounds.max_tokens == 0 {
        return Err(Error::Dataset(format!("invalid length bounds {bounds:?}")));
    }
    let path = corpus_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut eligible = Vec::new();
    for (offset, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let doc: Doc = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("{}: document {offset}: {e}", path.display())))?;
        let mut tokens = tok.encode(&doc.text)?;
        if tokens.len() < bounds.min_tokens {
            continue;
        }
        tokens.truncate(bounds.max_tokens);
        eligible.push(GeneralTextSample {
            source_id: doc.id,
            source_offset: offset,
            tokens,
            split: Split::Train,
        });
    }
    if eligible.is_empty() {
        return Err(Error::Dataset(format!(
            "no document in {} satisfies {bounds:?}",
            path.display()
        )));
    }
    if eligible.len() < n {
        return Err(Error::Dataset(format!(
            "corpus has {} eligible documents, {n} requested",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n);
    let n_val = (n as f64 / 6.0).round() as usize;
    for s in eligible.iter_mut().skip(n - n_val) {
        s.split = Split::Validation;
    }
    Ok(eligible)
}
