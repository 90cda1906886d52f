// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes decoding future tokens from hidden states.
//!
//! Two dataset kinds are built from model completions: look-ahead datasets
//! over general text (the token generated `k` steps after each position)
//! and couplet datasets (the first token of the generated second line's
//! final word, read at structural positions of the prompt).

mod eval;
mod probe;

pub use eval::{
    evaluate_probe, newline_gap, unigram_eval, EvalOptions, GapMetric, GridEntry, NewlineGap,
    ProbeEval, RhymeReference, UnigramBaseline,
};
pub use probe::{train_probe, LinearProbe, ProbeHyperparams, ProbeMeta};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{
    Component, DecodeParams, Model, Position, ResolvedSite, StopCondition, TokenId,
};
use crate::corpus::{
    resolve_positions, truncation_prompt, Couplet, GeneralTextSample, PositionMap, Split,
};
use crate::error::{Error, Result};
use crate::phonology::{final_word, normalize_word};

/// Which probe a dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeCell {
    /// Predict the token generated `k` positions ahead, reading layer `layer`.
    Lookahead {
        /// Block index.
        layer: usize,
        /// Look-ahead distance.
        k: usize,
    },
    /// Predict the generated second-line rhyme token from a prompt position.
    Couplet {
        /// Block index.
        layer: usize,
        /// Prompt position.
        position: Position,
    },
}

impl ProbeCell {
    /// Block index read by the probe.
    pub fn layer(&self) -> usize {
        match *self {
            Self::Lookahead { layer, .. } | Self::Couplet { layer, .. } => layer,
        }
    }
}

impl fmt::Display for ProbeCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Lookahead { layer, k } => write!(f, "L{layer}/k={k}"),
            Self::Couplet { layer, position } => write!(f, "L{layer}/i={position}"),
        }
    }
}

/// Bookkeeping carried by each example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    /// Source record id (document or couplet).
    pub source_id: String,
    /// Position relative to the prompt newline (couplets) or within the
    /// full sequence (look-ahead).
    pub position: i64,
    /// First-line rhyme word, for couplet examples.
    pub rhyme_word: Option<String>,
    /// Word the label token starts, for couplet examples.
    pub label_word: Option<String>,
}

/// One (hidden vector, label) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    /// Residual-stream vector.
    pub hidden: Vec<f32>,
    /// Target token id.
    pub label: TokenId,
    /// Split inherited from the source record.
    pub split: Split,
    /// Bookkeeping.
    pub meta: ExampleMeta,
}

/// Examples for one probe cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    /// Target cell.
    pub cell: ProbeCell,
    /// Hidden width.
    pub dim: usize,
    /// Examples in construction order.
    pub examples: Vec<ProbeExample>,
}

impl ProbeDataset {
    /// Empty dataset for `cell`.
    pub fn new(cell: ProbeCell, dim: usize) -> Self {
        Self {
            cell,
            dim,
            examples: Vec::new(),
        }
    }

    /// Append an example, checking its width.
    pub fn push(&mut self, example: ProbeExample) -> Result<()> {
        if example.hidden.len() != self.dim {
            return Err(Error::Probe(format!(
                "example width {} in a width-{} dataset",
                example.hidden.len(),
                self.dim
            )));
        }
        self.examples.push(example);
        Ok(())
    }

    /// Examples of one split.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProbeExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    /// `(train, validation)` counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let val = self.split(Split::Validation).count();
        (self.examples.len() - val, val)
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    /// Whether there are no examples.
    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Check widths, labels and split disjointness.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for e in &self.examples {
            if e.hidden.len() != self.dim {
                return Err(Error::Probe(format!("{}: ragged example widths", self.cell)));
            }
            if e.label as usize >= vocab_size {
                return Err(Error::Probe(format!(
                    "{}: label {} outside vocabulary of {vocab_size}",
                    self.cell, e.label
                )));
            }
        }
        let train: std::collections::HashSet<&str> = self
            .split(Split::Train)
            .map(|e| e.meta.source_id.as_str())
            .collect();
        if let Some(e) = self
            .split(Split::Validation)
            .find(|e| train.contains(e.meta.source_id.as_str()))
        {
            return Err(Error::Probe(format!(
                "{}: source {} appears in both splits",
                self.cell, e.meta.source_id
            )));
        }
        Ok(())
    }
}

/// A general-text prefix and its greedy continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookaheadCompletion {
    /// Source document id.
    pub source_id: String,
    /// Prefix plus generated tokens.
    pub tokens: Vec<TokenId>,
    /// Prefix length.
    pub prompt_len: usize,
    /// Split tag.
    pub split: Split,
}

impl LookaheadCompletion {
    /// Generated tokens only.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

/// Look-ahead datasets plus the completions they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadDatasets {
    /// One dataset per `(layer, k)`, layer-major.
    pub datasets: Vec<ProbeDataset>,
    /// Cached greedy completions.
    pub completions: Vec<LookaheadCompletion>,
}

/// Generate a greedy continuation of each sample and pair hidden states with
/// the tokens generated `k` steps later.
///
/// Position `p` of the full sequence is paired with token `p + k` whenever
/// that token was generated (not part of the prefix), so `k = 1` gives the
/// model's own next-token prediction and `k = 0` the token at `p` itself.
pub fn build_lookahead_dataset(
    model: &Model,
    samples: &[GeneralTextSample],
    layers: &[usize],
    ks: &[usize],
    new_tokens: usize,
) -> Result<LookaheadDatasets> {
    let params = DecodeParams::greedy(new_tokens, StopCondition::Never);
    let completions = samples
        .iter()
        .map(|s| {
            let g = model.generate(&s.tokens, &params, None, &[])?;
            let mut tokens = s.tokens.clone();
            tokens.extend(&g.tokens);
            Ok(LookaheadCompletion {
                source_id: s.source_id.clone(),
                tokens,
                prompt_len: s.tokens.len(),
                split: s.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let datasets = lookahead_from_completions(model, &completions, layers, ks)?;
    Ok(LookaheadDatasets {
        datasets,
        completions,
    })
}

/// Look-ahead datasets from already generated completions.
pub fn lookahead_from_completions(
    model: &Model,
    completions: &[LookaheadCompletion],
    layers: &[usize],
    ks: &[usize],
) -> Result<Vec<ProbeDataset>> {
    let dim = model.spec().hidden_size;
    let mut datasets: Vec<ProbeDataset> = layers
        .iter()
        .flat_map(|&layer| ks.iter().map(move |&k| ProbeCell::Lookahead { layer, k }))
        .map(|cell| ProbeDataset::new(cell, dim))
        .collect();
    for c in completions {
        let len = c.tokens.len();
        if c.prompt_len == 0 || c.prompt_len >= len {
            continue;
        }
        let positions: Vec<usize> = (0..len)
            .filter(|&p| ks.iter().any(|&k| p + k >= c.prompt_len && p + k < len))
            .collect();
        let sites: Vec<ResolvedSite> = layers
            .iter()
            .flat_map(|&l| {
                positions
                    .iter()
                    .map(move |&p| ResolvedSite::new(l, p, Component::ResidualPostBlock))
            })
            .collect();
        if sites.is_empty() {
            continue;
        }
        let store = model.capture(&c.tokens, &sites)?;
        for ds in &mut datasets {
            let ProbeCell::Lookahead { layer, k } = ds.cell else {
                unreachable!("look-ahead cells only")
            };
            for &p in &positions {
                let target = p + k;
                if target < c.prompt_len || target >= len {
                    continue;
                }
                let site = ResolvedSite::new(layer, p, Component::ResidualPostBlock);
                ds.push(ProbeExample {
                    hidden: store.require(&site)?.to_vec(),
                    label: c.tokens[target],
                    split: c.split,
                    meta: ExampleMeta {
                        source_id: c.source_id.clone(),
                        position: p as i64,
                        rhyme_word: None,
                        label_word: None,
                    },
                })?;
            }
        }
    }
    if let Some(ds) = datasets.iter().find(|d| d.is_empty()) {
        return Err(Error::Probe(format!(
            "{}: no completion is long enough for this look-ahead",
            ds.cell
        )));
    }
    Ok(datasets)
}

/// A couplet prompt's greedy second line and its located rhyme token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupletCompletion {
    /// Couplet id.
    pub couplet_id: String,
    /// First-line rhyme word.
    pub r1: String,
    /// Prompt plus generated tokens.
    pub tokens: Vec<TokenId>,
    /// Prompt length.
    pub prompt_len: usize,
    /// Generated line, newline excluded.
    pub line: String,
    /// Final word of the generated line.
    pub r2: String,
    /// Absolute index of the first token of `r2`.
    pub r2_index: usize,
    /// Prompt position map.
    pub prompt_map: PositionMap,
    /// Split tag.
    pub split: Split,
}

impl CoupletCompletion {
    /// Label token: the first token of the generated final word.
    pub fn label(&self) -> TokenId {
        self.tokens[self.r2_index]
    }
}

/// Couplet datasets plus completions and the exclusion log.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupletDatasets {
    /// One dataset per `(layer, position)`, layer-major.
    pub datasets: Vec<ProbeDataset>,
    /// Usable completions.
    pub completions: Vec<CoupletCompletion>,
    /// `(couplet id, reason)` for each excluded couplet.
    pub excluded: Vec<(String, String)>,
}

/// Greedy second line for one couplet, with its rhyme token located.
pub fn complete_couplet(
    model: &Model,
    couplet: &Couplet,
    preamble: &str,
    max_new_tokens: usize,
) -> Result<std::result::Result<CoupletCompletion, String>> {
    let prompt = model.encode(&truncation_prompt(couplet, preamble))?;
    let prompt_map = resolve_positions(&prompt, model.tokenizer())?;
    let g = model.generate(
        &prompt,
        &DecodeParams::greedy(max_new_tokens, StopCondition::Newline),
        None,
        &[],
    )?;
    if let Some(reason) = &g.aborted {
        return Ok(Err(format!("generation aborted: {reason}")));
    }
    if !g.stopped || !g.text.contains('\n') {
        return Ok(Err(format!("no line end within {max_new_tokens} tokens")));
    }
    let line = g.line().to_string();
    let Ok(r2) = final_word(&line) else {
        return Ok(Err(format!("no final word in {line:?}")));
    };
    let mut tokens = prompt.clone();
    tokens.extend(&g.tokens);
    let map = match resolve_positions(&tokens, model.tokenizer()) {
        Ok(m) if m.last_word_index >= prompt.len() => m,
        _ => return Ok(Err(format!("final word of {line:?} not located in tokens"))),
    };
    let span: Vec<TokenId> = tokens[map.last_word_span()].to_vec();
    if normalize_word(&model.decode(&span)?) != r2 {
        return Ok(Err(format!("token span does not spell {r2:?}")));
    }
    Ok(Ok(CoupletCompletion {
        couplet_id: couplet.id.clone(),
        r1: couplet.r1.to_lowercase(),
        tokens,
        prompt_len: prompt.len(),
        line,
        r2,
        r2_index: map.last_word_index,
        prompt_map,
        split: couplet.split,
    }))
}

/// Generate greedy second lines and pair prompt-relative hidden states with
/// the first token of each generated rhyme word.
///
/// Positions at or after the rhyme token are skipped for that couplet.
pub fn build_couplet_dataset(
    model: &Model,
    couplets: &[&Couplet],
    layers: &[usize],
    positions: &[Position],
    preamble: &str,
    max_new_tokens: usize,
) -> Result<CoupletDatasets> {
    let mut completions = Vec::new();
    let mut excluded = Vec::new();
    for c in couplets {
        match complete_couplet(model, c, preamble, max_new_tokens)? {
            Ok(done) => completions.push(done),
            Err(reason) => {
                tracing::debug!(id = %c.id, %reason, "excluded couplet");
                excluded.push((c.id.clone(), reason));
            }
        }
    }
    let datasets = couplet_from_completions(model, &completions, layers, positions)?;
    Ok(CoupletDatasets {
        datasets,
        completions,
        excluded,
    })
}

/// Couplet datasets from already generated completions.
pub fn couplet_from_completions(
    model: &Model,
    completions: &[CoupletCompletion],
    layers: &[usize],
    positions: &[Position],
) -> Result<Vec<ProbeDataset>> {
    let dim = model.spec().hidden_size;
    let mut datasets: Vec<ProbeDataset> = layers
        .iter()
        .flat_map(|&layer| {
            positions
                .iter()
                .map(move |&position| ProbeCell::Couplet { layer, position })
        })
        .map(|cell| ProbeDataset::new(cell, dim))
        .collect();
    let label_words: Vec<String> = completions.iter().map(|c| c.r2.clone()).collect();
    for (c, label_word) in completions.iter().zip(label_words) {
        let mut resolved = Vec::new();
        for &pos in positions {
            let abs = pos.resolve(Some(&c.prompt_map))?;
            if abs < c.r2_index {
                resolved.push((pos, abs));
            }
        }
        let sites: Vec<ResolvedSite> = layers
            .iter()
            .flat_map(|&l| {
                resolved
                    .iter()
                    .map(move |&(_, p)| ResolvedSite::new(l, p, Component::ResidualPostBlock))
            })
            .collect();
        if sites.is_empty() {
            continue;
        }
        let store = model.capture(&c.tokens, &sites)?;
        for ds in &mut datasets {
            let ProbeCell::Couplet { layer, position } = ds.cell else {
                unreachable!("couplet cells only")
            };
            let Some(&(_, abs)) = resolved.iter().find(|(p, _)| *p == position) else {
                continue;
            };
            let site = ResolvedSite::new(layer, abs, Component::ResidualPostBlock);
            ds.push(ProbeExample {
                hidden: store.require(&site)?.to_vec(),
                label: c.label(),
                split: c.split,
                meta: ExampleMeta {
                    source_id: c.couplet_id.clone(),
                    position: c.prompt_map.relative(abs),
                    rhyme_word: Some(c.r1.clone()),
                    label_word: Some(label_word.clone()),
                },
            })?;
        }
    }
    Ok(datasets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::load_model;
    use crate::corpus::{bundled_data_dir, load_couplets, LengthBounds, sample_general_text, DEFAULT_PREAMBLE};
    use crate::phonology::PronunciationLexicon;

    fn model() -> Model {
        load_model("toy-qwen").unwrap()
    }

    #[test]
    fn lookahead_k0_labels_are_the_input_tokens() {
        let m = model();
        let samples =
            sample_general_text(bundled_data_dir().join("general_text.jsonl"), 6, LengthBounds::default(), 3, m.tokenizer())
                .unwrap();
        let out = build_lookahead_dataset(&m, &samples, &[1], &[0, 1], 5).unwrap();
        let k0 = &out.datasets[0];
        let k1 = &out.datasets[1];
        assert_eq!(k0.len(), 6 * 5);
        assert_eq!(k1.len(), 6 * 5);
        for e in &k0.examples {
            let c = out.completions.iter().find(|c| c.source_id == e.meta.source_id).unwrap();
            assert_eq!(c.tokens[e.meta.position as usize], e.label);
        }
        for e in &k1.examples {
            let c = out.completions.iter().find(|c| c.source_id == e.meta.source_id).unwrap();
            assert_eq!(c.tokens[e.meta.position as usize + 1], e.label);
        }
    }

    #[test]
    fn lookahead_beyond_completion_is_an_error() {
        let m = model();
        let samples =
            sample_general_text(bundled_data_dir().join("general_text.jsonl"), 2, LengthBounds::default(), 3, m.tokenizer())
                .unwrap();
        assert!(build_lookahead_dataset(&m, &samples, &[0], &[50], 3).is_err());
    }

    #[test]
    fn couplet_examples_precede_the_rhyme_token() {
        let m = model();
        let lex = PronunciationLexicon::bundled();
        let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex).unwrap();
        let cs: Vec<&Couplet> = set.couplets.iter().take(12).collect();
        let positions = [Position::LastWord, Position::Relative(0), Position::Relative(1)];
        let out = build_couplet_dataset(&m, &cs, &[2], &positions, DEFAULT_PREAMBLE, 20).unwrap();
        assert_eq!(out.completions.len() + out.excluded.len(), 12);
        for c in &out.completions {
            assert!(c.r2_index >= c.prompt_len);
            let piece = normalize_word(&m.decode(&[c.label()]).unwrap());
            assert!(c.r2.starts_with(&piece), "{piece:?} does not start {:?}", c.r2);
        }
        let newline = &out.datasets[1];
        assert_eq!(newline.len(), out.completions.len());
        assert!(newline.examples.iter().all(|e| e.meta.position == 0));
        let last_word = &out.datasets[0];
        assert!(last_word.examples.iter().all(|e| e.meta.position == -1));
    }

    #[test]
    fn completion_without_line_end_is_excluded() {
        let m = model();
        let lex = PronunciationLexicon::bundled();
        let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex).unwrap();
        let cs: Vec<&Couplet> = set.couplets.iter().take(4).collect();
        let out = build_couplet_dataset(&m, &cs, &[0], &[Position::Relative(0)], DEFAULT_PREAMBLE, 1).unwrap();
        assert!(out.completions.len() < 4);
        assert!(out.excluded.iter().all(|(_, r)| !r.is_empty()));
    }
}
