// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe evaluation, the unigram baseline and the newline gap.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{LinearProbe, ProbeDataset, ProbeExample};
use crate::backend::{Position, TokenId, TokenizerAdapter};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::phonology::{normalize_word, rhymes, IdenticalWordPolicy, PronunciationLexicon, RhymeVerdict};
use crate::stats::{paired_bitmap_diff, paired_wald_diff, wilson, Interval};

/// Word a prediction must rhyme with to count toward rhyme accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhymeReference {
    /// The word the label token starts (the model's own second-line rhyme).
    /// An exact label match counts under `CountIdentical`.
    #[default]
    Label,
    /// The first line's rhyme word.
    PromptRhyme,
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Treatment of a predicted word identical to the reference.
    pub policy: IdenticalWordPolicy,
    /// Rhyme reference word.
    pub reference: RhymeReference,
    /// Confidence level for intervals.
    pub confidence: f64,
    /// Permit evaluation on the training split.
    pub allow_training_split: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            policy: IdenticalWordPolicy::CountIdentical,
            reference: RhymeReference::Label,
            confidence: crate::stats::DEFAULT_CONFIDENCE,
            allow_training_split: false,
        }
    }
}

/// Accuracies with Wilson intervals and per-example correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    /// Examples evaluated.
    pub n: usize,
    /// Exact match of the highest-scoring token.
    pub top1: Interval,
    /// Label among the five highest-scoring tokens.
    pub top5: Interval,
    /// Top-1 prediction rhymes with the reference (couplet datasets only).
    pub rhyme: Option<Interval>,
    /// Source id of each evaluated example.
    pub source_ids: Vec<String>,
    /// Per-example top-1 correctness.
    pub top1_hits: Vec<bool>,
    /// Per-example top-5 correctness.
    pub top5_hits: Vec<bool>,
    /// Per-example rhyme correctness.
    pub rhyme_hits: Option<Vec<bool>>,
}

fn rhyme_hit(
    e: &ProbeExample,
    predicted: TokenId,
    tok: &dyn TokenizerAdapter,
    lexicon: &PronunciationLexicon,
    opts: &EvalOptions,
) -> Result<Option<bool>> {
    let reference = match opts.reference {
        RhymeReference::Label => e.meta.label_word.as_deref(),
        RhymeReference::PromptRhyme => e.meta.rhyme_word.as_deref(),
    };
    let Some(reference) = reference else {
        return Ok(None);
    };
    if opts.reference == RhymeReference::Label && predicted == e.label {
        return Ok(Some(opts.policy == IdenticalWordPolicy::CountIdentical));
    }
    let word = normalize_word(&tok.token_text(predicted)?);
    if word.is_empty() {
        return Ok(Some(false));
    }
    Ok(Some(rhymes(&word, reference, lexicon, opts.policy) == RhymeVerdict::Rhyme))
}

fn evaluate_with(
    dataset: &ProbeDataset,
    tok: &dyn TokenizerAdapter,
    lexicon: &PronunciationLexicon,
    opts: &EvalOptions,
    mut rank: impl FnMut(&ProbeExample) -> Result<Vec<TokenId>>,
) -> Result<ProbeEval> {
    let examples: Vec<&ProbeExample> = if opts.allow_training_split {
        dataset.examples.iter().collect()
    } else {
        if dataset.split(Split::Train).next().is_some()
            && dataset.split(Split::Validation).next().is_none()
        {
            return Err(Error::Probe(format!(
                "{}: refusing to evaluate on the training split",
                dataset.cell
            )));
        }
        dataset.split(Split::Validation).collect()
    };
    if examples.is_empty() {
        return Err(Error::Probe(format!("{}: nothing to evaluate", dataset.cell)));
    }
    let mut top1_hits = Vec::with_capacity(examples.len());
    let mut top5_hits = Vec::with_capacity(examples.len());
    let mut rhyme_hits: Option<Vec<bool>> = Some(Vec::new());
    for e in &examples {
        let ranked = rank(e)?;
        let first = ranked.first().copied();
        top1_hits.push(first == Some(e.label));
        top5_hits.push(ranked.iter().take(5).any(|&t| t == e.label));
        let hit = match first {
            Some(p) => rhyme_hit(e, p, tok, lexicon, opts)?,
            None => Some(false),
        };
        match (hit, rhyme_hits.as_mut()) {
            (Some(h), Some(v)) => v.push(h),
            _ => rhyme_hits = None,
        }
    }
    let n = examples.len();
    let rate = |hits: &[bool]| wilson(hits.iter().filter(|&&h| h).count() as u64, n as u64, opts.confidence);
    Ok(ProbeEval {
        n,
        top1: rate(&top1_hits)?,
        top5: rate(&top5_hits)?,
        rhyme: rhyme_hits.as_deref().map(rate).transpose()?,
        source_ids: examples.iter().map(|e| e.meta.source_id.clone()).collect(),
        top1_hits,
        top5_hits,
        rhyme_hits,
    })
}

/// Top-1, top-5 and rhyme accuracy of `probe` on the validation split.
/// Errors when only training examples are present unless
/// `opts.allow_training_split` is set (which then evaluates every example).
pub fn evaluate_probe(
    probe: &LinearProbe,
    dataset: &ProbeDataset,
    tok: &dyn TokenizerAdapter,
    lexicon: &PronunciationLexicon,
    opts: &EvalOptions,
) -> Result<ProbeEval> {
    evaluate_with(dataset, tok, lexicon, opts, |e| probe.top_k(&e.hidden, 5))
}

/// Token frequencies over a completion corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramBaseline {
    counts: BTreeMap<TokenId, u64>,
    total: u64,
    ranked: Vec<TokenId>,
}

impl UnigramBaseline {
    /// Count every token of every sequence.
    pub fn fit<'a>(sequences: impl IntoIterator<Item = &'a [TokenId]>) -> Result<Self> {
        let mut counts: BTreeMap<TokenId, u64> = BTreeMap::new();
        for s in sequences {
            for &t in s {
                *counts.entry(t).or_default() += 1;
            }
        }
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::Probe("unigram baseline needs a nonempty corpus".into()));
        }
        let mut ranked: Vec<(TokenId, u64)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Self {
            ranked: ranked.into_iter().map(|(t, _)| t).collect(),
            counts,
            total,
        })
    }

    /// Relative frequency of `token`.
    pub fn frequency(&self, token: TokenId) -> f64 {
        self.counts.get(&token).copied().unwrap_or(0) as f64 / self.total as f64
    }

    /// Tokens counted.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// The `k` most frequent tokens, ties by ascending id; exactly `k` when
    /// at least `k` distinct tokens were seen.
    pub fn top_k(&self, k: usize) -> &[TokenId] {
        &self.ranked[..k.min(self.ranked.len())]
    }
}

/// Evaluate the constant frequency-ranked prediction exactly like a probe.
pub fn unigram_eval(
    baseline: &UnigramBaseline,
    dataset: &ProbeDataset,
    tok: &dyn TokenizerAdapter,
    lexicon: &PronunciationLexicon,
    opts: &EvalOptions,
) -> Result<ProbeEval> {
    let top = baseline.top_k(5).to_vec();
    evaluate_with(dataset, tok, lexicon, opts, |_| Ok(top.clone()))
}

/// One evaluated probe cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    /// Block index.
    pub layer: usize,
    /// Prompt position.
    pub position: Position,
    /// Evaluation result.
    pub eval: ProbeEval,
}

/// Accuracy used for the gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMetric {
    /// Top-1 accuracy.
    Top1,
    /// Top-5 accuracy.
    #[default]
    Top5,
    /// Rhyme accuracy.
    Rhyme,
}

impl GapMetric {
    fn pick<'a>(&self, e: &'a ProbeEval) -> Result<(&'a Interval, &'a [bool])> {
        match self {
            Self::Top1 => Ok((&e.top1, &e.top1_hits)),
            Self::Top5 => Ok((&e.top5, &e.top5_hits)),
            Self::Rhyme => match (&e.rhyme, &e.rhyme_hits) {
                (Some(i), Some(h)) => Ok((i, h)),
                _ => Err(Error::Probe("grid entry has no rhyme accuracy".into())),
            },
        }
    }
}

/// Largest newline-minus-first-generated accuracy difference over layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewlineGap {
    /// `max_l [acc(l, 0) - acc(l, 1)]`.
    pub gap: f64,
    /// Layer attaining the maximum (lowest on ties).
    pub peak_layer: usize,
    /// Unpaired Wald interval at the peak layer.
    pub wald: Interval,
    /// Paired interval from per-example correctness on shared sources.
    pub paired: Option<Interval>,
}

/// Newline gap for one model's probe grid.
pub fn newline_gap(grid: &[GridEntry], metric: GapMetric, confidence: f64) -> Result<NewlineGap> {
    let find = |layer: usize, i: i64| {
        grid.iter()
            .find(|g| g.layer == layer && g.position == Position::Relative(i))
    };
    let mut layers: Vec<usize> = grid.iter().map(|g| g.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut missing = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for &l in &layers {
        match (find(l, 0), find(l, 1)) {
            (Some(a), Some(b)) => {
                let d = metric.pick(&a.eval)?.0.point - metric.pick(&b.eval)?.0.point;
                if best.is_none_or(|(g, _)| d > g) {
                    best = Some((d, l));
                }
            }
            (a, b) => {
                if a.is_none() {
                    missing.push(format!("layer {l} i=0"));
                }
                if b.is_none() {
                    missing.push(format!("layer {l} i=1"));
                }
            }
        }
    }
    if !missing.is_empty() || best.is_none() {
        return Err(Error::Probe(format!(
            "newline gap needs i=0 and i=1 at every layer; missing: {}",
            if missing.is_empty() { "all".to_string() } else { missing.join(", ") }
        )));
    }
    let (gap, peak) = best.expect("checked above");
    let a = &find(peak, 0).expect("present").eval;
    let b = &find(peak, 1).expect("present").eval;
    let (ia, ha) = metric.pick(a)?;
    let (ib, hb) = metric.pick(b)?;
    let wald = paired_wald_diff(ia.point, a.n as u64, ib.point, b.n as u64, confidence)?;
    let index: HashMap<&str, usize> = b
        .source_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let (xa, xb): (Vec<bool>, Vec<bool>) = a
        .source_ids
        .iter()
        .enumerate()
        .filter_map(|(i, s)| index.get(s.as_str()).map(|&j| (ha[i], hb[j])))
        .unzip();
    let paired = if xa.is_empty() {
        None
    } else {
        Some(paired_bitmap_diff(&xa, &xb, confidence)?)
    };
    Ok(NewlineGap {
        gap,
        peak_layer: peak,
        wald,
        paired,
    })
}
