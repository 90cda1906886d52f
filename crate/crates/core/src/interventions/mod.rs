// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal experiments measured by the corrupt rhyme rate: activation
//! patching sweeps with controls, all-layers patching and steering.
//!
//! A cell is one intervention condition evaluated on every prompt pair with
//! `n_samples` stochastic completions each. Pairs are the clusters for
//! uncertainty: the cell rate is the equal-weight mean of per-pair rates.

mod steering;

pub use steering::{
    fit_steering_vector, fit_steering_vectors, schemes_from_couplets, steered_cell, steered_sweep,
    RhymeScheme, SteeringVector,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    ActivationStore, Component, DecodeParams, HookSite, Model, PatchOp, PatchPlan, PatchScope,
    Position, ResolvedSite, TokenId,
};
use crate::corpus::PromptPair;
use crate::error::{Error, Result};
use crate::phonology::{final_word, rhymes, IdenticalWordPolicy, PronunciationLexicon, RhymeVerdict};
use crate::stats::{cluster_bootstrap, wilson, BootstrapConfig, ClusterCount, Interval};

/// Unrelated sentence whose hidden states serve as the donor baseline.
pub const DEFAULT_DONOR: &str =
    "The weather outside is warm and sunny today, and the birds are singing.";

/// Verdict on one sampled completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVerdict {
    /// Final word of the generated line, when one was found.
    pub final_word: Option<String>,
    /// Rhymes with the corrupt (target) word.
    pub success: bool,
    /// Rhymes with the clean word.
    pub clean_rhyme: bool,
    /// The final word or the target word is out of lexicon.
    pub unknown: bool,
    /// Why a completion could not be scored.
    pub reason: Option<String>,
}

/// Verdicts and counts for a batch of completions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhymeTally {
    /// Per-sample verdicts in input order.
    pub verdicts: Vec<SampleVerdict>,
    /// Completions rhyming with the corrupt word.
    pub successes: u64,
    /// Completions rhyming with the clean word.
    pub clean_rhymes: u64,
    /// Completions with an out-of-lexicon word.
    pub unknown: u64,
    /// Completions scored.
    pub total: u64,
}

impl RhymeTally {
    /// `successes / total`, 0 for an empty tally.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.successes as f64 / self.total as f64
        }
    }
}

/// Score one generated second line.
pub fn score_line(
    line: &str,
    corrupt_word: &str,
    clean_word: &str,
    lexicon: &PronunciationLexicon,
    policy: IdenticalWordPolicy,
) -> SampleVerdict {
    let Ok(word) = final_word(line) else {
        return SampleVerdict {
            final_word: None,
            success: false,
            clean_rhyme: false,
            unknown: false,
            reason: Some("no final word".into()),
        };
    };
    let to_corrupt = rhymes(&word, corrupt_word, lexicon, policy);
    let to_clean = rhymes(&word, clean_word, lexicon, policy);
    SampleVerdict {
        success: to_corrupt == RhymeVerdict::Rhyme,
        clean_rhyme: to_clean == RhymeVerdict::Rhyme,
        unknown: to_corrupt == RhymeVerdict::Unknown,
        reason: None,
        final_word: Some(word),
    }
}

/// Score every line: a success is a final word rhyming with `corrupt_word`.
pub fn corrupt_rhyme_rate(
    lines: &[&str],
    corrupt_word: &str,
    clean_word: &str,
    lexicon: &PronunciationLexicon,
    policy: IdenticalWordPolicy,
) -> RhymeTally {
    let verdicts: Vec<SampleVerdict> = lines
        .iter()
        .map(|l| score_line(l, corrupt_word, clean_word, lexicon, policy))
        .collect();
    let count = |f: fn(&SampleVerdict) -> bool| verdicts.iter().filter(|v| f(v)).count() as u64;
    RhymeTally {
        successes: count(|v| v.success),
        clean_rhymes: count(|v| v.clean_rhyme),
        unknown: count(|v| v.unknown),
        total: verdicts.len() as u64,
        verdicts,
    }
}

/// Source of replacement activations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum Replacement {
    /// The corrupt prompt's activations.
    Corrupt,
    /// The clean prompt's own activations (identity patch).
    Clean,
    /// An all-zeros vector.
    Zero,
    /// Activations at the same token positions of an unrelated text.
    Donor {
        /// Donor text.
        text: String,
    },
}

/// How the first stage of path patching corrupts the source position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Mode {
    /// Replace the source residual at every layer below each head's layer.
    #[default]
    FullColumn,
    /// Replace the source residual only at the layer directly below each
    /// head's layer.
    SingleLayer,
}

/// What a cell does to the clean run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Intervention {
    /// No intervention.
    Clean,
    /// Replace activations at every site.
    Patch {
        /// Replacement source.
        replacement: Replacement,
    },
    /// Two-stage path patching: the sites are head outputs at the
    /// destination position, cached from a clean run whose `source`
    /// position carries the corrupt residual.
    PathPatch {
        /// Source position.
        source: Position,
        /// Source corruption mode.
        stage1: Stage1Mode,
    },
    /// Add `alpha` times a steering vector at the site.
    Steer {
        /// Gain.
        alpha: f32,
        /// Hash of the vector set used.
        vectors: String,
    },
}

/// Complete description of a cell: enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDescriptor {
    /// Stable cell id.
    pub id: String,
    /// Intervention.
    pub intervention: Intervention,
    /// Sites in prompt-relative coordinates.
    pub sites: Vec<HookSite>,
    /// Decode steps the patches apply at.
    #[serde(default)]
    pub scope: PatchScope,
}

impl CellDescriptor {
    /// Descriptor with an id derived from its contents.
    pub fn new(intervention: Intervention, sites: Vec<HookSite>) -> Self {
        let kind = match &intervention {
            Intervention::Clean => "clean".to_string(),
            Intervention::Patch { replacement } => match replacement {
                Replacement::Corrupt => "patch".into(),
                Replacement::Clean => "identity".into(),
                Replacement::Zero => "zero".into(),
                Replacement::Donor { .. } => "donor".into(),
            },
            Intervention::PathPatch { source, stage1 } => {
                let mode = match stage1 {
                    Stage1Mode::FullColumn => "column",
                    Stage1Mode::SingleLayer => "single",
                };
                format!("path[{source},{mode}]")
            }
            Intervention::Steer { alpha, .. } => format!("steer[{alpha}]"),
        };
        let sites_str: Vec<String> = sites.iter().map(ToString::to_string).collect();
        Self {
            id: format!("{kind}:{}", sites_str.join(",")),
            intervention,
            sites,
            scope: PatchScope::EveryStep,
        }
    }
}

/// Whether sample seeds depend on the cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedScheme {
    /// Seeds mix in the cell id, so cells are independent.
    #[default]
    PerCell,
    /// Seeds depend only on the pair and sample index, so every cell sees
    /// the same random stream (exact no-op comparisons).
    Shared,
}

/// Sampling settings shared by the cells of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Completions per pair (or per prompt, for steering).
    pub n_samples: usize,
    /// Decoding settings; the seed field is overwritten per sample.
    pub decode: DecodeParams,
    /// Base seed.
    pub base_seed: u64,
    /// Seed derivation.
    pub seed_scheme: SeedScheme,
    /// Transcripts kept per pair.
    pub transcripts_per_pair: usize,
    /// Identical-word handling for the rhyme matcher.
    pub policy: IdenticalWordPolicy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_samples: 20,
            decode: DecodeParams::default(),
            base_seed: 0,
            seed_scheme: SeedScheme::PerCell,
            transcripts_per_pair: 3,
            policy: IdenticalWordPolicy::CountIdentical,
        }
    }
}

impl SamplingConfig {
    /// Check the settings.
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Intervention("n_samples must be at least 1".into()));
        }
        self.decode.validate()
    }

    /// Seed for sample `index` of `key` in cell `cell_id`.
    pub fn sample_seed(&self, key: &str, cell_id: &str, index: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(self.base_seed.to_le_bytes());
        h.update(key.as_bytes());
        h.update([0]);
        if self.seed_scheme == SeedScheme::PerCell {
            h.update(cell_id.as_bytes());
        }
        h.update([0]);
        h.update((index as u64).to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// How a cell's interval is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum IntervalChoice {
    /// Wilson interval on pooled counts.
    Wilson {
        /// Confidence level.
        confidence: f64,
    },
    /// Pair-clustered bootstrap.
    ClusterBootstrap(BootstrapConfig),
}

impl Default for IntervalChoice {
    fn default() -> Self {
        Self::ClusterBootstrap(BootstrapConfig::default())
    }
}

/// Counts for one cluster (prompt pair or scheme pair).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Cluster id.
    pub id: String,
    /// Successful completions.
    pub n_success: u64,
    /// Completions.
    pub n_total: u64,
    /// Out-of-lexicon completions.
    pub n_unknown: u64,
    /// Completions rhyming with the clean word.
    pub n_clean_rhyme: u64,
}

impl PairCounts {
    /// Success rate.
    pub fn rate(&self) -> f64 {
        if self.n_total == 0 {
            0.0
        } else {
            self.n_success as f64 / self.n_total as f64
        }
    }
}

/// A kept completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    /// Cluster id.
    pub pair_id: String,
    /// Sample index.
    pub sample: usize,
    /// Seed used.
    pub seed: u64,
    /// Generated text.
    pub text: String,
    /// Verdict.
    pub verdict: SampleVerdict,
}

/// Outcome of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    /// What was run.
    pub descriptor: CellDescriptor,
    /// Sampling settings.
    pub sampling: SamplingConfig,
    /// Interval settings.
    pub interval_choice: IntervalChoice,
    /// Per-cluster counts, in input order.
    pub pairs: Vec<PairCounts>,
    /// Equal-weight mean of per-cluster rates.
    pub rate: f64,
    /// Interval on `rate`.
    pub interval: Option<Interval>,
    /// Sample completions, capped per pair.
    pub transcripts: Vec<Transcript>,
    /// Set when the cell could not be completed.
    pub failure: Option<String>,
}

impl CellResult {
    /// Cell id.
    pub fn id(&self) -> &str {
        &self.descriptor.id
    }

    /// Whether the cell completed.
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    /// Pooled `(successes, total)`.
    pub fn pooled(&self) -> (u64, u64) {
        self.pairs
            .iter()
            .fold((0, 0), |(s, n), p| (s + p.n_success, n + p.n_total))
    }

    fn failed(
        descriptor: CellDescriptor,
        sampling: &SamplingConfig,
        interval_choice: IntervalChoice,
        reason: String,
    ) -> Self {
        Self {
            descriptor,
            sampling: sampling.clone(),
            interval_choice,
            pairs: Vec::new(),
            rate: 0.0,
            interval: None,
            transcripts: Vec::new(),
            failure: Some(reason),
        }
    }
}

/// Equal-weight mean of cluster rates with the chosen interval.
pub fn aggregate(pairs: &[PairCounts], choice: &IntervalChoice) -> Result<(f64, Interval)> {
    if pairs.is_empty() {
        return Err(Error::Intervention("no clusters to aggregate".into()));
    }
    let rate = pairs.iter().map(PairCounts::rate).sum::<f64>() / pairs.len() as f64;
    let interval = match choice {
        IntervalChoice::Wilson { confidence } => {
            let (s, n) = pairs
                .iter()
                .fold((0, 0), |(s, n), p| (s + p.n_success, n + p.n_total));
            wilson(s, n, *confidence)?
        }
        IntervalChoice::ClusterBootstrap(cfg) => {
            let clusters: Vec<ClusterCount> = pairs
                .iter()
                .map(|p| ClusterCount::new(p.n_success, p.n_total))
                .collect();
            cluster_bootstrap(&clusters, cfg)?
        }
    };
    Ok((rate, interval))
}

/// One prompt to sample from within a cell.
pub(crate) struct Job<'a> {
    pub cluster: String,
    pub seed_key: String,
    pub prompt: &'a [TokenId],
    pub plan: PatchPlan,
    pub target_word: String,
    pub other_word: String,
}

/// Sample every job and aggregate per cluster, keeping cluster order.
pub(crate) fn run_jobs(
    model: &Model,
    descriptor: CellDescriptor,
    jobs: Vec<Job<'_>>,
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, PairCounts> = BTreeMap::new();
    let mut transcripts = Vec::new();
    let mut kept: BTreeMap<String, usize> = BTreeMap::new();
    for mut job in jobs {
        job.plan.scope = descriptor.scope.clone();
        let entry = counts.entry(job.cluster.clone()).or_insert_with(|| {
            order.push(job.cluster.clone());
            PairCounts {
                id: job.cluster.clone(),
                n_success: 0,
                n_total: 0,
                n_unknown: 0,
                n_clean_rhyme: 0,
            }
        });
        for i in 0..sampling.n_samples {
            let seed = sampling.sample_seed(&job.seed_key, &descriptor.id, i);
            let params = sampling.decode.with_seed(seed);
            let plan = (!job.plan.is_empty()).then_some(&job.plan);
            let g = model.generate(job.prompt, &params, plan, &[])?;
            let verdict = if let Some(reason) = &g.aborted {
                SampleVerdict {
                    final_word: None,
                    success: false,
                    clean_rhyme: false,
                    unknown: false,
                    reason: Some(format!("aborted: {reason}")),
                }
            } else {
                score_line(g.line(), &job.target_word, &job.other_word, lexicon, sampling.policy)
            };
            entry.n_total += 1;
            entry.n_success += u64::from(verdict.success);
            entry.n_unknown += u64::from(verdict.unknown);
            entry.n_clean_rhyme += u64::from(verdict.clean_rhyme);
            let k = kept.entry(job.cluster.clone()).or_default();
            if *k < sampling.transcripts_per_pair {
                *k += 1;
                transcripts.push(Transcript {
                    pair_id: job.cluster.clone(),
                    sample: i,
                    seed,
                    text: g.text.clone(),
                    verdict,
                });
            }
        }
    }
    let pairs: Vec<PairCounts> = order
        .iter()
        .map(|id| counts.remove(id).expect("inserted"))
        .collect();
    let (rate, interval) = aggregate(&pairs, &interval_choice)?;
    Ok(CellResult {
        descriptor,
        sampling: sampling.clone(),
        interval_choice,
        pairs,
        rate,
        interval: Some(interval),
        transcripts,
        failure: None,
    })
}

/// Resolve sites on both prompts of a pair; they must agree.
pub fn resolve_pair_sites(pair: &PromptPair, sites: &[HookSite]) -> Result<Vec<ResolvedSite>> {
    sites
        .iter()
        .map(|s| {
            let clean = s.resolve(Some(&pair.clean_map))?;
            let corrupt = s.resolve(Some(&pair.corrupt_map))?;
            if clean != corrupt {
                return Err(Error::Intervention(format!(
                    "{}: site {s} resolves to {} in the clean prompt but {} in the corrupt one",
                    pair.pair_id, clean.position, corrupt.position
                )));
            }
            Ok(clean)
        })
        .collect()
}

fn captured(
    model: &Model,
    tokens: &[TokenId],
    sites: &[ResolvedSite],
    cache: Option<&ActivationStore>,
) -> Result<ActivationStore> {
    match cache {
        Some(c) if sites.iter().all(|s| c.get(s).is_some()) => {
            PatchPlan::replace_from(c, sites)?;
            Ok(c.clone())
        }
        _ => model.capture(tokens, sites),
    }
}

/// Patch plan a descriptor implies for one pair. `corrupt_cache` may hold
/// pre-captured corrupt activations.
pub fn plan_for_pair(
    model: &Model,
    pair: &PromptPair,
    descriptor: &CellDescriptor,
    corrupt_cache: Option<&ActivationStore>,
) -> Result<PatchPlan> {
    let sites = resolve_pair_sites(pair, &descriptor.sites)?;
    let mut plan = match &descriptor.intervention {
        Intervention::Clean => PatchPlan::new(),
        Intervention::Patch { replacement } => match replacement {
            Replacement::Corrupt => {
                let store = captured(model, &pair.corrupt_tokens, &sites, corrupt_cache)?;
                PatchPlan::replace_from(&store, &sites)?
            }
            Replacement::Clean => {
                PatchPlan::replace_from(&model.capture(&pair.clean_tokens, &sites)?, &sites)?
            }
            Replacement::Zero => sites.iter().fold(PatchPlan::new(), |p, s| p.with(*s, PatchOp::Zero)),
            Replacement::Donor { text } => {
                let donor = model.encode(text)?;
                if let Some(s) = sites.iter().find(|s| s.position >= donor.len()) {
                    return Err(Error::Intervention(format!(
                        "donor text has {} tokens; site {s:?} needs position {}",
                        donor.len(),
                        s.position
                    )));
                }
                PatchPlan::replace_from(&model.capture(&donor, &sites)?, &sites)?
            }
        },
        Intervention::PathPatch { source, stage1 } => {
            path_patch_plan(model, pair, &sites, *source, *stage1, corrupt_cache)?
        }
        Intervention::Steer { .. } => {
            return Err(Error::Intervention(
                "steering cells are built from steering vectors, not prompt pairs".into(),
            ))
        }
    };
    plan.scope = descriptor.scope.clone();
    Ok(plan)
}

fn path_patch_plan(
    model: &Model,
    pair: &PromptPair,
    heads: &[ResolvedSite],
    source: Position,
    mode: Stage1Mode,
    corrupt_cache: Option<&ActivationStore>,
) -> Result<PatchPlan> {
    if heads.is_empty() {
        return Ok(PatchPlan::new());
    }
    if let Some(s) = heads
        .iter()
        .find(|s| !matches!(s.component, Component::AttentionHead(_)))
    {
        return Err(Error::Intervention(format!(
            "path patching substitutes head outputs; got {}",
            s.component
        )));
    }
    let src = source.resolve(Some(&pair.clean_map))?;
    if src != source.resolve(Some(&pair.corrupt_map))? {
        return Err(Error::Intervention(format!(
            "{}: source position differs between prompts",
            pair.pair_id
        )));
    }
    let column = |layers: &[usize]| -> Vec<ResolvedSite> {
        layers
            .iter()
            .map(|&l| ResolvedSite::new(l, src, Component::ResidualPostBlock))
            .collect()
    };
    // Group heads by the stage-1 run that serves them.
    let mut groups: BTreeMap<Vec<usize>, Vec<ResolvedSite>> = BTreeMap::new();
    match mode {
        Stage1Mode::FullColumn => {
            let top = heads.iter().map(|h| h.layer).max().expect("nonempty");
            groups.insert((0..top).collect(), heads.to_vec());
        }
        Stage1Mode::SingleLayer => {
            for h in heads {
                let below: Vec<usize> = h.layer.checked_sub(1).into_iter().collect();
                groups.entry(below).or_default().push(*h);
            }
        }
    }
    let mut plan = PatchPlan::new();
    for (layers, group) in groups {
        let src_sites = column(&layers);
        let stage1 = if src_sites.is_empty() {
            PatchPlan::new()
        } else {
            let store = captured(model, &pair.corrupt_tokens, &src_sites, corrupt_cache)?;
            PatchPlan::replace_from(&store, &src_sites)?
        };
        let cached = model.forward(&pair.clean_tokens, Some(&stage1), &group)?.store;
        plan.extend(&PatchPlan::replace_from(&cached, &group)?);
    }
    Ok(plan)
}

/// Run one descriptor over every pair. Per-pair errors mark the cell failed
/// rather than aborting; invalid sampling settings are returned as errors.
pub fn run_cell(
    model: &Model,
    pairs: &[PromptPair],
    descriptor: CellDescriptor,
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    run_cell_cached(model, pairs, descriptor, sampling, interval_choice, lexicon, &[])
}

fn run_cell_cached(
    model: &Model,
    pairs: &[PromptPair],
    descriptor: CellDescriptor,
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
    caches: &[ActivationStore],
) -> Result<CellResult> {
    sampling.validate()?;
    if pairs.is_empty() {
        return Err(Error::Intervention("a cell needs at least one prompt pair".into()));
    }
    let attempt = || -> Result<CellResult> {
        let mut jobs = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let plan = plan_for_pair(model, pair, &descriptor, caches.get(i))?;
            jobs.push(Job {
                cluster: pair.pair_id.clone(),
                seed_key: pair.pair_id.clone(),
                prompt: &pair.clean_tokens,
                plan,
                target_word: pair.corrupt_word.clone(),
                other_word: pair.clean_word.clone(),
            });
        }
        run_jobs(model, descriptor.clone(), jobs, sampling, interval_choice, lexicon)
    };
    Ok(attempt().unwrap_or_else(|e| {
        tracing::warn!(cell = %descriptor.id, error = %e, "cell failed");
        CellResult::failed(descriptor.clone(), sampling, interval_choice, e.to_string())
    }))
}

/// Patch corrupt activations at `sites` into every pair's clean run.
pub fn run_patch_cell(
    model: &Model,
    pairs: &[PromptPair],
    sites: &[HookSite],
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    let d = CellDescriptor::new(
        Intervention::Patch {
            replacement: Replacement::Corrupt,
        },
        sites.to_vec(),
    );
    run_cell(model, pairs, d, sampling, interval_choice, lexicon)
}

/// Unpatched clean-run rate.
pub fn clean_cell(
    model: &Model,
    pairs: &[PromptPair],
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    let d = CellDescriptor::new(Intervention::Clean, Vec::new());
    run_cell(model, pairs, d, sampling, interval_choice, lexicon)
}

/// Best single-layer newline cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullResidualReference {
    /// Layer of the best cell.
    pub layer: usize,
    /// Its rate.
    pub rate: f64,
    /// Its cell id.
    pub cell_id: String,
}

/// A layer × position grid of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Layer axis.
    pub layers: Vec<usize>,
    /// Position axis.
    pub positions: Vec<Position>,
    /// Cells, layer-major.
    pub cells: Vec<CellResult>,
    /// Maximum over the newline column, when that column was swept.
    pub reference: Option<FullResidualReference>,
}

impl SweepResult {
    /// Cell at `(layer, position)`.
    pub fn get(&self, layer: usize, position: Position) -> Option<&CellResult> {
        let li = self.layers.iter().position(|&l| l == layer)?;
        let pi = self.positions.iter().position(|&p| p == position)?;
        self.cells.get(li * self.positions.len() + pi)
    }

    /// Ids of failed cells.
    pub fn failures(&self) -> Vec<&str> {
        self.cells
            .iter()
            .filter(|c| !c.is_complete())
            .map(CellResult::id)
            .collect()
    }

    fn with_reference(mut self) -> Self {
        self.reference = newline_reference(&self);
        self
    }
}

fn newline_reference(sweep: &SweepResult) -> Option<FullResidualReference> {
    let mut best: Option<FullResidualReference> = None;
    for &l in &sweep.layers {
        let Some(c) = sweep.get(l, Position::NEWLINE) else {
            continue;
        };
        if !c.is_complete() {
            continue;
        }
        if best.as_ref().is_none_or(|b| c.rate > b.rate) {
            best = Some(FullResidualReference {
                layer: l,
                rate: c.rate,
                cell_id: c.id().to_string(),
            });
        }
    }
    best
}

fn sweep_grid(
    model: &Model,
    pairs: &[PromptPair],
    layers: &[usize],
    positions: &[Position],
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
    make: impl Fn(usize, Position) -> CellDescriptor,
    prefetch_corrupt: bool,
) -> Result<SweepResult> {
    sampling.validate()?;
    let caches: Vec<ActivationStore> = if prefetch_corrupt {
        let sites: Vec<HookSite> = layers
            .iter()
            .flat_map(|&l| positions.iter().map(move |&p| HookSite::residual(l, p)))
            .collect();
        pairs
            .iter()
            .map(|pair| {
                let resolved = resolve_pair_sites(pair, &sites)?;
                model.capture(&pair.corrupt_tokens, &resolved)
            })
            .collect::<Result<_>>()
            .unwrap_or_default()
    } else {
        Vec::new()
    };
    let mut cells = Vec::with_capacity(layers.len() * positions.len());
    for &l in layers {
        for &p in positions {
            let d = make(l, p);
            cells.push(run_cell_cached(
                model,
                pairs,
                d,
                sampling,
                interval_choice,
                lexicon,
                &caches,
            )?);
        }
    }
    Ok(SweepResult {
        layers: layers.to_vec(),
        positions: positions.to_vec(),
        cells,
        reference: None,
    }
    .with_reference())
}

/// Single-site residual patching over every `(layer, position)`, with
/// pair-clustered bootstrap intervals and the full-residual reference.
pub fn layer_position_sweep(
    model: &Model,
    pairs: &[PromptPair],
    positions: &[Position],
    layers: &[usize],
    sampling: &SamplingConfig,
    bootstrap: &BootstrapConfig,
    lexicon: &PronunciationLexicon,
) -> Result<SweepResult> {
    sweep_grid(
        model,
        pairs,
        layers,
        positions,
        sampling,
        IntervalChoice::ClusterBootstrap(*bootstrap),
        lexicon,
        |l, p| {
            CellDescriptor::new(
                Intervention::Patch {
                    replacement: Replacement::Corrupt,
                },
                vec![HookSite::residual(l, p)],
            )
        },
        true,
    )
}

/// Patch every layer's residual at `position` at once; Wilson interval on
/// the pooled count.
pub fn all_layers_patch(
    model: &Model,
    pairs: &[PromptPair],
    position: Position,
    sampling: &SamplingConfig,
    confidence: f64,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    let sites: Vec<HookSite> = (0..model.spec().n_layers)
        .map(|l| HookSite::residual(l, position))
        .collect();
    run_patch_cell(
        model,
        pairs,
        &sites,
        sampling,
        IntervalChoice::Wilson { confidence },
        lexicon,
    )
}

/// Zero-vector or donor-prompt control over layers at one position, with
/// Wilson intervals on pooled counts.
pub fn baseline_patch(
    model: &Model,
    pairs: &[PromptPair],
    replacement: Replacement,
    position: Position,
    layers: &[usize],
    sampling: &SamplingConfig,
    confidence: f64,
    lexicon: &PronunciationLexicon,
) -> Result<SweepResult> {
    if matches!(replacement, Replacement::Corrupt | Replacement::Clean) {
        return Err(Error::Intervention(
            "baselines use zero or donor replacements".into(),
        ));
    }
    sweep_grid(
        model,
        pairs,
        layers,
        &[position],
        sampling,
        IntervalChoice::Wilson { confidence },
        lexicon,
        |l, p| {
            CellDescriptor::new(
                Intervention::Patch {
                    replacement: replacement.clone(),
                },
                vec![HookSite::residual(l, p)],
            )
        },
        false,
    )
}
