// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment execution, resumption and replay.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::record::{
    record_path, CellPayload, CellRecord, CellStatus, Environment, ProbeCellResult, RecordWriter,
    RunHeader, RunRecord, SteeringFit, RECORD_FILE,
};
use super::report;
use crate::backend::{load_model, Component, HookSite, Model, Position, TokenId};
use crate::circuits::{comma_control, random_control, rank_heads, rank_mlp_layers, HeadRanking, HeadSet};
use crate::corpus::{
    build_prompt_pairs, bundled_data_dir, load_couplets, load_pair_specs, sample_general_text,
    Couplet, PromptPair, Split,
};
use crate::error::{Error, Result};
use crate::interventions::{
    fit_steering_vectors, run_cell, schemes_from_couplets, steered_cell, CellDescriptor,
    CellResult, Intervention, IntervalChoice, Replacement, RhymeScheme, SteeringVector,
};
use crate::phonology::{load_pronouncing_lexicon, PronunciationLexicon};
use crate::probing::{
    build_couplet_dataset, build_lookahead_dataset, evaluate_probe, train_probe, unigram_eval,
    EvalOptions, ProbeCell, ProbeDataset, UnigramBaseline,
};

/// File holding fitted steering vectors inside a run directory.
pub const STEERING_FILE: &str = "steering_vectors.json";

/// Run-time switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue an existing record, skipping completed cells.
    pub resume: bool,
}

/// What a run did.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Record written, for experiment kinds.
    pub record_path: Option<PathBuf>,
    /// Figures and tables written, for reports.
    pub files: Vec<PathBuf>,
    /// Cells executed in this invocation.
    pub executed: usize,
    /// Completed cells skipped on resume.
    pub skipped: usize,
    /// Cells whose latest attempt failed.
    pub failed: usize,
}

impl RunOutcome {
    /// Nonzero iff any cell failed.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed > 0)
    }
}

/// Fitted vectors plus the schemes they connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringArtifact {
    /// Schemes, with their prompts.
    pub schemes: Vec<RhymeScheme>,
    /// Vectors for every ordered scheme pair and site.
    pub vectors: Vec<SteeringVector>,
}

impl SteeringArtifact {
    /// Read from JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Write as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Pronouncing lexicon named by the config, or the bundled one.
pub fn load_lexicon(config: &ExperimentConfig) -> Result<PronunciationLexicon> {
    match &config.data.lexicon {
        Some(p) => load_pronouncing_lexicon(p),
        None => Ok(PronunciationLexicon::bundled()),
    }
}

/// Prompt pairs named by the config, built for `model`'s tokenizer.
pub fn load_pairs(
    config: &ExperimentConfig,
    model: &Model,
    lexicon: &PronunciationLexicon,
) -> Result<Vec<PromptPair>> {
    let path = config
        .data
        .pairs
        .clone()
        .unwrap_or_else(|| bundled_data_dir().join("prompt_pairs.jsonl"));
    let built = build_prompt_pairs(&load_pair_specs(&path)?, lexicon, model.tokenizer());
    for reason in &built.rejected {
        tracing::warn!(%reason, "prompt pair rejected");
    }
    if built.pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable prompt pairs in {}",
            path.display()
        )));
    }
    Ok(built.pairs)
}

fn load_couplet_set(config: &ExperimentConfig, lexicon: &PronunciationLexicon) -> Result<Vec<Couplet>> {
    let path = config
        .data
        .couplets
        .clone()
        .unwrap_or_else(|| bundled_data_dir().join("couplets.jsonl"));
    Ok(load_couplets(path, lexicon)?.couplets)
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    model: Model,
    lexicon: PronunciationLexicon,
    run_dir: PathBuf,
    writer: RecordWriter,
    previous: Option<RunRecord>,
    done: BTreeSet<String>,
    executed: usize,
    skipped: usize,
}

impl Ctx<'_> {
    fn layers(&self) -> Result<Vec<usize>> {
        let n = self.model.spec().n_layers;
        let layers = self.config.axes.layers.clone().unwrap_or_else(|| (0..n).collect());
        let bad: Vec<String> = layers
            .iter()
            .filter(|&&l| l >= n)
            .map(|l| format!("axes.layers: layer {l} outside 0..{n}"))
            .collect();
        if bad.is_empty() {
            Ok(layers)
        } else {
            Err(Error::Config(bad))
        }
    }

    fn circuit_layers(&self) -> std::ops::Range<usize> {
        match self.config.circuits.layers {
            Some([a, b]) => a..b,
            None => 0..self.model.spec().n_layers,
        }
    }

    fn wilson(&self) -> IntervalChoice {
        IntervalChoice::Wilson {
            confidence: self.config.bootstrap.confidence,
        }
    }

    fn bootstrap(&self) -> IntervalChoice {
        IntervalChoice::ClusterBootstrap(self.config.bootstrap)
    }

    fn circuit_interval(&self) -> IntervalChoice {
        if self.config.circuits.bootstrap_intervals {
            self.bootstrap()
        } else {
            self.wilson()
        }
    }

    fn is_done(&self, group: &str, inner: &str) -> bool {
        self.done.contains(&format!("{group}/{inner}"))
    }

    /// Run one cell unless already complete; returns its payload either way.
    fn cell(
        &mut self,
        group: &str,
        inner: &str,
        f: impl FnOnce(&Self) -> Result<CellPayload>,
    ) -> Result<CellPayload> {
        let id = format!("{group}/{inner}");
        if self.done.contains(&id) {
            self.skipped += 1;
            let prev = self.previous.as_ref().and_then(|r| r.cell(&id)).expect("completed cell");
            return Ok(prev.payload.clone());
        }
        let start = Instant::now();
        let payload = f(self).unwrap_or_else(|e| {
            tracing::warn!(cell = %id, error = %e, "cell failed");
            CellPayload::Error {
                message: e.to_string(),
            }
        });
        let failed = match &payload {
            CellPayload::Error { .. } => true,
            CellPayload::Patch(c) => !c.is_complete(),
            _ => false,
        };
        let rec = CellRecord {
            id,
            group: group.to_string(),
            status: if failed {
                CellStatus::Failed
            } else {
                CellStatus::Complete
            },
            elapsed_ms: start.elapsed().as_millis() as u64,
            payload: payload.clone(),
        };
        self.writer.push(&rec)?;
        self.executed += 1;
        Ok(payload)
    }

    fn patch_cell(
        &mut self,
        group: &str,
        pairs: &[PromptPair],
        descriptor: CellDescriptor,
        interval: IntervalChoice,
    ) -> Result<CellPayload> {
        let inner = descriptor.id.clone();
        self.cell(group, &inner, |c| {
            let r = run_cell(
                &c.model,
                pairs,
                descriptor,
                &c.config.sampling,
                interval,
                &c.lexicon,
            )?;
            Ok(CellPayload::Patch(Box::new(r)))
        })
    }

    fn clean(&mut self, pairs: &[PromptPair], interval: IntervalChoice) -> Result<()> {
        let d = CellDescriptor::new(Intervention::Clean, Vec::new());
        self.patch_cell("clean", pairs, d, interval)?;
        Ok(())
    }

    fn reference(&mut self, pairs: &[PromptPair]) -> Result<()> {
        if let Some(l) = self.config.circuits.reference_layer {
            let d = corrupt_patch(vec![HookSite::residual(l, self.config.circuits.dest)]);
            let interval = self.circuit_interval();
            self.patch_cell("reference", pairs, d, interval)?;
        }
        Ok(())
    }

    fn ranking(&mut self, pairs: &[PromptPair]) -> Result<HeadRanking> {
        let layers = self.circuit_layers();
        let (q, k) = (self.config.circuits.query, self.config.circuits.key);
        match self.cell("ranking", "heads", |c| {
            Ok(CellPayload::Ranking(rank_heads(&c.model, pairs, layers, q, k)?))
        })? {
            CellPayload::Ranking(r) => Ok(r),
            CellPayload::Error { message } => {
                Err(Error::Intervention(format!("head ranking failed: {message}")))
            }
            _ => Err(Error::Record("ranking cell holds another payload".into())),
        }
    }
}

fn corrupt_patch(sites: Vec<HookSite>) -> CellDescriptor {
    CellDescriptor::new(
        Intervention::Patch {
            replacement: Replacement::Corrupt,
        },
        sites,
    )
}

fn header(config: &ExperimentConfig, model: Option<&Model>) -> RunHeader {
    RunHeader {
        config_hash: config.hash(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        model: model.map(|m| m.spec().clone()),
        config: config.clone(),
        environment: Environment::current(config.deterministic),
    }
}

/// Execute an experiment, writing `out_dir/record.jsonl`. Reports write
/// figures and tables instead.
pub fn run(config: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    if config.kind == ExperimentKind::Report {
        let files = report::render_from_config(config)?;
        return Ok(RunOutcome {
            record_path: None,
            files,
            executed: 0,
            skipped: 0,
            failed: 0,
        });
    }
    let model = load_model(&config.model)?;
    let lexicon = load_lexicon(config)?;
    let run_dir = config.out_dir.clone();
    let path = run_dir.join(RECORD_FILE);
    let (writer, previous) = if path.exists() {
        if !opts.resume {
            return Err(Error::Record(format!(
                "{} exists; resume it or choose another output directory",
                path.display()
            )));
        }
        let prev = RunRecord::load(&path)?;
        if prev.header.config_hash != config.hash() {
            return Err(Error::Record(format!(
                "{} was written by a different config (hash {}, expected {})",
                path.display(),
                prev.header.config_hash,
                config.hash()
            )));
        }
        (RecordWriter::append(&path)?, Some(prev))
    } else {
        (RecordWriter::create(&path, &header(config, Some(&model)))?, None)
    };
    let done = previous.as_ref().map(RunRecord::completed).unwrap_or_default();
    let mut ctx = Ctx {
        config,
        model,
        lexicon,
        run_dir,
        writer,
        previous,
        done,
        executed: 0,
        skipped: 0,
    };
    dispatch(&mut ctx)?;
    let failed = RunRecord::load(&path)?.failed().len();
    Ok(RunOutcome {
        record_path: Some(path),
        files: Vec::new(),
        executed: ctx.executed,
        skipped: ctx.skipped,
        failed,
    })
}

fn dispatch(ctx: &mut Ctx<'_>) -> Result<()> {
    use ExperimentKind as K;
    match ctx.config.kind {
        K::ProbePile => probe_pile(ctx),
        K::ProbeCouplets => probe_couplets(ctx),
        K::PatchSweep => patch_sweep(ctx),
        K::AllLayers => all_layers(ctx),
        K::Baselines => baselines(ctx),
        K::HeadRank => {
            let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
            ctx.ranking(&pairs).map(|_| ())
        }
        K::TopkHeads => topk_heads(ctx),
        K::PathPatch => path_patch(ctx),
        K::MlpControl => mlp_control(ctx),
        K::SteerFit => steer_fit(ctx).map(|_| ()),
        K::SteerSweep => steer_sweep(ctx),
        K::Report => unreachable!("handled before model load"),
    }
}

fn patch_sweep(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let layers = ctx.layers()?;
    let interval = ctx.bootstrap();
    ctx.clean(&pairs, interval)?;
    for &l in &layers {
        for &p in &ctx.config.axes.positions.clone() {
            ctx.patch_cell("sweep", &pairs, corrupt_patch(vec![HookSite::residual(l, p)]), interval)?;
        }
    }
    Ok(())
}

fn all_layers(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let n = ctx.model.spec().n_layers;
    let interval = ctx.wilson();
    ctx.clean(&pairs, interval)?;
    for &p in &ctx.config.axes.positions.clone() {
        let sites = (0..n).map(|l| HookSite::residual(l, p)).collect();
        ctx.patch_cell("all_layers", &pairs, corrupt_patch(sites), interval)?;
    }
    Ok(())
}

fn baselines(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let layers = ctx.layers()?;
    let interval = ctx.wilson();
    ctx.clean(&pairs, interval)?;
    let donor = Replacement::Donor {
        text: ctx.config.baselines.donor.clone(),
    };
    for (group, replacement) in [("baseline:zero", Replacement::Zero), ("baseline:donor", donor)] {
        for &l in &layers {
            for &p in &ctx.config.axes.positions.clone() {
                let d = CellDescriptor::new(
                    Intervention::Patch {
                        replacement: replacement.clone(),
                    },
                    vec![HookSite::residual(l, p)],
                );
                ctx.patch_cell(group, &pairs, d, interval)?;
            }
        }
    }
    Ok(())
}

fn topk_heads(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let ranking = ctx.ranking(&pairs)?;
    let interval = ctx.circuit_interval();
    ctx.clean(&pairs, interval)?;
    ctx.reference(&pairs)?;
    let dest = ctx.config.circuits.dest;
    for &k in &ctx.config.axes.ks.clone() {
        let set = ranking.top(k)?;
        ctx.patch_cell("topk", &pairs, corrupt_patch(set.sites(dest)), interval)?;
    }
    Ok(())
}

fn path_cell(ctx: &mut Ctx<'_>, group: &str, pairs: &[PromptPair], set: &HeadSet) -> Result<()> {
    let c = &ctx.config.circuits;
    let d = CellDescriptor::new(
        Intervention::PathPatch {
            source: c.source,
            stage1: c.stage1,
        },
        set.sites(c.dest),
    );
    let interval = ctx.circuit_interval();
    ctx.patch_cell(group, pairs, d, interval)?;
    Ok(())
}

fn path_patch(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let ranking = ctx.ranking(&pairs)?;
    let interval = ctx.circuit_interval();
    ctx.clean(&pairs, interval)?;
    ctx.reference(&pairs)?;
    let ks = ctx.config.axes.ks.clone();
    for &k in &ks {
        path_cell(ctx, "path:top", &pairs, &ranking.top(k)?)?;
    }
    for &seed in &ctx.config.circuits.random_seeds.clone() {
        let group = format!("path:random:{seed}");
        for &k in &ks {
            match random_control(&ranking, k, seed) {
                Ok(set) => path_cell(ctx, &group, &pairs, &set)?,
                Err(e) => {
                    ctx.cell(&group, &format!("k={k}"), |_| Err(e))?;
                }
            }
        }
    }
    if ctx.config.circuits.comma_control {
        let layers = ctx.circuit_layers();
        for &k in &ks {
            match comma_control(&ctx.model, &pairs, layers.clone(), k) {
                Ok(set) => path_cell(ctx, "path:comma", &pairs, &set)?,
                Err(e) => {
                    ctx.cell("path:comma", &format!("k={k}"), |_| Err(e))?;
                }
            }
        }
    }
    Ok(())
}

fn mlp_control(ctx: &mut Ctx<'_>) -> Result<()> {
    let pairs = load_pairs(ctx.config, &ctx.model, &ctx.lexicon)?;
    let layers = ctx.circuit_layers();
    let dest = ctx.config.circuits.dest;
    let ranked = match ctx.cell("ranking", "mlp", |c| {
        Ok(CellPayload::MlpRanking {
            layers: rank_mlp_layers(&c.model, &pairs, layers, dest)?,
        })
    })? {
        CellPayload::MlpRanking { layers } => layers,
        CellPayload::Error { message } => {
            return Err(Error::Intervention(format!("MLP ranking failed: {message}")))
        }
        _ => return Err(Error::Record("ranking cell holds another payload".into())),
    };
    let interval = ctx.wilson();
    ctx.clean(&pairs, interval)?;
    ctx.reference(&pairs)?;
    for &k in &ctx.config.axes.ks.clone() {
        if k > ranked.len() {
            tracing::warn!(k, ranked = ranked.len(), "skipping MLP control: k exceeds ranked layers");
            continue;
        }
        let sites = ranked[..k]
            .iter()
            .map(|&(l, _)| HookSite::new(l, dest, Component::MlpOutput))
            .collect();
        ctx.patch_cell("mlp", &pairs, corrupt_patch(sites), interval)?;
    }
    Ok(())
}

fn steering_sites(ctx: &Ctx<'_>) -> Result<Vec<HookSite>> {
    let layers = ctx.layers()?;
    Ok(layers
        .iter()
        .flat_map(|&l| {
            ctx.config
                .axes
                .positions
                .iter()
                .map(move |&p| HookSite::residual(l, p))
        })
        .collect())
}

fn fit_artifact(ctx: &Ctx<'_>) -> Result<SteeringArtifact> {
    let couplets = load_couplet_set(ctx.config, &ctx.lexicon)?;
    let s = &ctx.config.steering;
    let schemes = schemes_from_couplets(
        &couplets,
        &ctx.lexicon,
        s.n_schemes,
        s.max_train,
        s.max_heldout,
        &ctx.config.data.preamble,
    )?;
    let vectors = fit_steering_vectors(&ctx.model, &schemes, &steering_sites(ctx)?)?;
    Ok(SteeringArtifact { schemes, vectors })
}

fn steer_fit(ctx: &mut Ctx<'_>) -> Result<CellPayload> {
    let out = ctx.run_dir.join(STEERING_FILE);
    ctx.cell("steering", "fit", |c| {
        let art = fit_artifact(c)?;
        art.save(&out)?;
        Ok(CellPayload::Steering(SteeringFit {
            path: STEERING_FILE.into(),
            schemes: art.schemes.iter().map(|s| s.name.clone()).collect(),
            n_vectors: art.vectors.len(),
        }))
    })
}

fn steer_sweep(ctx: &mut Ctx<'_>) -> Result<()> {
    let local = ctx.run_dir.join(STEERING_FILE);
    let art = match &ctx.config.steering.vectors {
        Some(p) => {
            let art = SteeringArtifact::load(p)?;
            if !local.exists() {
                art.save(&local)?;
            }
            art
        }
        None => {
            if let CellPayload::Error { message } = steer_fit(ctx)? {
                return Err(Error::Intervention(format!("steering fit failed: {message}")));
            }
            SteeringArtifact::load(&local)?
        }
    };
    let alpha = ctx.config.steering.alpha;
    let interval = ctx.bootstrap();
    let sites = steering_sites(ctx)?;
    if let Some(&first) = sites.first() {
        run_steer_cell(ctx, "steer:unsteered", &art, 0.0, first, interval)?;
    }
    for site in sites {
        run_steer_cell(ctx, "steer", &art, alpha, site, interval)?;
    }
    Ok(())
}

fn run_steer_cell(
    ctx: &mut Ctx<'_>,
    group: &str,
    art: &SteeringArtifact,
    alpha: f32,
    site: HookSite,
    interval: IntervalChoice,
) -> Result<()> {
    ctx.cell(group, &format!("steer[{alpha}]:{site}"), |c| {
        let r = steered_cell(
            &c.model,
            &art.schemes,
            &art.vectors,
            alpha,
            site,
            &c.config.sampling,
            interval,
            &c.lexicon,
        )?;
        Ok(CellPayload::Patch(Box::new(r)))
    })?;
    Ok(())
}

fn eval_options(config: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        policy: config.probe.policy,
        reference: config.probe.reference,
        confidence: config.probe.confidence,
        ..EvalOptions::default()
    }
}

fn probe_cell_id(cell: &ProbeCell) -> String {
    cell.to_string()
}

fn train_and_eval(ctx: &mut Ctx<'_>, dataset: &ProbeDataset) -> Result<()> {
    let id = probe_cell_id(&dataset.cell);
    let ckpt_rel = format!(
        "probes/{}.safetensors",
        id.replace('/', "_").replace('=', "")
    );
    ctx.cell("probe", &id, |c| {
        let mut probe = train_probe(
            dataset,
            c.model.spec().vocab_size,
            &c.config.probe.hyperparams,
        )?;
        probe.meta.cell = Some(dataset.cell);
        probe.meta.model_id = Some(c.model.spec().model_id.clone());
        let checkpoint = if c.config.probe.save_probes {
            let path = c.run_dir.join(&ckpt_rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            probe.save(&path)?;
            Some(ckpt_rel.clone())
        } else {
            None
        };
        let eval = evaluate_probe(
            &probe,
            dataset,
            c.model.tokenizer(),
            &c.lexicon,
            &eval_options(c.config),
        )?;
        Ok(CellPayload::Probe(Box::new(ProbeCellResult {
            cell: dataset.cell,
            baseline: false,
            eval,
            train_examples: probe.meta.train_examples,
            final_loss: probe.meta.final_loss(),
            checkpoint,
        })))
    })?;
    Ok(())
}

fn unigram_cell(
    ctx: &mut Ctx<'_>,
    inner: &str,
    baseline: &Result<UnigramBaseline>,
    dataset: &ProbeDataset,
) -> Result<()> {
    ctx.cell("unigram", inner, |c| {
        let b = baseline
            .as_ref()
            .map_err(|e| Error::Probe(format!("unigram baseline unavailable: {e}")))?;
        let eval = unigram_eval(b, dataset, c.model.tokenizer(), &c.lexicon, &eval_options(c.config))?;
        Ok(CellPayload::Probe(Box::new(ProbeCellResult {
            cell: dataset.cell,
            baseline: true,
            eval,
            train_examples: dataset.split(Split::Train).count(),
            final_loss: None,
            checkpoint: None,
        })))
    })?;
    Ok(())
}

fn probe_pile(ctx: &mut Ctx<'_>) -> Result<()> {
    let layers = ctx.layers()?;
    let ks = ctx.config.probe.lookahead.clone();
    let all_done = layers.iter().all(|&l| {
        ks.iter()
            .all(|&k| ctx.is_done("probe", &ProbeCell::Lookahead { layer: l, k }.to_string()))
    }) && ks.iter().all(|k| ctx.is_done("unigram", &format!("k={k}")));
    if all_done {
        ctx.skipped += layers.len() * ks.len() + ks.len();
        return Ok(());
    }
    let corpus = ctx
        .config
        .data
        .general_text
        .clone()
        .unwrap_or_else(|| bundled_data_dir().join("general_text.jsonl"));
    let samples = sample_general_text(
        corpus,
        ctx.config.probe.n_documents,
        ctx.config.probe.length,
        ctx.config.probe.hyperparams.seed,
        ctx.model.tokenizer(),
    )?;
    let built = build_lookahead_dataset(&ctx.model, &samples, &layers, &ks, ctx.config.probe.new_tokens)?;
    for d in &built.datasets {
        train_and_eval(ctx, d)?;
    }
    let baseline = UnigramBaseline::fit(
        built
            .completions
            .iter()
            .filter(|c| c.split == Split::Train)
            .map(|c| c.generated()),
    );
    for &k in &ks {
        if let Some(d) = built
            .datasets
            .iter()
            .find(|d| matches!(d.cell, ProbeCell::Lookahead { k: dk, .. } if dk == k))
        {
            unigram_cell(ctx, &format!("k={k}"), &baseline, d)?;
        }
    }
    Ok(())
}

fn probe_couplets(ctx: &mut Ctx<'_>) -> Result<()> {
    let layers = ctx.layers()?;
    let positions = ctx.config.axes.positions.clone();
    let all_done = layers.iter().all(|&l| {
        positions.iter().all(|&p| {
            ctx.is_done("probe", &ProbeCell::Couplet { layer: l, position: p }.to_string())
        })
    }) && positions.iter().all(|p| ctx.is_done("unigram", &format!("i={p}")));
    if all_done {
        ctx.skipped += layers.len() * positions.len() + positions.len();
        return Ok(());
    }
    let couplets = load_couplet_set(ctx.config, &ctx.lexicon)?;
    let refs: Vec<&Couplet> = couplets.iter().collect();
    let built = build_couplet_dataset(
        &ctx.model,
        &refs,
        &layers,
        &positions,
        &ctx.config.data.preamble,
        ctx.config.probe.max_new_tokens,
    )?;
    if !built.excluded.is_empty() {
        tracing::info!(excluded = built.excluded.len(), "couplets excluded from probing");
    }
    for d in &built.datasets {
        train_and_eval(ctx, d)?;
    }
    let labels: Vec<[TokenId; 1]> = built
        .completions
        .iter()
        .filter(|c| c.split == Split::Train)
        .map(|c| [c.label()])
        .collect();
    let baseline = UnigramBaseline::fit(labels.iter().map(|l| &l[..]));
    for &p in &positions {
        if let Some(d) = built
            .datasets
            .iter()
            .find(|d| matches!(d.cell, ProbeCell::Couplet { position, .. } if position == p))
        {
            unigram_cell(ctx, &format!("i={p}"), &baseline, d)?;
        }
    }
    Ok(())
}

/// A replayed cell next to its recorded result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    /// Stored result.
    pub original: CellResult,
    /// Recomputed result.
    pub replayed: CellResult,
    /// Bit-identical, transcripts included.
    pub identical: bool,
    /// The replayed rate lies inside the stored interval.
    pub within_interval: bool,
    /// The record demanded determinism.
    pub deterministic: bool,
}

/// Recompute a recorded intervention cell. In deterministic mode a mismatch
/// is an error; otherwise it is reported through `within_interval`.
pub fn replay(record: impl AsRef<Path>, cell_id: &str) -> Result<ReplayOutcome> {
    let path = record_path(record.as_ref());
    let rec = RunRecord::load(&path)?;
    let run_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cell = rec.cell(cell_id).ok_or_else(|| {
        Error::Record(format!("no cell {cell_id:?} in {}", path.display()))
    })?;
    let original = cell.patch().cloned().ok_or_else(|| {
        Error::Record(format!(
            "cell {cell_id:?} has no intervention provenance (descriptor, sampling, interval); only sampled cells replay"
        ))
    })?;
    let recorded_spec = rec
        .header
        .model
        .as_ref()
        .ok_or_else(|| Error::Record("record header lacks the model spec".into()))?;
    let config = &rec.header.config;
    let model = load_model(&config.model)?;
    if model.spec() != recorded_spec {
        return Err(Error::Record(format!(
            "model {} no longer matches the recorded spec",
            config.model
        )));
    }
    let lexicon = load_lexicon(config)?;
    let d = original.descriptor.clone();
    let replayed = match &d.intervention {
        Intervention::Steer { alpha, vectors } => {
            let art = SteeringArtifact::load(run_dir.join(STEERING_FILE))?;
            let site = *d
                .sites
                .first()
                .ok_or_else(|| Error::Record("steering cell lacks its site".into()))?;
            let r = steered_cell(
                &model,
                &art.schemes,
                &art.vectors,
                *alpha,
                site,
                &original.sampling,
                original.interval_choice,
                &lexicon,
            )?;
            if let Intervention::Steer { vectors: now, .. } = &r.descriptor.intervention {
                if now != vectors {
                    return Err(Error::Record(format!(
                        "steering vectors changed since the run (hash {now}, recorded {vectors})"
                    )));
                }
            }
            r
        }
        _ => {
            let pairs = load_pairs(config, &model, &lexicon)?;
            run_cell(
                &model,
                &pairs,
                d,
                &original.sampling,
                original.interval_choice,
                &lexicon,
            )?
        }
    };
    let identical = replayed == original;
    let within_interval = original
        .interval
        .as_ref()
        .is_some_and(|i| i.contains(replayed.rate));
    let deterministic = rec.header.environment.deterministic;
    if deterministic && !identical && original.is_complete() {
        return Err(Error::Record(format!(
            "replay of {cell_id:?} differs from the record (rate {} vs {})",
            replayed.rate, original.rate
        )));
    }
    if !deterministic && !identical {
        tracing::info!(
            cell = cell_id,
            within_interval,
            "replay differs from the record (deterministic mode off)"
        );
    }
    Ok(ReplayOutcome {
        original,
        replayed,
        identical,
        within_interval,
        deterministic,
    })
}

/// Sweep axes recovered from a record's patch cells.
pub(crate) fn sweep_sites(cell: &CellResult) -> Option<(usize, Position)> {
    match cell.descriptor.sites.as_slice() {
        [s] if s.component == Component::ResidualPostBlock => Some((s.layer, s.position)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(kind);
        c.out_dir = dir.to_path_buf();
        c.axes.layers = Some(vec![1, 4]);
        c.sampling.n_samples = 2;
        c.bootstrap.resamples = 200;
        c
    }

    #[test]
    fn patch_sweep_shape_resume_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(ExperimentKind::PatchSweep, dir.path());
        let out = run(&c, RunOptions::default()).unwrap();
        assert_eq!(out.executed, 5);
        let rec = RunRecord::load(dir.path()).unwrap();
        assert_eq!(rec.group("sweep").len(), 4);
        let bytes = std::fs::read(dir.path().join(RECORD_FILE)).unwrap();
        assert!(run(&c, RunOptions::default()).is_err());
        let again = run(&c, RunOptions { resume: true }).unwrap();
        assert_eq!((again.executed, again.skipped), (0, 5));
        assert_eq!(bytes, std::fs::read(dir.path().join(RECORD_FILE)).unwrap());
        let id = &rec.group("sweep")[0].id;
        let r = replay(dir.path(), id).unwrap();
        assert!(r.identical);
        let mut other = c.clone();
        other.sampling.n_samples = 3;
        assert!(run(&other, RunOptions { resume: true }).is_err());
    }

    #[test]
    fn missing_pairs_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ExperimentKind::PatchSweep, dir.path());
        c.data.pairs = Some(dir.path().join("missing.jsonl"));
        assert!(matches!(run(&c, RunOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn path_patch_records_comma_failure_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(ExperimentKind::PathPatch, dir.path());
        c.axes.ks = vec![0, 2];
        c.circuits.layers = Some([0, 4]);
        c.circuits.comma_control = true;
        c.sampling.n_samples = 1;
        let out = run(&c, RunOptions::default()).unwrap();
        assert_eq!(out.failed, 2);
        assert_eq!(out.exit_code(), 1);
        let rec = RunRecord::load(dir.path()).unwrap();
        assert_eq!(rec.group("path:top").len(), 2);
        assert_eq!(rec.group("path:random:0").len(), 2);
        assert!(rec.failed().iter().all(|c| c.group == "path:comma"));
    }
}
