// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backend::Position;
use crate::corpus::{LengthBounds, DEFAULT_PREAMBLE};
use crate::error::{Error, Result};
use crate::interventions::{SamplingConfig, Stage1Mode, DEFAULT_DONOR};
use crate::phonology::IdenticalWordPolicy;
use crate::probing::{ProbeHyperparams, RhymeReference};
use crate::stats::BootstrapConfig;

/// Experiment kinds, one per CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// k-token-ahead probes on general text.
    ProbePile,
    /// Second-line rhyme probes on couplets.
    ProbeCouplets,
    /// Single-site residual patching over layers × positions.
    PatchSweep,
    /// Every layer patched at once, per position.
    AllLayers,
    /// Zero-vector and donor-prompt controls.
    Baselines,
    /// Attention-weight head ranking.
    HeadRank,
    /// Simultaneous top-k head patching.
    TopkHeads,
    /// Two-stage path patching with control sets.
    PathPatch,
    /// Top-k MLP output patching.
    MlpControl,
    /// Fit steering vectors.
    SteerFit,
    /// Steered generation over layers × positions.
    SteerSweep,
    /// Figures and tables from existing records.
    Report,
}

impl ExperimentKind {
    /// Every kind, in CLI order.
    pub const ALL: [Self; 12] = [
        Self::ProbePile,
        Self::ProbeCouplets,
        Self::PatchSweep,
        Self::AllLayers,
        Self::Baselines,
        Self::HeadRank,
        Self::TopkHeads,
        Self::PathPatch,
        Self::MlpControl,
        Self::SteerFit,
        Self::SteerSweep,
        Self::Report,
    ];

    /// Snake-case name.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ProbePile => "probe_pile",
            Self::ProbeCouplets => "probe_couplets",
            Self::PatchSweep => "patch_sweep",
            Self::AllLayers => "all_layers",
            Self::Baselines => "baselines",
            Self::HeadRank => "head_rank",
            Self::TopkHeads => "topk_heads",
            Self::PathPatch => "path_patch",
            Self::MlpControl => "mlp_control",
            Self::SteerFit => "steer_fit",
            Self::SteerSweep => "steer_sweep",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(vec![format!("kind: unknown experiment kind {s:?}")]))
    }
}

/// Input data locations. Unset paths use the bundled fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Prompt-pair specs (JSONL).
    pub pairs: Option<PathBuf>,
    /// Couplet corpus (JSONL).
    pub couplets: Option<PathBuf>,
    /// General-text corpus (JSONL with `id` and `text`).
    pub general_text: Option<PathBuf>,
    /// Pronouncing dictionary in cmudict format.
    pub lexicon: Option<PathBuf>,
    /// Text placed before the first line of every couplet prompt.
    pub preamble: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: None,
            couplets: None,
            general_text: None,
            lexicon: None,
            preamble: DEFAULT_PREAMBLE.to_string(),
        }
    }
}

/// Sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxesConfig {
    /// Layers; every layer when unset.
    pub layers: Option<Vec<usize>>,
    /// Positions.
    pub positions: Vec<Position>,
    /// Set sizes for k-sweeps.
    pub ks: Vec<usize>,
}

impl Default for AxesConfig {
    fn default() -> Self {
        Self {
            layers: None,
            positions: vec![Position::LastWord, Position::NEWLINE],
            ks: vec![0, 1, 2, 3, 5, 10],
        }
    }
}

/// Probe experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Optimizer settings.
    pub hyperparams: ProbeHyperparams,
    /// General-text documents sampled.
    pub n_documents: usize,
    /// Document length window.
    pub length: LengthBounds,
    /// Lookahead distances.
    pub lookahead: Vec<usize>,
    /// Greedy tokens generated past each general-text prefix.
    pub new_tokens: usize,
    /// Token budget for a couplet's second line.
    pub max_new_tokens: usize,
    /// Interval confidence.
    pub confidence: f64,
    /// Rhyme reference word.
    pub reference: RhymeReference,
    /// Identical-word handling.
    pub policy: IdenticalWordPolicy,
    /// Write probe checkpoints next to the record.
    pub save_probes: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hyperparams: ProbeHyperparams::default(),
            n_documents: 600,
            length: LengthBounds::default(),
            lookahead: vec![1, 2, 4, 8],
            new_tokens: 8,
            max_new_tokens: 24,
            confidence: 0.95,
            reference: RhymeReference::default(),
            policy: IdenticalWordPolicy::CountIdentical,
            save_probes: true,
        }
    }
}

/// Head and MLP localization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircuitsConfig {
    /// Layer range `[start, end)` for ranking; every layer when unset.
    pub layers: Option<[usize; 2]>,
    /// Ranking query position.
    pub query: Position,
    /// Ranking key position.
    pub key: Position,
    /// Path-patching source position.
    pub source: Position,
    /// Head-output position patched.
    pub dest: Position,
    /// Stage-1 corruption mode.
    pub stage1: Stage1Mode,
    /// Seeds for random control sets.
    pub random_seeds: Vec<u64>,
    /// Also run the comma control set.
    pub comma_control: bool,
    /// Layer of the full-residual reference cell at `dest`.
    pub reference_layer: Option<usize>,
    /// Use cluster-bootstrap intervals (Wilson otherwise).
    pub bootstrap_intervals: bool,
}

impl Default for CircuitsConfig {
    fn default() -> Self {
        Self {
            layers: None,
            query: Position::NEWLINE,
            key: Position::LastWord,
            source: Position::LastWord,
            dest: Position::NEWLINE,
            stage1: Stage1Mode::FullColumn,
            random_seeds: vec![0],
            comma_control: false,
            reference_layer: None,
            bootstrap_intervals: true,
        }
    }
}

/// Control baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Donor text.
    pub donor: String,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            donor: DEFAULT_DONOR.to_string(),
        }
    }
}

/// Steering settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    /// Rhyme schemes used.
    pub n_schemes: usize,
    /// Training prompts per scheme.
    pub max_train: usize,
    /// Held-out prompts per scheme.
    pub max_heldout: usize,
    /// Gain.
    pub alpha: f32,
    /// Previously fitted vectors; fitted inline when unset.
    pub vectors: Option<PathBuf>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            n_schemes: 4,
            max_train: 20,
            max_heldout: 5,
            alpha: 1.0,
            vectors: None,
        }
    }
}

/// Which figures a report renders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigureKind {
    /// Everything each record supports.
    #[default]
    Auto,
    /// Per-layer sweep lines with interval bands (one model).
    Sweep,
    /// Probe accuracy curves (one model).
    Probe,
    /// Head-score heatmap with top-5 markers (one model).
    Heads,
    /// k-sweep curves with the reference band (one model).
    KSweep,
    /// All-layers table across models.
    Table,
    /// Peak-rate bars across models.
    Summary,
}

/// Report inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Record files or run directories.
    pub records: Vec<PathBuf>,
    /// Figures wanted.
    pub figure: FigureKind,
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// What to run.
    pub kind: ExperimentKind,
    /// Model id (toy name, hub id or directory).
    #[serde(default = "default_model")]
    pub model: String,
    /// Output directory; excluded from the config hash.
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Require bit-identical replays.
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Inputs.
    #[serde(default)]
    pub data: DataConfig,
    /// Axes.
    #[serde(default)]
    pub axes: AxesConfig,
    /// Sampling for causal experiments.
    #[serde(default)]
    pub sampling: SamplingConfig,
    /// Bootstrap settings; its confidence also sets Wilson intervals.
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    /// Probing.
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Circuits.
    #[serde(default)]
    pub circuits: CircuitsConfig,
    /// Baselines.
    #[serde(default)]
    pub baselines: BaselineConfig,
    /// Steering.
    #[serde(default)]
    pub steering: SteeringConfig,
    /// Reporting.
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_model() -> String {
    "toy-qwen".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!(
            "[{}]",
            a.iter().map(canonical).collect::<Vec<_>>().join(",")
        ),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            model: default_model(),
            out_dir: default_out(),
            deterministic: true,
            data: DataConfig::default(),
            axes: AxesConfig::default(),
            sampling: SamplingConfig::default(),
            bootstrap: BootstrapConfig::default(),
            probe: ProbeConfig::default(),
            circuits: CircuitsConfig::default(),
            baselines: BaselineConfig::default(),
            steering: SteeringConfig::default(),
            report: ReportConfig::default(),
        }
    }

    /// Parse TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Read a TOML file. Relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
        };
        fix(&mut self.data.pairs);
        fix(&mut self.data.couplets);
        fix(&mut self.data.general_text);
        fix(&mut self.data.lexicon);
        fix(&mut self.steering.vectors);
        for r in &mut self.report.records {
            if r.is_relative() {
                *r = dir.join(&*r);
            }
        }
    }

    /// TOML text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Set every seed (sampling, bootstrap, probe training and data draws).
    #[must_use]
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.base_seed = seed;
        self.bootstrap.seed = seed;
        self.probe.hyperparams.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON form, ignoring `out_dir`. Invariant to
    /// key order in the source file.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        hex::encode(Sha256::digest(canonical(&v).as_bytes()))
    }

    /// Check kind-specific requirements, listing every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let must_exist = |bad: &mut Vec<String>, field: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                if !p.is_file() {
                    bad.push(format!("{field}: file not found: {}", p.display()));
                }
            }
        };
        must_exist(&mut bad, "data.pairs", &self.data.pairs);
        must_exist(&mut bad, "data.couplets", &self.data.couplets);
        must_exist(&mut bad, "data.general_text", &self.data.general_text);
        must_exist(&mut bad, "data.lexicon", &self.data.lexicon);
        use ExperimentKind as K;
        let causal = matches!(
            self.kind,
            K::PatchSweep
                | K::AllLayers
                | K::Baselines
                | K::TopkHeads
                | K::PathPatch
                | K::MlpControl
                | K::SteerSweep
        );
        if causal {
            if self.sampling.n_samples == 0 {
                bad.push("sampling.n_samples: must be at least 1".into());
            }
            if let Err(e) = self.sampling.decode.validate() {
                bad.push(format!("sampling.decode: {e}"));
            }
            if !(self.bootstrap.confidence > 0.0 && self.bootstrap.confidence < 1.0) {
                bad.push("bootstrap.confidence: must lie in (0, 1)".into());
            }
            if self.bootstrap.resamples == 0 {
                bad.push("bootstrap.resamples: must be at least 1".into());
            }
        }
        if matches!(
            self.kind,
            K::PatchSweep | K::AllLayers | K::Baselines | K::SteerFit | K::SteerSweep | K::ProbeCouplets
        ) && self.axes.positions.is_empty()
        {
            bad.push("axes.positions: at least one position required".into());
        }
        if matches!(self.kind, K::TopkHeads | K::PathPatch | K::MlpControl) && self.axes.ks.is_empty() {
            bad.push("axes.ks: at least one k required".into());
        }
        if let Some(l) = &self.axes.layers {
            if l.is_empty() {
                bad.push("axes.layers: empty list (omit it for every layer)".into());
            }
        }
        if let Some([a, b]) = self.circuits.layers {
            if a >= b {
                bad.push(format!("circuits.layers: empty range [{a}, {b})"));
            }
        }
        if self.kind == K::ProbePile {
            if self.probe.lookahead.is_empty() {
                bad.push("probe.lookahead: at least one distance required".into());
            }
            if self.probe.lookahead.iter().any(|&k| k == 0 || k > self.probe.new_tokens) {
                bad.push(format!(
                    "probe.lookahead: distances must lie in 1..={}",
                    self.probe.new_tokens
                ));
            }
        }
        if matches!(self.kind, K::ProbePile | K::ProbeCouplets) && self.probe.hyperparams.epochs == 0 {
            bad.push("probe.hyperparams.epochs: must be at least 1".into());
        }
        if matches!(self.kind, K::SteerFit | K::SteerSweep) && self.steering.n_schemes < 2 {
            bad.push("steering.n_schemes: at least two schemes required".into());
        }
        if self.kind == K::SteerSweep && !self.steering.alpha.is_finite() {
            bad.push("steering.alpha: must be finite".into());
        }
        must_exist(&mut bad, "steering.vectors", &self.steering.vectors);
        if self.kind == K::Report {
            if self.report.records.is_empty() {
                bad.push("report.records: at least one record required".into());
            }
            for r in &self.report.records {
                if !r.exists() {
                    bad.push(format!("report.records: not found: {}", r.display()));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_out_dir() {
        let a = ExperimentConfig::from_toml(
            "kind = \"patch_sweep\"\nmodel = \"toy-qwen\"\n[sampling]\nn_samples = 5\nbase_seed = 2\n",
        )
        .unwrap();
        let b = ExperimentConfig::from_toml(
            "out_dir = \"elsewhere\"\n[sampling]\nbase_seed = 2\nn_samples = 5\n",
        );
        assert!(b.is_err(), "kind is required");
        let b = ExperimentConfig::from_toml(
            "model = \"toy-qwen\"\nkind = \"patch_sweep\"\nout_dir = \"elsewhere\"\n[sampling]\nbase_seed = 2\nn_samples = 5\n",
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = b.clone();
        c.sampling.n_samples = 6;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::new(ExperimentKind::PathPatch);
        c.axes.layers = Some(vec![1, 2]);
        c.circuits.layers = Some([0, 4]);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut c = ExperimentConfig::new(ExperimentKind::PatchSweep);
        c.data.pairs = Some("/nonexistent/pairs.jsonl".into());
        c.sampling.n_samples = 0;
        c.axes.positions.clear();
        let Err(Error::Config(msgs)) = c.validate() else {
            panic!("expected a config error")
        };
        assert_eq!(msgs.len(), 3, "{msgs:?}");
        assert!(msgs[0].starts_with("data.pairs"));
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        assert!(ExperimentConfig::from_toml("kind = \"patch_sweep\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"nope\"\n").is_err());
        assert_eq!("patch-sweep".parse::<ExperimentKind>().unwrap(), ExperimentKind::PatchSweep);
    }
}
