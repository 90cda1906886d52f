// SPDX-License-Identifier: MIT OR Apache-2.0

//! Append-only run records: a header line followed by one JSON line per
//! cell.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::backend::ModelSpec;
use crate::circuits::{HeadRanking, HeadSet};
use crate::error::{Error, Result};
use crate::interventions::CellResult;
use crate::probing::{ProbeCell, ProbeEval};

/// File name of the record inside a run directory.
pub const RECORD_FILE: &str = "record.jsonl";

/// Execution environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    /// Arithmetic precision.
    pub precision: String,
    /// Deterministic mode.
    pub deterministic: bool,
    /// Operating system.
    pub os: String,
    /// CPU architecture.
    pub arch: String,
}

impl Environment {
    /// The current process.
    pub fn current(deterministic: bool) -> Self {
        Self {
            precision: "f32".into(),
            deterministic,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// First line of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    /// [`ExperimentConfig::hash`].
    pub config_hash: String,
    /// Crate version that wrote the record.
    pub toolkit_version: String,
    /// Model shape, absent for model-free kinds.
    pub model: Option<ModelSpec>,
    /// Full configuration.
    pub config: ExperimentConfig,
    /// Environment.
    pub environment: Environment,
}

/// Whether a cell finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    /// Finished.
    Complete,
    /// Raised an error.
    Failed,
}

/// A probe or unigram-baseline evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCellResult {
    /// Grid cell.
    pub cell: ProbeCell,
    /// Unigram baseline instead of a trained probe.
    pub baseline: bool,
    /// Held-out evaluation.
    pub eval: ProbeEval,
    /// Training examples.
    pub train_examples: usize,
    /// Final epoch loss.
    pub final_loss: Option<f64>,
    /// Checkpoint path, relative to the run directory.
    pub checkpoint: Option<String>,
}

/// Summary of fitted steering vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringFit {
    /// Vector file, relative to the run directory.
    pub path: String,
    /// Scheme names.
    pub schemes: Vec<String>,
    /// Vectors written.
    pub n_vectors: usize,
}

/// What a cell produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "payload")]
pub enum CellPayload {
    /// A sampled intervention condition.
    Patch(Box<CellResult>),
    /// A probe evaluation.
    Probe(Box<ProbeCellResult>),
    /// Head ranking.
    Ranking(HeadRanking),
    /// MLP layers by clean-minus-corrupt output norm.
    MlpRanking {
        /// `(layer, score)`, best first.
        layers: Vec<(usize, f64)>,
    },
    /// A chosen head set.
    HeadSet(HeadSet),
    /// Steering vectors written.
    Steering(SteeringFit),
    /// Error text for a cell that could not produce anything.
    Error {
        /// Message.
        message: String,
    },
}

/// One cell line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    /// Unique within the record: `group/cell`.
    pub id: String,
    /// Series the cell belongs to.
    pub group: String,
    /// Completion status.
    pub status: CellStatus,
    /// Wall time.
    pub elapsed_ms: u64,
    /// Result.
    pub payload: CellPayload,
}

impl CellRecord {
    /// The intervention result, for patch cells.
    pub fn patch(&self) -> Option<&CellResult> {
        match &self.payload {
            CellPayload::Patch(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
enum Line {
    Header(Box<RunHeader>),
    Cell(Box<CellRecord>),
}

/// A parsed record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Header.
    pub header: RunHeader,
    /// Cells in write order. A resumed failed cell appears again later;
    /// [`RunRecord::latest`] picks the last attempt.
    pub cells: Vec<CellRecord>,
}

impl RunRecord {
    /// Parse a record file or the record inside a run directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = record_path(path.as_ref());
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut header = None;
        let mut cells = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| {
                Error::Record(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            match (parsed, i) {
                (Line::Header(h), 0) => header = Some(*h),
                (Line::Header(_), _) => {
                    return Err(Error::Record(format!(
                        "{} line {}: second header",
                        path.display(),
                        i + 1
                    )))
                }
                (Line::Cell(c), _) => cells.push(*c),
            }
        }
        let header = header
            .ok_or_else(|| Error::Record(format!("{}: missing header line", path.display())))?;
        Ok(Self { header, cells })
    }

    /// Serialized form, one JSON value per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header(Box::new(self.header.clone())))?;
        out.push('\n');
        for c in &self.cells {
            out.push_str(&serde_json::to_string(&Line::Cell(Box::new(c.clone())))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Last attempt of each cell, in first-seen order.
    pub fn latest(&self) -> Vec<&CellRecord> {
        let mut order: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !order.contains(&c.id.as_str()) {
                order.push(&c.id);
            }
        }
        order
            .into_iter()
            .map(|id| self.cells.iter().rev().find(|c| c.id == id).expect("present"))
            .collect()
    }

    /// Last attempt of a cell.
    pub fn cell(&self, id: &str) -> Option<&CellRecord> {
        self.cells.iter().rev().find(|c| c.id == id)
    }

    /// Ids whose last attempt completed.
    pub fn completed(&self) -> BTreeSet<String> {
        self.latest()
            .into_iter()
            .filter(|c| c.status == CellStatus::Complete)
            .map(|c| c.id.clone())
            .collect()
    }

    /// Cells whose last attempt failed.
    pub fn failed(&self) -> Vec<&CellRecord> {
        self.latest()
            .into_iter()
            .filter(|c| c.status == CellStatus::Failed)
            .collect()
    }

    /// Latest patch cells of `group`, in order.
    pub fn group(&self, group: &str) -> Vec<&CellRecord> {
        self.latest()
            .into_iter()
            .filter(|c| c.group == group)
            .collect()
    }

    /// Model id, or the configured id for model-free records.
    pub fn model_id(&self) -> &str {
        self.header
            .model
            .as_ref()
            .map_or(self.header.config.model.as_str(), |m| m.model_id.as_str())
    }
}

/// `path` itself when it is a file, else `path/record.jsonl`.
pub fn record_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RECORD_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Appends lines to a record, flushing after each.
#[derive(Debug)]
pub struct RecordWriter {
    path: PathBuf,
    file: File,
}

impl RecordWriter {
    /// Start a new record; fails if one exists.
    pub fn create(path: impl AsRef<Path>, header: &RunHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = Self { path, file };
        w.write_line(&Line::Header(Box::new(header.clone())))?;
        Ok(w)
    }

    /// Continue an existing record.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn write_line(&mut self, line: &Line) -> Result<()> {
        let mut s = serde_json::to_string(line)?;
        s.push('\n');
        self.file
            .write_all(s.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Append a cell.
    pub fn push(&mut self, cell: &CellRecord) -> Result<()> {
        self.write_line(&Line::Cell(Box::new(cell.clone())))
    }

    /// Record path.
    pub fn path(&self) -> &Path {
        &self.path
    }
}
