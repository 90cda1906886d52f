// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiments: execution, append-only records, resume,
//! replay and reports.

mod config;
mod exec;
mod record;
pub mod report;

pub use config::{
    AxesConfig, BaselineConfig, CircuitsConfig, DataConfig, ExperimentConfig, ExperimentKind,
    FigureKind, ProbeConfig, ReportConfig, SteeringConfig,
};
pub use exec::{
    load_lexicon, load_pairs, replay, run, ReplayOutcome, RunOptions, RunOutcome,
    SteeringArtifact, STEERING_FILE,
};
pub use report::render as render_from_records;
pub use record::{
    record_path, CellPayload, CellRecord, CellStatus, Environment, ProbeCellResult,
    RecordWriter, RunHeader, RunRecord, SteeringFit, RECORD_FILE,
};
