// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end over `plansite::runner`.
//!
//! Synthesizing couplets through an external provider reads its API key from
//! `PLANSITE_PROVIDER_API_KEY`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plansite::runner::{self, ExperimentConfig, ExperimentKind, FigureKind, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "plansite", version, about = "Locate latent planning sites in decoder transformers")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for sampling, bootstrap and probe training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Deterministic mode (replay asserts equality). Pass `false` to relax.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue an existing record, skipping completed cells.
    #[arg(long, global = true)]
    resume: bool,
    /// Model id (toy name or local checkpoint directory).
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Look-ahead probes on general text.
    ProbePile,
    /// Rhyme-token probes on couplet prompts.
    ProbeCouplets,
    /// Per-layer, per-position residual patching.
    PatchSweep,
    /// Patch every layer at once.
    AllLayers,
    /// Zero and donor-prompt control patches.
    Baselines,
    /// Rank heads by attention from the newline to the rhyme word.
    HeadRank,
    /// Patch the top-k ranked heads.
    TopkHeads,
    /// Two-stage path patching through head sets.
    PathPatch,
    /// Patch the top-k MLP outputs.
    MlpControl,
    /// Fit rhyme-scheme steering vectors.
    SteerFit,
    /// Add steering vectors across layers and positions.
    SteerSweep,
    /// Render figures and tables from records.
    Report {
        /// Record files or run directories.
        records: Vec<PathBuf>,
        /// Figure kind.
        #[arg(long, value_enum)]
        figure: Option<Figure>,
    },
    /// Recompute one recorded cell.
    Replay {
        /// Record file or run directory.
        record: PathBuf,
        /// Cell id, `group/cell`.
        cell: String,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Figure {
    Auto,
    Sweep,
    Probe,
    Heads,
    KSweep,
    Table,
    Summary,
}

impl From<Figure> for FigureKind {
    fn from(f: Figure) -> Self {
        match f {
            Figure::Auto => Self::Auto,
            Figure::Sweep => Self::Sweep,
            Figure::Probe => Self::Probe,
            Figure::Heads => Self::Heads,
            Figure::KSweep => Self::KSweep,
            Figure::Table => Self::Table,
            Figure::Summary => Self::Summary,
        }
    }
}

fn kind_of(c: &Command) -> Option<ExperimentKind> {
    use ExperimentKind as K;
    Some(match c {
        Command::ProbePile => K::ProbePile,
        Command::ProbeCouplets => K::ProbeCouplets,
        Command::PatchSweep => K::PatchSweep,
        Command::AllLayers => K::AllLayers,
        Command::Baselines => K::Baselines,
        Command::HeadRank => K::HeadRank,
        Command::TopkHeads => K::TopkHeads,
        Command::PathPatch => K::PathPatch,
        Command::MlpControl => K::MlpControl,
        Command::SteerFit => K::SteerFit,
        Command::SteerSweep => K::SteerSweep,
        Command::Report { .. } => K::Report,
        Command::Replay { .. } => return None,
    })
}

fn build_config(cli: &Cli, kind: ExperimentKind) -> plansite::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            if c.kind != kind {
                return Err(plansite::Error::Config(vec![format!(
                    "kind: config declares {} but the {} subcommand was given",
                    c.kind, kind
                )]));
            }
            c
        }
        None => ExperimentConfig::new(kind),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(d) = cli.deterministic {
        config.deterministic = d;
    }
    if let Some(out) = &cli.out {
        config.out_dir.clone_from(out);
    }
    if let Some(m) = &cli.model {
        config.model.clone_from(m);
    }
    if let Command::Report { records, figure } = &cli.command {
        config.report.records.extend(records.iter().cloned());
        if let Some(f) = figure {
            config.report.figure = (*f).into();
        }
    }
    Ok(config)
}

fn execute(cli: &Cli) -> plansite::Result<ExitCode> {
    if let Command::Replay { record, cell } = &cli.command {
        let r = runner::replay(record, cell)?;
        println!(
            "{cell}: recorded {:.4}, replayed {:.4}, identical {}, within interval {}",
            r.original.rate, r.replayed.rate, r.identical, r.within_interval
        );
        return Ok(ExitCode::from(u8::from(!r.replayed.is_complete())));
    }
    let kind = kind_of(&cli.command).expect("experiment subcommand");
    let config = build_config(cli, kind)?;
    let outcome = runner::run(&config, RunOptions { resume: cli.resume })?;
    if let Some(p) = &outcome.record_path {
        println!(
            "{}: {} executed, {} skipped, {} failed",
            p.display(),
            outcome.executed,
            outcome.skipped,
            outcome.failed
        );
    }
    for f in &outcome.files {
        println!("{}", f.display());
    }
    Ok(ExitCode::from(outcome.exit_code() as u8))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(plansite::Error::Config(fields)) => {
            eprintln!("invalid config:");
            for f in fields {
                eprintln!("  {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
