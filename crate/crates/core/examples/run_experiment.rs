// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven run with a record, resume, replay and report.
//!
//! `cargo run --example run_experiment -- path/to/config.toml`

use plansite::runner::{render_from_records, replay, run, ExperimentConfig, ExperimentKind, FigureKind, RunOptions, RunRecord};

fn main() -> plansite::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::new(ExperimentKind::PatchSweep);
            c.out_dir = std::env::temp_dir().join(format!("plansite-run-{}", std::process::id()));
            c.sampling.n_samples = 3;
            c.bootstrap.resamples = 1000;
            c
        }
    };
    println!("config hash {}", config.hash());
    println!("{}", config.to_toml()?);
    let first = run(&config, RunOptions::default())?;
    println!("ran {} cells, {} failed", first.executed, first.failed);
    let again = run(&config, RunOptions { resume: true })?;
    println!("resume: {} executed, {} skipped", again.executed, again.skipped);
    let record = RunRecord::load(&config.out_dir)?;
    if let Some(cell) = record.latest().into_iter().find(|c| c.patch().is_some()) {
        let r = replay(&config.out_dir, &cell.id)?;
        println!("replay {}: identical {}", cell.id, r.identical);
    }
    for f in render_from_records(&[record], FigureKind::Auto, &config.out_dir.join("figures"))? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
