// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fit rhyme-scheme steering vectors and sweep their effect by layer.

use plansite::backend::{load_model, HookSite, Position};
use plansite::corpus::{bundled_data_dir, load_couplets, DEFAULT_PREAMBLE};
use plansite::interventions::{fit_steering_vectors, schemes_from_couplets, steered_sweep, SamplingConfig};
use plansite::phonology::PronunciationLexicon;
use plansite::stats::BootstrapConfig;

fn main() -> plansite::Result<()> {
    let model = load_model("toy-gemma")?;
    let lex = PronunciationLexicon::bundled();
    let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex)?;
    let schemes = schemes_from_couplets(&set.couplets, &lex, 3, 20, 5, DEFAULT_PREAMBLE)?;
    for s in &schemes {
        println!("scheme {}: {} train, {} held out", s.name, s.train_prompts.len(), s.heldout_prompts.len());
    }
    let layers: Vec<usize> = (0..model.spec().n_layers).collect();
    let sites: Vec<HookSite> = layers.iter().map(|&l| HookSite::residual(l, Position::NEWLINE)).collect();
    let vectors = fit_steering_vectors(&model, &schemes, &sites)?;
    println!("{} vectors", vectors.len());
    let sampling = SamplingConfig {
        n_samples: 3,
        ..SamplingConfig::default()
    };
    let boot = BootstrapConfig {
        resamples: 1000,
        ..BootstrapConfig::default()
    };
    let alpha = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4.0);
    let sweep = steered_sweep(&model, &schemes, &vectors, alpha, &[Position::NEWLINE], &layers, &sampling, &boot, &lex)?;
    for &l in &layers {
        let c = sweep.get(l, Position::NEWLINE).expect("swept");
        println!("L{l}: steered-to-target rate {:.2}", c.rate);
    }
    Ok(())
}
