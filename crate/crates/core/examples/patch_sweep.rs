// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer by position activation patching with cluster-bootstrap intervals.

use plansite::backend::{load_model, Position};
use plansite::corpus::{build_prompt_pairs, bundled_data_dir, load_pair_specs};
use plansite::interventions::{all_layers_patch, clean_cell, layer_position_sweep, IntervalChoice, SamplingConfig};
use plansite::phonology::PronunciationLexicon;
use plansite::stats::BootstrapConfig;

fn main() -> plansite::Result<()> {
    let model = load_model("toy-qwen")?;
    let lex = PronunciationLexicon::bundled();
    let specs = load_pair_specs(bundled_data_dir().join("prompt_pairs.jsonl"))?;
    let pairs = build_prompt_pairs(&specs, &lex, model.tokenizer()).pairs;
    let sampling = SamplingConfig {
        n_samples: 5,
        ..SamplingConfig::default()
    };
    let boot = BootstrapConfig {
        resamples: 2000,
        ..BootstrapConfig::default()
    };
    let positions = [Position::LastWord, Position::NEWLINE];
    let layers: Vec<usize> = (0..model.spec().n_layers).collect();
    let clean = clean_cell(&model, &pairs, &sampling, IntervalChoice::ClusterBootstrap(boot), &lex)?;
    println!("clean corrupt-rhyme rate {:.2}", clean.rate);
    let sweep = layer_position_sweep(&model, &pairs, &positions, &layers, &sampling, &boot, &lex)?;
    println!("layer  last_word            newline");
    for &l in &layers {
        let row: Vec<String> = positions
            .iter()
            .map(|&p| {
                let c = sweep.get(l, p).expect("swept");
                let i = c.interval.as_ref().expect("complete");
                format!("{:.2} [{:.2}, {:.2}]", c.rate, i.lower, i.upper)
            })
            .collect();
        println!("{l:>5}  {}", row.join("   "));
    }
    if let Some(r) = &sweep.reference {
        println!("full-residual reference: layer {} rate {:.2}", r.layer, r.rate);
    }
    let all = all_layers_patch(&model, &pairs, Position::NEWLINE, &sampling, 0.95, &lex)?;
    let (lo, hi) = all.interval.as_ref().expect("complete").percent_bounds();
    println!("all layers at newline: {:.0} [{lo}, {hi}]", all.rate * 100.0);
    Ok(())
}
