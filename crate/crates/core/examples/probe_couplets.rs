// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe couplet prompts for the token the model will rhyme with.

use plansite::backend::{load_model, Position};
use plansite::corpus::{bundled_data_dir, load_couplets, Split, DEFAULT_PREAMBLE};
use plansite::phonology::PronunciationLexicon;
use plansite::probing::{build_couplet_dataset, evaluate_probe, train_probe, EvalOptions, ProbeHyperparams};

fn main() -> plansite::Result<()> {
    let model = load_model("toy-gemma")?;
    let lex = PronunciationLexicon::bundled();
    let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex)?;
    let mut couplets: Vec<_> = set.split(Split::Train).into_iter().take(250).collect();
    couplets.extend(set.split(Split::Validation));
    let positions = [Position::LastWord, Position::Comma, Position::NEWLINE];
    let built = build_couplet_dataset(&model, &couplets, &[2, 5], &positions, DEFAULT_PREAMBLE, 24)?;
    println!("{} completions, {} excluded", built.completions.len(), built.excluded.len());
    let hp = ProbeHyperparams {
        epochs: 5,
        ..ProbeHyperparams::default()
    };
    for ds in &built.datasets {
        let probe = train_probe(ds, model.spec().vocab_size, &hp)?;
        let e = evaluate_probe(&probe, ds, model.tokenizer(), &lex, &EvalOptions::default())?;
        let rhyme = e.rhyme.as_ref().map_or(f64::NAN, |r| r.point);
        println!(
            "{}: top-1 {:.3} top-5 {:.3} rhyme {:.3} (n={})",
            ds.cell, e.top1.point, e.top5.point, rhyme, e.n
        );
    }
    Ok(())
}
