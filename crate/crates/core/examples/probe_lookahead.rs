// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train look-ahead probes on general text and compare with a unigram
//! baseline.

use plansite::backend::load_model;
use plansite::corpus::{bundled_data_dir, sample_general_text, LengthBounds, Split};
use plansite::phonology::PronunciationLexicon;
use plansite::probing::{
    build_lookahead_dataset, evaluate_probe, train_probe, unigram_eval, EvalOptions,
    ProbeHyperparams, UnigramBaseline,
};

fn main() -> plansite::Result<()> {
    let model = load_model("toy-qwen")?;
    let lex = PronunciationLexicon::bundled();
    let samples = sample_general_text(
        bundled_data_dir().join("general_text.jsonl"),
        200,
        LengthBounds::default(),
        0,
        model.tokenizer(),
    )?;
    let layers = [1, 3, 5];
    let ks = [1, 2, 4];
    let built = build_lookahead_dataset(&model, &samples, &layers, &ks, 8)?;
    let hp = ProbeHyperparams {
        epochs: 3,
        ..ProbeHyperparams::default()
    };
    let opts = EvalOptions::default();
    for ds in &built.datasets {
        let probe = train_probe(ds, model.spec().vocab_size, &hp)?;
        let e = evaluate_probe(&probe, ds, model.tokenizer(), &lex, &opts)?;
        println!("{}: top-1 {:.3} top-5 {:.3} (n={})", ds.cell, e.top1.point, e.top5.point, e.n);
    }
    let baseline = UnigramBaseline::fit(
        built
            .completions
            .iter()
            .filter(|c| c.split == Split::Train)
            .map(|c| c.generated()),
    )?;
    for ds in built.datasets.iter().take(ks.len()) {
        let e = unigram_eval(&baseline, ds, model.tokenizer(), &lex, &opts)?;
        println!("unigram {}: top-1 {:.3}", ds.cell, e.top1.point);
    }
    Ok(())
}
