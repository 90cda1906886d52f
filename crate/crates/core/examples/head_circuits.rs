// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank heads by newline-to-rhyme attention, then patch and path-patch the
//! top-k against random and comma-position controls.

use plansite::backend::{load_model, Position};
use plansite::circuits::{comma_control, random_control, rank_heads, two_stage_path_patch, topk_head_patch, SweepSettings};
use plansite::corpus::{build_prompt_pairs, bundled_data_dir, load_pair_specs};
use plansite::interventions::{IntervalChoice, SamplingConfig, Stage1Mode};
use plansite::phonology::PronunciationLexicon;

fn main() -> plansite::Result<()> {
    let model = load_model("toy-gemma")?;
    let lex = PronunciationLexicon::bundled();
    let specs = load_pair_specs(bundled_data_dir().join("prompt_pairs.jsonl"))?;
    let pairs = build_prompt_pairs(&specs, &lex, model.tokenizer()).pairs;
    let layers = 0..model.spec().n_layers;
    let ranking = rank_heads(&model, &pairs, layers.clone(), Position::NEWLINE, Position::LastWord)?;
    for e in ranking.entries.iter().take(5) {
        println!("L{}H{}: {:.3}", e.layer, e.head, e.score);
    }
    let sampling = SamplingConfig {
        n_samples: 4,
        ..SamplingConfig::default()
    };
    let settings = SweepSettings {
        sampling: &sampling,
        interval: IntervalChoice::Wilson { confidence: 0.95 },
        lexicon: &lex,
        reference: None,
    };
    let ks = [0, 1, 2, 5];
    let top = topk_head_patch(&model, &pairs, &ranking, &ks, Position::NEWLINE, &settings)?;
    let sets = |f: &dyn Fn(usize) -> plansite::Result<_>| ks.iter().map(|&k| f(k)).collect::<plansite::Result<Vec<_>>>();
    let path = two_stage_path_patch(
        &model,
        &pairs,
        "top",
        &sets(&|k| ranking.top(k))?,
        Position::LastWord,
        Position::NEWLINE,
        Stage1Mode::FullColumn,
        &settings,
    )?;
    let random = two_stage_path_patch(
        &model,
        &pairs,
        "random",
        &sets(&|k| random_control(&ranking, k, 7))?,
        Position::LastWord,
        Position::NEWLINE,
        Stage1Mode::FullColumn,
        &settings,
    )?;
    let comma = comma_control(&model, &pairs, layers, 2)?;
    println!("comma-position control heads: {:?}", comma.heads);
    println!("    k  direct  path  random");
    for (i, k) in ks.iter().enumerate() {
        println!(
            "{k:>5}  {:.2}    {:.2}  {:.2}",
            top.cells[i].rate, path.cells[i].rate, random.cells[i].rate
        );
    }
    Ok(())
}
