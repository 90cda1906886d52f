// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build clean/corrupt prompt pairs and show their aligned positions.

use plansite::backend::load_model;
use plansite::corpus::{build_prompt_pairs, bundled_data_dir, load_couplets, load_pair_specs, Split};
use plansite::phonology::PronunciationLexicon;

fn main() -> plansite::Result<()> {
    let model_id = std::env::args().nth(1).unwrap_or_else(|| "toy-gemma".into());
    let model = load_model(&model_id)?;
    let lex = PronunciationLexicon::bundled();
    let data = bundled_data_dir();
    let specs = load_pair_specs(data.join("prompt_pairs.jsonl"))?;
    let built = build_prompt_pairs(&specs, &lex, model.tokenizer());
    for p in &built.pairs {
        let m = &p.clean_map;
        println!(
            "{}: {} -> {} | len {} newline {} last word {} comma {:?} fused {}",
            p.pair_id,
            p.clean_word,
            p.corrupt_word,
            m.seq_len,
            m.newline_index,
            m.last_word_index,
            m.comma_index,
            m.fused_comma_newline
        );
    }
    for r in &built.rejected {
        println!("rejected: {r}");
    }
    let couplets = load_couplets(data.join("couplets.jsonl"), &lex)?;
    println!(
        "couplets: {} train, {} validation, {} rejected",
        couplets.split(Split::Train).len(),
        couplets.split(Split::Validation).len(),
        couplets.rejected.len()
    );
    Ok(())
}
