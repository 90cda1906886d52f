// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rhyme keys and verdicts from the bundled pronouncing lexicon.
//!
//! `cargo run --example rhyme_check -- night light rain dread`

use plansite::phonology::{rhyme_key, rhymes, IdenticalWordPolicy, PronunciationLexicon};

fn main() {
    let lex = PronunciationLexicon::bundled();
    let mut words: Vec<String> = std::env::args().skip(1).collect();
    if words.is_empty() {
        words = ["appear", "fear", "toy", "joy", "light", "night", "rain", "pain", "bed", "dread", "zxqv"]
            .map(String::from)
            .to_vec();
    }
    println!("{} entries", lex.len());
    for w in &words {
        let keys = rhyme_key(w, &lex).map(|ks| {
            ks.iter().map(ToString::to_string).collect::<Vec<_>>().join(" | ")
        });
        println!("{w:>10}  {}", keys.as_deref().unwrap_or("(not in lexicon)"));
    }
    for pair in words.chunks(2) {
        if let [a, b] = pair {
            let v = rhymes(a, b, &lex, IdenticalWordPolicy::CountIdentical);
            println!("{a} / {b}: {v:?}");
        }
    }
}
