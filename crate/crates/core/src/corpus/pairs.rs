// SPDX-License-Identifier: MIT OR Apache-2.0

//! Clean/corrupt prompt pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::positions::{resolve_positions, PositionMap};
use crate::backend::{TokenId, TokenizerAdapter};
use crate::error::{Error, Result};
use crate::phonology::{rhymes, IdenticalWordPolicy, PronunciationLexicon, RhymeVerdict};

/// Placeholder replaced by the rhyme word in a template.
pub const WORD_SLOT: &str = "{word}";

/// One line of a prompt-pair spec file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    /// Pair id, used as the bootstrap cluster id.
    pub pair_id: String,
    /// Prompt text containing [`WORD_SLOT`] once, at the end of line 1.
    pub template: String,
    /// Word substituted in the clean prompt.
    pub clean_word: String,
    /// Word substituted in the corrupt prompt.
    pub corrupt_word: String,
}

/// A clean/corrupt prompt pair with aligned position maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    /// Pair id.
    pub pair_id: String,
    /// Clean prompt text.
    pub clean_prompt: String,
    /// Corrupt prompt text.
    pub corrupt_prompt: String,
    /// Clean rhyme word.
    pub clean_word: String,
    /// Corrupt rhyme word.
    pub corrupt_word: String,
    /// Clean prompt token ids.
    pub clean_tokens: Vec<TokenId>,
    /// Corrupt prompt token ids.
    pub corrupt_tokens: Vec<TokenId>,
    /// Positions in the clean prompt.
    pub clean_map: PositionMap,
    /// Positions in the corrupt prompt.
    pub corrupt_map: PositionMap,
}

/// Outcome of building a batch of pairs.
#[derive(Debug)]
pub struct PairBuild {
    /// Accepted pairs in spec order.
    pub pairs: Vec<PromptPair>,
    /// Rejected specs with the reason.
    pub rejected: Vec<Error>,
}

fn reject(id: &str, reason: impl Into<String>) -> Error {
    Error::PairRejected {
        pair_id: id.to_string(),
        reason: reason.into(),
    }
}

/// Build and verify one pair.
pub fn build_prompt_pair(
    spec: &PairSpec,
    lexicon: &PronunciationLexicon,
    tok: &dyn TokenizerAdapter,
) -> Result<PromptPair> {
    let id = spec.pair_id.as_str();
    if spec.template.matches(WORD_SLOT).count() != 1 {
        return Err(reject(id, format!("template must contain {WORD_SLOT} exactly once")));
    }
    match rhymes(&spec.clean_word, &spec.corrupt_word, lexicon, IdenticalWordPolicy::ExcludeIdentical) {
        RhymeVerdict::NoRhyme => {}
        RhymeVerdict::Rhyme => {
            return Err(reject(
                id,
                format!("{:?} and {:?} rhyme", spec.clean_word, spec.corrupt_word),
            ))
        }
        RhymeVerdict::Unknown => {
            return Err(reject(id, "a rhyme word is missing from the lexicon"));
        }
    }
    if spec.clean_word.trim().eq_ignore_ascii_case(spec.corrupt_word.trim()) {
        return Err(reject(id, "clean and corrupt words are identical"));
    }
    let clean_prompt = spec.template.replace(WORD_SLOT, &spec.clean_word);
    let corrupt_prompt = spec.template.replace(WORD_SLOT, &spec.corrupt_word);
    let clean_tokens = tok.encode(&clean_prompt)?;
    let corrupt_tokens = tok.encode(&corrupt_prompt)?;
    if clean_tokens.len() != corrupt_tokens.len() {
        return Err(reject(
            id,
            format!(
                "prompts tokenize to different lengths ({} vs {})",
                clean_tokens.len(),
                corrupt_tokens.len()
            ),
        ));
    }
    let clean_map =
        resolve_positions(&clean_tokens, tok).map_err(|e| reject(id, format!("clean: {e}")))?;
    let corrupt_map =
        resolve_positions(&corrupt_tokens, tok).map_err(|e| reject(id, format!("corrupt: {e}")))?;
    if clean_map.newline_index != corrupt_map.newline_index
        || clean_map.last_word_index != corrupt_map.last_word_index
        || clean_map.last_word_tokens != corrupt_map.last_word_tokens
    {
        return Err(reject(id, "clean and corrupt position maps do not align"));
    }
    let span = clean_map.last_word_span();
    for (i, (a, b)) in clean_tokens.iter().zip(&corrupt_tokens).enumerate() {
        if !span.contains(&i) && a != b {
            return Err(reject(id, format!("prompts differ outside the rhyme word at token {i}")));
        }
    }
    if clean_tokens[span.clone()] == corrupt_tokens[span] {
        return Err(reject(id, "rhyme word tokens are identical"));
    }
    for (name, map) in [("clean", &clean_map), ("corrupt", &corrupt_map)] {
        if map.multi_token_word {
            tracing::warn!(pair = id, prompt = name, tokens = map.last_word_tokens, "multi-token rhyme word");
        }
    }
    Ok(PromptPair {
        pair_id: spec.pair_id.clone(),
        clean_prompt,
        corrupt_prompt,
        clean_word: spec.clean_word.clone(),
        corrupt_word: spec.corrupt_word.clone(),
        clean_tokens,
        corrupt_tokens,
        clean_map,
        corrupt_map,
    })
}

/// Build every spec, collecting rejections instead of stopping at the first.
pub fn build_prompt_pairs(
    specs: &[PairSpec],
    lexicon: &PronunciationLexicon,
    tok: &dyn TokenizerAdapter,
) -> PairBuild {
    let mut out = PairBuild {
        pairs: Vec::new(),
        rejected: Vec::new(),
    };
    for s in specs {
        match build_prompt_pair(s, lexicon, tok) {
            Ok(p) => out.pairs.push(p),
            Err(e) => {
                tracing::warn!(error = %e, "prompt pair rejected");
                out.rejected.push(e);
            }
        }
    }
    out
}

/// Read a JSON-lines prompt-pair spec file.
pub fn load_pair_specs(path: impl AsRef<Path>) -> Result<Vec<PairSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<Vec<PairSpec>>>()?;
    if specs.is_empty() {
        return Err(Error::Dataset(format!("{}: no pair specs", path.display())));
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::WordTokenizer;
    use crate::corpus::bundled_data_dir;
    use std::sync::OnceLock;

    fn lex() -> &'static PronunciationLexicon {
        static L: OnceLock<PronunciationLexicon> = OnceLock::new();
        L.get_or_init(PronunciationLexicon::bundled)
    }

    fn tok() -> WordTokenizer {
        let text = std::fs::read_to_string(bundled_data_dir().join("toy_vocab.txt")).unwrap();
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        WordTokenizer::new(words.iter().map(String::as_str), true)
    }

    fn spec(clean: &str, corrupt: &str) -> PairSpec {
        PairSpec {
            pair_id: "t".into(),
            template: "A rhyming couplet:\nShe felt a sudden sense of {word},\nand hoped that".into(),
            clean_word: clean.into(),
            corrupt_word: corrupt.into(),
        }
    }

    #[test]
    fn fixture_pairs_all_build() {
        let specs = load_pair_specs(bundled_data_dir().join("prompt_pairs.jsonl")).unwrap();
        let built = build_prompt_pairs(&specs, lex(), &tok());
        assert!(built.rejected.is_empty(), "{:?}", built.rejected);
        assert_eq!(built.pairs.len(), 5);
        let p5 = built.pairs.iter().find(|p| p.pair_id == "pair5").unwrap();
        assert!(p5.clean_prompt.contains("She felt a sudden sense of fright"));
        assert_eq!(p5.corrupt_word, "fear");
    }

    #[test]
    fn prompts_differ_only_at_the_word() {
        let t = tok();
        let p = build_prompt_pair(&spec("fright", "fear"), lex(), &t).unwrap();
        let w = p.clean_map.last_word_index;
        assert_eq!(p.clean_tokens[..w], p.corrupt_tokens[..w]);
        assert_ne!(
            t.token_text(p.clean_tokens[w]).unwrap(),
            t.token_text(p.corrupt_tokens[w]).unwrap()
        );
    }

    #[test]
    fn rhyming_words_are_rejected() {
        let err = build_prompt_pair(&spec("fright", "night"), lex(), &tok()).unwrap_err();
        assert!(matches!(err, Error::PairRejected { .. }));
    }

    #[test]
    fn unequal_lengths_are_rejected() {
        // "crypt" is not in the toy vocabulary and is spelled out.
        let mut s = spec("fright", "fear");
        s.corrupt_word = "abyss".into();
        assert!(build_prompt_pair(&s, lex(), &tok()).is_ok());
        s.corrupt_word = "crypt".into();
        let err = build_prompt_pair(&s, lex(), &tok()).unwrap_err();
        assert!(err.to_string().contains("different lengths"), "{err}");
    }
}
