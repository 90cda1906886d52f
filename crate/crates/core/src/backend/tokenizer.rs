// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokenizer adapters.
//!
//! [`WordTokenizer`] is a small deterministic word-level tokenizer used by
//! the built-in toy models; [`HfTokenizer`] wraps a Hugging Face
//! `tokenizer.json`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Vocabulary index.
pub type TokenId = u32;

/// What the rest of the toolkit needs from a tokenizer.
pub trait TokenizerAdapter: Send + Sync {
    /// Encode text, adding whatever special prefix the model expects.
    fn encode(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Decode ids back to text.
    fn decode(&self, ids: &[TokenId]) -> Result<String>;

    /// Text of a single token as it appears inside decoded output.
    fn token_text(&self, id: TokenId) -> Result<String> {
        self.decode(&[id])
    }

    /// Number of ids the tokenizer can emit.
    fn vocab_size(&self) -> usize;

    /// End-of-sequence id, if any.
    fn eos_token(&self) -> Option<TokenId> {
        None
    }

    /// Whether `id` is a special (non-text) token such as BOS.
    fn is_special(&self, _id: TokenId) -> bool {
        false
    }
}

const SPECIALS: [&str; 2] = ["<unk>", "<eos>"];
const STRUCTURAL: [&str; 3] = ["\n", ",\n", " "];
const PUNCT: &str = ",.!?;:'\"-()";

/// Word-level tokenizer with a character fallback.
///
/// Words (runs of letters, digits and apostrophes) become one token,
/// optionally carrying a single leading space (`" night"`). Unknown words
/// are spelled out character by character, so they span several tokens.
/// With `fuse_comma_newline` the two characters `,\n` form one token.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
    fuse_comma_newline: bool,
}

impl WordTokenizer {
    /// Build from a word list; every word gets a bare and a space-prefixed
    /// piece.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>, fuse_comma_newline: bool) -> Self {
        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(STRUCTURAL.iter().map(|s| s.to_string()));
        for c in PUNCT.chars() {
            pieces.push(c.to_string());
        }
        let mut alphabet: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').collect();
        alphabet.push('\'');
        for c in alphabet {
            pieces.push(c.to_string());
            pieces.push(format!(" {c}"));
        }
        let mut words: Vec<&str> = words
            .into_iter()
            .map(str::trim)
            .filter(|w| w.chars().count() > 1 && w.chars().all(is_word_char))
            .collect();
        words.sort_unstable();
        words.dedup();
        for w in words {
            pieces.push(w.to_string());
            pieces.push(format!(" {w}"));
        }
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as TokenId))
            .collect();
        Self {
            pieces,
            index,
            fuse_comma_newline,
        }
    }

    /// Whether `,\n` is emitted as one token.
    pub fn fuses_comma_newline(&self) -> bool {
        self.fuse_comma_newline
    }

    /// Id of a piece, if it is in the vocabulary.
    pub fn piece_id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    fn push_piece(&self, piece: &str, out: &mut Vec<TokenId>) {
        out.push(self.index.get(piece).copied().unwrap_or(0));
    }

    fn push_word(&self, spaced: bool, word: &str, out: &mut Vec<TokenId>) {
        let key = if spaced {
            format!(" {word}")
        } else {
            word.to_string()
        };
        if let Some(&id) = self.index.get(&key) {
            out.push(id);
            return;
        }
        for (i, c) in word.chars().enumerate() {
            let piece = if i == 0 && spaced {
                format!(" {c}")
            } else {
                c.to_string()
            };
            self.push_piece(&piece, out);
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '\''
}

impl TokenizerAdapter for WordTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let spaced_word = c == ' ' && chars.get(i + 1).is_some_and(|&n| is_word_char(n));
            if is_word_char(c) || spaced_word {
                let start = if spaced_word { i + 1 } else { i };
                let mut end = start;
                while end < chars.len() && is_word_char(chars[end]) {
                    end += 1;
                }
                let word: String = chars[start..end].iter().collect();
                self.push_word(spaced_word, &word, &mut out);
                i = end;
            } else if c == ',' && self.fuse_comma_newline && chars.get(i + 1) == Some(&'\n') {
                self.push_piece(",\n", &mut out);
                i += 2;
            } else {
                self.push_piece(&c.to_string(), &mut out);
                i += 1;
            }
        }
        Ok(out)
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} out of range")))?;
            if id == 1 {
                continue;
            }
            s.push_str(piece);
        }
        Ok(s)
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(1)
    }

    fn is_special(&self, id: TokenId) -> bool {
        id < SPECIALS.len() as TokenId
    }
}

/// Hugging Face `tokenizer.json` adapter.
pub struct HfTokenizer {
    inner: tokenizers::Tokenizer,
    eos: Option<TokenId>,
    specials: Vec<TokenId>,
}

impl std::fmt::Debug for HfTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HfTokenizer")
            .field("vocab_size", &self.inner.get_vocab_size(true))
            .field("eos", &self.eos)
            .finish()
    }
}

impl HfTokenizer {
    /// Load `tokenizer.json`.
    pub fn from_file(path: impl AsRef<Path>, eos: Option<TokenId>) -> Result<Self> {
        let path = path.as_ref();
        let inner = tokenizers::Tokenizer::from_file(path)
            .map_err(|e| Error::Tokenizer(format!("{}: {e}", path.display())))?;
        let specials = inner
            .get_added_tokens_decoder()
            .iter()
            .filter(|(_, t)| t.special)
            .map(|(&id, _)| id)
            .collect();
        Ok(Self {
            inner,
            eos,
            specials,
        })
    }
}

impl TokenizerAdapter for HfTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner
            .encode(text, true)
            .map(|e| e.get_ids().to_vec())
            .map_err(|e| Error::Tokenizer(e.to_string()))
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.inner
            .decode(ids, true)
            .map_err(|e| Error::Tokenizer(e.to_string()))
    }

    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.eos
    }

    fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains(&id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(fuse: bool) -> WordTokenizer {
        WordTokenizer::new(["She", "felt", "a", "sudden", "sense", "of", "fright", "and"], fuse)
    }

    #[test]
    fn round_trips_text() {
        let t = tok(true);
        let text = "A rhyming couplet:\nShe felt a sudden sense of fright,\nand xyz!";
        let ids = t.encode(text).unwrap();
        assert_eq!(t.decode(&ids).unwrap(), text);
    }

    #[test]
    fn comma_newline_fusion() {
        let text = "sense of fright,\nand";
        let fused = tok(true);
        let ids = fused.encode(text).unwrap();
        let pieces: Vec<String> = ids.iter().map(|&i| fused.token_text(i).unwrap()).collect();
        assert_eq!(pieces, ["sense", " of", " fright", ",\n", "and"]);
        let split = tok(false);
        let ids = split.encode(text).unwrap();
        let pieces: Vec<String> = ids.iter().map(|&i| split.token_text(i).unwrap()).collect();
        assert_eq!(pieces, ["sense", " of", " fright", ",", "\n", "and"]);
    }

    #[test]
    fn unknown_words_spell_out() {
        let t = tok(true);
        let ids = t.encode(" fear").unwrap();
        let pieces: Vec<String> = ids.iter().map(|&i| t.token_text(i).unwrap()).collect();
        assert_eq!(pieces, [" f", "e", "a", "r"]);
    }
}
