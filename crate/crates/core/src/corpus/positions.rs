// SPDX-License-Identifier: MIT OR Apache-2.0

//! Relative positions: the first line's newline token is position 0.

use serde::{Deserialize, Serialize};

use crate::backend::{TokenId, TokenizerAdapter};
use crate::error::{Error, Result};

/// Absolute token indices of the structural sites in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    /// Length of the resolved token sequence.
    pub seq_len: usize,
    /// Index of the newline-bearing token ending the first line.
    pub newline_index: usize,
    /// Index of the first token of the first line's final word.
    pub last_word_index: usize,
    /// Number of tokens the final word spans.
    pub last_word_tokens: usize,
    /// Set when the final word spans more than one token.
    pub multi_token_word: bool,
    /// Index of a separate comma token before the newline, if any.
    pub comma_index: Option<usize>,
    /// Whether comma and newline share one token.
    pub fused_comma_newline: bool,
}

impl PositionMap {
    /// Absolute index of relative position `i`.
    pub fn absolute(&self, i: i64) -> Result<usize> {
        let abs = self.newline_index as i64 + i;
        if abs < 0 {
            return Err(Error::Position(format!(
                "relative position {i} lies before the sequence start"
            )));
        }
        Ok(abs as usize)
    }

    /// Relative position of absolute index `p`.
    pub fn relative(&self, p: usize) -> i64 {
        p as i64 - self.newline_index as i64
    }

    /// Relative position of the final word's first token.
    pub fn last_word_relative(&self) -> i64 {
        self.relative(self.last_word_index)
    }

    /// Absolute indices of every token of the final word.
    pub fn last_word_span(&self) -> std::ops::Range<usize> {
        self.last_word_index..self.last_word_index + self.last_word_tokens
    }
}

fn has_word_char(s: &str) -> bool {
    s.chars().any(|c| c.is_alphanumeric())
}

/// Locate the first line's newline and final word in a prompt.
///
/// The newline site is the last token whose text contains `\n`; the final
/// word is found by scanning backward past punctuation-only tokens, then
/// extending over preceding tokens that continue the same word.
pub fn resolve_positions(tokens: &[TokenId], tok: &dyn TokenizerAdapter) -> Result<PositionMap> {
    let texts: Vec<String> = tokens
        .iter()
        .map(|&t| tok.token_text(t))
        .collect::<Result<_>>()?;
    let newline_index = texts
        .iter()
        .rposition(|t| t.contains('\n'))
        .ok_or_else(|| Error::Position("no newline token in sequence".into()))?;
    let nl_text = &texts[newline_index];
    let before_nl = &nl_text[..nl_text.find('\n').unwrap_or(0)];
    if has_word_char(before_nl) {
        return Err(Error::Position(format!(
            "newline token {nl_text:?} also carries word characters"
        )));
    }
    let fused = before_nl.contains(',');
    let mut comma_index = None;
    let mut end = None;
    for j in (0..newline_index).rev() {
        let t = &texts[j];
        if has_word_char(t) {
            end = Some(j);
            break;
        }
        if comma_index.is_none() && t.trim() == "," {
            comma_index = Some(j);
        }
    }
    let end = end.ok_or_else(|| Error::Position("no word before the newline".into()))?;
    let mut start = end;
    while start > 0 {
        let cur = &texts[start];
        let prev = &texts[start - 1];
        let continues = !cur.starts_with(char::is_whitespace)
            && prev.chars().last().is_some_and(|c| c.is_alphanumeric() || c == '\'')
            && !prev.contains('\n');
        if !continues {
            break;
        }
        start -= 1;
    }
    let n = end - start + 1;
    Ok(PositionMap {
        seq_len: tokens.len(),
        newline_index,
        last_word_index: start,
        last_word_tokens: n,
        multi_token_word: n > 1,
        comma_index,
        fused_comma_newline: fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::WordTokenizer;

    fn words() -> Vec<&'static str> {
        vec![
            "A", "rhyming", "couplet", "She", "felt", "a", "sudden", "sense", "of", "fright", "and",
            "hoped",
        ]
    }

    #[test]
    fn fused_tokenizer_puts_word_at_minus_one() {
        let tok = WordTokenizer::new(words(), true);
        let ids = tok
            .encode("A rhyming couplet:\nShe felt a sudden sense of fright,\n")
            .unwrap();
        let map = resolve_positions(&ids, &tok).unwrap();
        assert_eq!(map.last_word_relative(), -1);
        assert!(map.fused_comma_newline);
        assert_eq!(map.comma_index, None);
        assert!(tok.token_text(ids[map.newline_index]).unwrap().contains('\n'));
    }

    #[test]
    fn split_tokenizer_puts_word_at_minus_two() {
        let tok = WordTokenizer::new(words(), false);
        let ids = tok
            .encode("A rhyming couplet:\nShe felt a sudden sense of fright,\n")
            .unwrap();
        let map = resolve_positions(&ids, &tok).unwrap();
        assert_eq!(map.last_word_relative(), -2);
        assert_eq!(map.comma_index, Some(map.newline_index - 1));
        assert!(!map.fused_comma_newline);
    }

    #[test]
    fn multi_token_word_flags_first_token() {
        let tok = WordTokenizer::new(words(), true);
        let ids = tok.encode("She felt a sense of dread,\nand").unwrap();
        let map = resolve_positions(&ids, &tok).unwrap();
        assert!(map.multi_token_word);
        assert_eq!(map.last_word_tokens, 5);
        assert_eq!(tok.token_text(ids[map.last_word_index]).unwrap(), " d");
        assert_eq!(map.last_word_relative(), -5);
    }

    #[test]
    fn trailing_line_two_prefix_is_ignored() {
        let tok = WordTokenizer::new(words(), true);
        let ids = tok.encode("A rhyming couplet:\nShe felt fright,\nand hoped").unwrap();
        let map = resolve_positions(&ids, &tok).unwrap();
        assert_eq!(map.newline_index, ids.len() - 3);
        assert_eq!(map.absolute(2).unwrap(), ids.len() - 1);
    }

    #[test]
    fn missing_newline_is_an_error() {
        let tok = WordTokenizer::new(words(), true);
        let ids = tok.encode("She felt fright").unwrap();
        assert!(resolve_positions(&ids, &tok).is_err());
    }
}
