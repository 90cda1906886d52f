// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rhyme detection over the CMU Pronouncing Dictionary.
//!
//! A word's rhyme key is the phoneme suffix starting at its last vowel with
//! primary or secondary stress (falling back to the last vowel when the word
//! carries no stress), with stress digits removed. Two words rhyme when any
//! pair of their pronunciations shares a key.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static BUNDLED_CMUDICT: &[u8] = include_bytes!("../data/cmudict-0.7b");

const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];
const CONSONANTS: [&str; 24] = [
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R", "S", "SH",
    "T", "TH", "V", "W", "Y", "Z", "ZH",
];

/// One ARPAbet phoneme. Vowels carry a stress digit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phoneme(String);

impl Phoneme {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        let (base, stress) = match raw.as_bytes().last() {
            Some(b'0'..=b'2') => (&raw[..raw.len() - 1], true),
            _ => (raw, false),
        };
        if VOWELS.contains(&base) {
            if stress {
                Ok(Self(raw.to_string()))
            } else {
                Err(format!("vowel {raw} is missing its stress digit"))
            }
        } else if CONSONANTS.contains(&base) && !stress {
            Ok(Self(raw.to_string()))
        } else {
            Err(format!("unknown phoneme {raw:?}"))
        }
    }

    /// Whether this is a vowel.
    pub fn is_vowel(&self) -> bool {
        self.stress().is_some()
    }

    /// Stress digit of a vowel.
    pub fn stress(&self) -> Option<u8> {
        match self.0.as_bytes().last() {
            Some(&d @ b'0'..=b'2') => Some(d - b'0'),
            _ => None,
        }
    }

    /// Symbol without stress digit.
    pub fn base(&self) -> &str {
        if self.is_vowel() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }

    /// Symbol as written in the dictionary.
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A pronunciation: ordered phonemes.
pub type Pronunciation = Vec<Phoneme>;

/// Phoneme suffix that decides rhyme, stress digits removed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RhymeKey(Vec<String>);

impl RhymeKey {
    /// Phoneme symbols of the key.
    pub fn phonemes(&self) -> &[String] {
        &self.0
    }

    fn from_pronunciation(pron: &[Phoneme]) -> Option<Self> {
        let stressed = pron
            .iter()
            .rposition(|p| matches!(p.stress(), Some(1 | 2)));
        let start = stressed.or_else(|| pron.iter().rposition(Phoneme::is_vowel))?;
        Some(Self(
            pron[start..].iter().map(|p| p.base().to_string()).collect(),
        ))
    }
}

impl fmt::Display for RhymeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Outcome of a rhyme query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhymeVerdict {
    /// The words share a rhyme key.
    Rhyme,
    /// Both words are known and share no key.
    NoRhyme,
    /// At least one word is missing from the lexicon.
    Unknown,
}

/// How to treat a word compared against itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdenticalWordPolicy {
    /// Identical words rhyme.
    #[default]
    CountIdentical,
    /// Identical words never rhyme.
    ExcludeIdentical,
}

/// Immutable word → pronunciations map.
#[derive(Debug, Clone, Default)]
pub struct PronunciationLexicon {
    entries: HashMap<String, Vec<Pronunciation>>,
}

impl PronunciationLexicon {
    /// Parse cmudict 0.7b text (`WORD  PH1 PH2`, `WORD(2)` variants,
    /// `;;;` comments). Any malformed line aborts the load.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: HashMap<String, Vec<Pronunciation>> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end();
            if line.trim().is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().ok_or_else(|| Error::LexiconParse {
                line: line_no,
                message: "empty entry".into(),
            })?;
            let word = strip_variant(head).ok_or_else(|| Error::LexiconParse {
                line: line_no,
                message: format!("bad variant suffix in {head:?}"),
            })?;
            let phones = parts
                .map(Phoneme::parse)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|message| Error::LexiconParse {
                    line: line_no,
                    message,
                })?;
            if phones.is_empty() {
                return Err(Error::LexiconParse {
                    line: line_no,
                    message: format!("{head} has no phonemes"),
                });
            }
            entries.entry(word.to_lowercase()).or_default().push(phones);
        }
        if entries.is_empty() {
            tracing::warn!("pronouncing lexicon is empty");
        }
        Ok(Self { entries })
    }

    /// Copy of the CMU dictionary shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(&decode_latin1(BUNDLED_CMUDICT)).expect("bundled cmudict parses")
    }

    /// Number of distinct headwords.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether the lexicon has no entries.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Pronunciations of a word (case-insensitive, punctuation stripped).
    pub fn pronunciations(&self, word: &str) -> Option<&[Pronunciation]> {
        self.entries.get(&normalize_word(word)).map(Vec::as_slice)
    }

    /// Whether the normalized word has an entry.
    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&normalize_word(word))
    }
}

fn strip_variant(head: &str) -> Option<&str> {
    match head.find('(') {
        None => Some(head),
        Some(open) => {
            let rest = &head[open..];
            let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
            (!inner.is_empty() && inner.bytes().all(|b| b.is_ascii_digit()) && open > 0)
                .then(|| &head[..open])
        }
    }
}

fn decode_latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| char::from(b)).collect()
}

/// Read a cmudict-format file (Latin-1).
pub fn load_pronouncing_lexicon(path: impl AsRef<Path>) -> Result<PronunciationLexicon> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let lex = PronunciationLexicon::parse(&decode_latin1(&bytes))?;
    tracing::info!(entries = lex.len(), path = %path.display(), "loaded pronouncing lexicon");
    Ok(lex)
}

/// Lowercase and strip surrounding punctuation.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .trim_matches('\'')
        .to_lowercase()
}

/// Rhyme keys for every pronunciation of `word`, deduplicated, or `None`
/// when the word is out of lexicon.
pub fn rhyme_key(word: &str, lexicon: &PronunciationLexicon) -> Option<Vec<RhymeKey>> {
    let prons = lexicon.pronunciations(word)?;
    let mut keys: Vec<RhymeKey> = prons
        .iter()
        .filter_map(|p| RhymeKey::from_pronunciation(p))
        .collect();
    keys.sort();
    keys.dedup();
    (!keys.is_empty()).then_some(keys)
}

/// Whether `a` and `b` rhyme. Symmetric in its arguments.
pub fn rhymes(
    a: &str,
    b: &str,
    lexicon: &PronunciationLexicon,
    policy: IdenticalWordPolicy,
) -> RhymeVerdict {
    let (Some(ka), Some(kb)) = (rhyme_key(a, lexicon), rhyme_key(b, lexicon)) else {
        return RhymeVerdict::Unknown;
    };
    if normalize_word(a) == normalize_word(b) {
        return match policy {
            IdenticalWordPolicy::CountIdentical => RhymeVerdict::Rhyme,
            IdenticalWordPolicy::ExcludeIdentical => RhymeVerdict::NoRhyme,
        };
    }
    if ka.iter().any(|k| kb.contains(k)) {
        RhymeVerdict::Rhyme
    } else {
        RhymeVerdict::NoRhyme
    }
}

/// Last whitespace-delimited word of a line, lowercased, punctuation
/// stripped.
pub fn final_word(line: &str) -> Result<String> {
    line.split_whitespace()
        .rev()
        .map(normalize_word)
        .find(|w| !w.is_empty())
        .ok_or_else(|| Error::NoFinalWord(line.to_string()))
}
