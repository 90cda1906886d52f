// SPDX-License-Identifier: MIT OR Apache-2.0

//! Couplet and general-text datasets, prompt pairs, and relative-position
//! resolution.

mod general;
mod pairs;
mod positions;
mod synth;

pub use general::{sample_general_text, GeneralTextSample, LengthBounds};
pub use pairs::{
    build_prompt_pair, build_prompt_pairs, load_pair_specs, PairBuild, PairSpec, PromptPair,
};
pub use positions::{resolve_positions, PositionMap};
pub use synth::{
    synthesize_couplets, CoupletProvider, HttpProvider, RecordedProvider, SynthesisReport,
    SynthesisSpec, PROVIDER_KEY_ENV,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonology::{final_word, rhymes, IdenticalWordPolicy, PronunciationLexicon, RhymeVerdict};

/// Default text placed before the first line of every prompt.
pub const DEFAULT_PREAMBLE: &str = "A rhyming couplet:\n";

/// Fraction of invalid records above which a dataset is rejected outright.
pub const MAX_INVALID_FRACTION: f64 = 0.10;

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Training split.
    Train,
    /// Held-out split.
    Validation,
}

/// One two-line rhyming couplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Couplet {
    /// Record id.
    pub id: String,
    /// First line, ending in `r1` plus punctuation.
    pub line1: String,
    /// Second line, ending in `r2`.
    pub line2: String,
    /// Final word of line 1.
    pub r1: String,
    /// Final word of line 2.
    pub r2: String,
    /// Topic tag.
    pub topic: String,
    /// Split tag.
    pub split: Split,
}

impl Couplet {
    /// Check the record's invariants; returns the rhyme verdict on success.
    pub fn validate(&self, lexicon: &PronunciationLexicon) -> std::result::Result<RhymeVerdict, String> {
        let f1 = final_word(&self.line1).map_err(|e| e.to_string())?;
        let f2 = final_word(&self.line2).map_err(|e| e.to_string())?;
        if f1 != self.r1.to_lowercase() {
            return Err(format!("r1 {:?} is not the final word of line1 ({f1:?})", self.r1));
        }
        if f2 != self.r2.to_lowercase() {
            return Err(format!("r2 {:?} is not the final word of line2 ({f2:?})", self.r2));
        }
        match rhymes(&self.r1, &self.r2, lexicon, IdenticalWordPolicy::CountIdentical) {
            RhymeVerdict::NoRhyme => Err(format!("{:?} and {:?} do not rhyme", self.r1, self.r2)),
            v => Ok(v),
        }
    }
}

/// A validated couplet dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoupletSet {
    /// Records that passed validation, in file order.
    pub couplets: Vec<Couplet>,
    /// `(record id or line number, reason)` for every excluded record.
    pub rejected: Vec<(String, String)>,
    /// Accepted records whose rhyme could not be checked (out-of-lexicon).
    pub unknown_rhymes: Vec<String>,
}

impl CoupletSet {
    /// Records in `split`.
    pub fn split(&self, split: Split) -> Vec<&Couplet> {
        self.couplets.iter().filter(|c| c.split == split).collect()
    }

    /// `(train, validation)` sizes.
    pub fn split_sizes(&self) -> (usize, usize) {
        (self.split(Split::Train).len(), self.split(Split::Validation).len())
    }
}

/// Validate raw records, excluding failures and aborting when more than
/// [`MAX_INVALID_FRACTION`] of them fail.
pub fn validate_couplets(
    records: Vec<std::result::Result<Couplet, (String, String)>>,
    lexicon: &PronunciationLexicon,
) -> Result<CoupletSet> {
    if records.is_empty() {
        return Err(Error::Dataset("no records".into()));
    }
    let total = records.len();
    let mut set = CoupletSet {
        couplets: Vec::new(),
        rejected: Vec::new(),
        unknown_rhymes: Vec::new(),
    };
    for r in records {
        match r {
            Ok(c) => match c.validate(lexicon) {
                Ok(v) => {
                    if v == RhymeVerdict::Unknown {
                        tracing::warn!(id = %c.id, "rhyme not checkable: out-of-lexicon word");
                        set.unknown_rhymes.push(c.id.clone());
                    }
                    set.couplets.push(c);
                }
                Err(reason) => set.rejected.push((c.id, reason)),
            },
            Err(e) => set.rejected.push(e),
        }
    }
    let bad = set.rejected.len() as f64 / total as f64;
    if bad > MAX_INVALID_FRACTION {
        let listing: Vec<String> = set
            .rejected
            .iter()
            .take(10)
            .map(|(id, why)| format!("{id}: {why}"))
            .collect();
        return Err(Error::Dataset(format!(
            "{} of {total} records invalid (limit {:.0}%): {}",
            set.rejected.len(),
            MAX_INVALID_FRACTION * 100.0,
            listing.join("; ")
        )));
    }
    let (train, val) = set.split_sizes();
    tracing::info!(train, validation = val, rejected = set.rejected.len(), "loaded couplets");
    Ok(set)
}

/// Parse JSON-lines couplet records (one object per line).
pub fn parse_couplets(text: &str, lexicon: &PronunciationLexicon) -> Result<CoupletSet> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Couplet>(l).map_err(|e| (format!("line {}", i + 1), e.to_string()))
        })
        .collect();
    validate_couplets(records, lexicon)
}

/// Load and validate a couplet dataset file.
pub fn load_couplets(path: impl AsRef<Path>, lexicon: &PronunciationLexicon) -> Result<CoupletSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_couplets(&text, lexicon)
}

/// Serialize couplets as JSON lines.
pub fn serialize_couplets(couplets: &[Couplet]) -> Result<String> {
    let mut out = String::new();
    for c in couplets {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write couplets to a JSON-lines file.
pub fn write_couplets(path: impl AsRef<Path>, couplets: &[Couplet]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(serialize_couplets(couplets)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Prompt asking the model for a couplet's second line.
pub fn truncation_prompt(couplet: &Couplet, preamble: &str) -> String {
    format!("{preamble}{}\n", couplet.line1)
}

/// Directory of the bundled datasets.
pub fn bundled_data_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data"))
}
