// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook sites, captured activations and patch plans.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::spec::ModelSpec;
use crate::corpus::PositionMap;
use crate::error::{Error, Result};

/// Where inside a block an activation is read or written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Component {
    /// Residual stream after the block's second residual addition.
    ResidualPostBlock,
    /// One head's slice of the concatenated head outputs, before the
    /// output projection.
    AttentionHead(usize),
    /// Attention contribution added to the residual stream.
    AttentionOutput,
    /// MLP contribution added to the residual stream.
    MlpOutput,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ResidualPostBlock => f.write_str("resid_post"),
            Self::AttentionHead(h) => write!(f, "head.{h}"),
            Self::AttentionOutput => f.write_str("attn_out"),
            Self::MlpOutput => f.write_str("mlp_out"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resid_post" | "residual_post_block" => Ok(Self::ResidualPostBlock),
            "attn_out" | "attention_output" => Ok(Self::AttentionOutput),
            "mlp_out" | "mlp_output" => Ok(Self::MlpOutput),
            _ => s
                .strip_prefix("head.")
                .and_then(|h| h.parse().ok())
                .map(Self::AttentionHead)
                .ok_or_else(|| Error::SiteRange(format!("unknown component {s:?}"))),
        }
    }
}

impl TryFrom<String> for Component {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Component> for String {
    fn from(c: Component) -> Self {
        c.to_string()
    }
}

/// Token position of a hook, relative to the first line's newline unless
/// absolute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Position {
    /// Offset from the newline token (0 = newline, negative = before).
    Relative(i64),
    /// First token of the first line's final word.
    LastWord,
    /// Separate comma token before the newline (unfused tokenizers only).
    Comma,
    /// Absolute token index.
    Absolute(usize),
}

impl Position {
    /// The newline token.
    pub const NEWLINE: Self = Self::Relative(0);

    /// Absolute token index under `map` (required for anything but
    /// `Absolute`).
    pub fn resolve(&self, map: Option<&PositionMap>) -> Result<usize> {
        match (self, map) {
            (Self::Absolute(p), _) => Ok(*p),
            (_, None) => Err(Error::Position(format!(
                "position {self} needs a position map"
            ))),
            (Self::Relative(i), Some(m)) => m.absolute(*i),
            (Self::LastWord, Some(m)) => Ok(m.last_word_index),
            (Self::Comma, Some(m)) => m
                .comma_index
                .ok_or_else(|| Error::Position("no comma position".into())),
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Relative(i) => write!(f, "{i}"),
            Self::LastWord => f.write_str("last_word"),
            Self::Comma => f.write_str("comma"),
            Self::Absolute(p) => write!(f, "abs:{p}"),
        }
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_word" => Ok(Self::LastWord),
            "comma" => Ok(Self::Comma),
            "newline" => Ok(Self::NEWLINE),
            _ => {
                if let Some(abs) = s.strip_prefix("abs:") {
                    abs.parse()
                        .map(Self::Absolute)
                        .map_err(|_| Error::Position(format!("bad absolute position {s:?}")))
                } else {
                    s.parse()
                        .map(Self::Relative)
                        .map_err(|_| Error::Position(format!("bad position {s:?}")))
                }
            }
        }
    }
}

impl TryFrom<String> for Position {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Position> for String {
    fn from(p: Position) -> Self {
        p.to_string()
    }
}

/// A hook site in prompt-relative coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSite {
    /// Block index.
    pub layer: usize,
    /// Token position.
    pub position: Position,
    /// Component within the block.
    pub component: Component,
}

impl HookSite {
    /// Construct a site.
    pub const fn new(layer: usize, position: Position, component: Component) -> Self {
        Self {
            layer,
            position,
            component,
        }
    }

    /// Residual stream after block `layer`.
    pub const fn residual(layer: usize, position: Position) -> Self {
        Self::new(layer, position, Component::ResidualPostBlock)
    }

    /// Resolve to an absolute token index.
    pub fn resolve(&self, map: Option<&PositionMap>) -> Result<ResolvedSite> {
        Ok(ResolvedSite {
            layer: self.layer,
            position: self.position.resolve(map)?,
            component: self.component,
        })
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}@{}/{}", self.layer, self.position, self.component)
    }
}

/// A hook site at an absolute token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResolvedSite {
    /// Block index.
    pub layer: usize,
    /// Absolute token index.
    pub position: usize,
    /// Component within the block.
    pub component: Component,
}

impl ResolvedSite {
    /// Construct a site.
    pub const fn new(layer: usize, position: usize, component: Component) -> Self {
        Self {
            layer,
            position,
            component,
        }
    }

    /// Vector width this site carries.
    pub fn width(&self, spec: &ModelSpec) -> usize {
        match self.component {
            Component::AttentionHead(_) => spec.head_dim,
            _ => spec.hidden_size,
        }
    }

    /// Check layer/head indices and, if given, the sequence length.
    pub fn validate(&self, spec: &ModelSpec, seq_len: Option<usize>) -> Result<()> {
        if self.layer >= spec.n_layers {
            return Err(Error::SiteRange(format!(
                "{self}: layer {} >= {}",
                self.layer, spec.n_layers
            )));
        }
        if let Component::AttentionHead(h) = self.component {
            if h >= spec.n_heads {
                return Err(Error::SiteRange(format!(
                    "{self}: head {h} >= {}",
                    spec.n_heads
                )));
            }
        }
        if let Some(len) = seq_len {
            if self.position >= len {
                return Err(Error::SiteRange(format!(
                    "{self}: position beyond sequence of length {len}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ResolvedSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}@abs:{}/{}", self.layer, self.position, self.component)
    }
}

/// Where captured vectors came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the token ids that were run.
    pub prompt_hash: String,
    /// Decode step at which the last capture happened (0 = prompt pass).
    pub decode_step: Option<usize>,
}

/// Captured activations keyed by resolved site.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStore {
    vectors: BTreeMap<ResolvedSite, Vec<f32>>,
    /// Origin of the vectors.
    pub provenance: Provenance,
}

impl ActivationStore {
    pub(crate) fn insert(&mut self, site: ResolvedSite, v: Vec<f32>) {
        self.vectors.insert(site, v);
    }

    /// Vector at a site.
    pub fn get(&self, site: &ResolvedSite) -> Option<&[f32]> {
        self.vectors.get(site).map(Vec::as_slice)
    }

    /// Vector at a site, or an error naming it.
    pub fn require(&self, site: &ResolvedSite) -> Result<&[f32]> {
        self.get(site)
            .ok_or_else(|| Error::SiteRange(format!("{site} was not captured")))
    }

    /// Number of stored vectors.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    /// Whether nothing was captured.
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Iterate over `(site, vector)`.
    pub fn iter(&self) -> impl Iterator<Item = (&ResolvedSite, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Check widths against the model and that every entry is finite.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (site, v) in &self.vectors {
            if v.len() != site.width(spec) {
                return Err(Error::PatchWidth {
                    site: site.to_string(),
                    expected: site.width(spec),
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::SiteRange(format!("{site}: non-finite activation")));
            }
        }
        Ok(())
    }
}

/// What to do at a patched site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOp {
    /// Overwrite with the given vector.
    Replace(Vec<f32>),
    /// Overwrite with zeros.
    Zero,
    /// Add `alpha * vector`.
    AddScaled {
        /// Direction.
        vector: Vec<f32>,
        /// Gain.
        alpha: f32,
    },
}

impl PatchOp {
    fn width(&self) -> Option<usize> {
        match self {
            Self::Replace(v) | Self::AddScaled { vector: v, .. } => Some(v.len()),
            Self::Zero => None,
        }
    }

    pub(crate) fn apply(&self, target: &mut [f32]) {
        match self {
            Self::Replace(v) => target.copy_from_slice(v),
            Self::Zero => target.fill(0.0),
            Self::AddScaled { vector, alpha } => {
                for (t, x) in target.iter_mut().zip(vector) {
                    *t += alpha * x;
                }
            }
        }
    }
}

/// When a plan's entries are applied during generation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchScope {
    /// Whenever the entry's position is computed, at every step.
    #[default]
    EveryStep,
    /// Only during the prompt pass (step 0).
    PromptOnly,
    /// Only at the listed decode steps (0 = prompt pass).
    Steps(Vec<usize>),
}

impl PatchScope {
    /// Whether entries are live at `step`.
    pub fn active_at(&self, step: usize) -> bool {
        match self {
            Self::EveryStep => true,
            Self::PromptOnly => step == 0,
            Self::Steps(s) => s.contains(&step),
        }
    }
}

/// One patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    /// Target site.
    pub site: ResolvedSite,
    /// Operation.
    pub op: PatchOp,
}

/// A set of patches with an application scope. Sites are unique: inserting
/// an existing site replaces its operation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    entries: Vec<PatchEntry>,
    /// Application scope.
    pub scope: PatchScope,
}

impl PatchPlan {
    /// Empty plan applied at every step.
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty plan with a scope.
    pub fn with_scope(scope: PatchScope) -> Self {
        Self {
            entries: Vec::new(),
            scope,
        }
    }

    /// Add or replace the patch at `site`.
    pub fn insert(&mut self, site: ResolvedSite, op: PatchOp) -> &mut Self {
        if let Some(e) = self.entries.iter_mut().find(|e| e.site == site) {
            e.op = op;
        } else {
            self.entries.push(PatchEntry { site, op });
        }
        self
    }

    /// Builder-style [`insert`](Self::insert).
    #[must_use]
    pub fn with(mut self, site: ResolvedSite, op: PatchOp) -> Self {
        self.insert(site, op);
        self
    }

    /// Replace every site in `store` with its stored vector.
    pub fn replace_from(store: &ActivationStore, sites: &[ResolvedSite]) -> Result<Self> {
        let mut plan = Self::new();
        for s in sites {
            plan.insert(*s, PatchOp::Replace(store.require(s)?.to_vec()));
        }
        Ok(plan)
    }

    /// Merge another plan's entries into this one (later entries win).
    pub fn extend(&mut self, other: &PatchPlan) {
        for e in &other.entries {
            self.insert(e.site, e.op.clone());
        }
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether the plan has no entries.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Check indices and vector widths against the model.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for e in &self.entries {
            e.site.validate(spec, None)?;
            if let Some(w) = e.op.width() {
                let expected = e.site.width(spec);
                if w != expected {
                    return Err(Error::PatchWidth {
                        site: e.site.to_string(),
                        expected,
                        got: w,
                    });
                }
            }
            if let PatchOp::AddScaled { alpha, .. } = e.op {
                if !alpha.is_finite() {
                    return Err(Error::Intervention(format!(
                        "{}: non-finite steering gain",
                        e.site
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_and_position_strings_round_trip() {
        for c in [
            Component::ResidualPostBlock,
            Component::AttentionHead(14),
            Component::AttentionOutput,
            Component::MlpOutput,
        ] {
            assert_eq!(c.to_string().parse::<Component>().unwrap(), c);
        }
        for p in [
            Position::Relative(-2),
            Position::Relative(3),
            Position::LastWord,
            Position::Comma,
            Position::Absolute(7),
        ] {
            assert_eq!(p.to_string().parse::<Position>().unwrap(), p);
        }
        assert_eq!("newline".parse::<Position>().unwrap(), Position::NEWLINE);
        assert!("head.x".parse::<Component>().is_err());
    }

    #[test]
    fn plan_deduplicates_sites() {
        let s = ResolvedSite::new(1, 3, Component::MlpOutput);
        let mut plan = PatchPlan::new();
        plan.insert(s, PatchOp::Zero);
        plan.insert(s, PatchOp::Replace(vec![1.0; 4]));
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.entries()[0].op, PatchOp::Replace(vec![1.0; 4]));
    }

    #[test]
    fn ops_apply() {
        let mut v = vec![1.0, 2.0];
        PatchOp::AddScaled {
            vector: vec![1.0, -1.0],
            alpha: 1.5,
        }
        .apply(&mut v);
        assert_eq!(v, [2.5, 0.5]);
        PatchOp::Zero.apply(&mut v);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn scopes() {
        assert!(PatchScope::EveryStep.active_at(5));
        assert!(!PatchScope::PromptOnly.active_at(1));
        assert!(PatchScope::Steps(vec![0, 2]).active_at(2));
        assert!(!PatchScope::Steps(vec![0, 2]).active_at(1));
    }
}
