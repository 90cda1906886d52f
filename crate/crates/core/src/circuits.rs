// SPDX-License-Identifier: MIT OR Apache-2.0

//! Localizing the handoff to sparse component sets: attention-weight head
//! ranking, simultaneous top-k head patching, two-stage path patching, MLP
//! controls and random or comma control head sets.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Component, HookSite, Model, ModelSpec, Position, ResolvedSite};
use crate::corpus::PromptPair;
use crate::error::{Error, Result};
use crate::interventions::{
    resolve_pair_sites, run_cell, CellDescriptor, CellResult, FullResidualReference,
    Intervention, IntervalChoice, Replacement, SamplingConfig, Stage1Mode,
};
use crate::phonology::PronunciationLexicon;

/// One ranked head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    /// Layer.
    pub layer: usize,
    /// Head.
    pub head: usize,
    /// Mean attention weight from the query to the key position.
    pub score: f64,
}

/// Heads ordered by attention from a query to a key position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    /// Layers ranked.
    pub layers: Range<usize>,
    /// Query position.
    pub query: Position,
    /// Key position.
    pub key: Position,
    /// Heads by score descending, then layer and head ascending.
    pub entries: Vec<HeadScore>,
    /// `grid[layer - layers.start][head]` scores for heatmaps.
    pub grid: Vec<Vec<f64>>,
}

impl HeadRanking {
    /// The `k` highest-ranked heads.
    pub fn top(&self, k: usize) -> Result<HeadSet> {
        if k > self.entries.len() {
            return Err(Error::Intervention(format!(
                "k = {k} exceeds the {} heads ranked",
                self.entries.len()
            )));
        }
        Ok(HeadSet {
            heads: self.entries[..k].iter().map(|e| (e.layer, e.head)).collect(),
            provenance: HeadSetProvenance::TopK { k },
        })
    }
}

/// Mean over clean and corrupt passes of every pair of the attention weight
/// from `query` to `key`, for each head in `layers`.
pub fn rank_heads(
    model: &Model,
    pairs: &[PromptPair],
    layers: Range<usize>,
    query: Position,
    key: Position,
) -> Result<HeadRanking> {
    let spec = model.spec();
    if layers.start >= layers.end || layers.end > spec.n_layers {
        return Err(Error::SiteRange(format!(
            "layer range {layers:?} outside 0..{}",
            spec.n_layers
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Intervention("ranking needs at least one pair".into()));
    }
    let mut grid = vec![vec![0.0f64; spec.n_heads]; layers.len()];
    let mut passes = 0usize;
    for pair in pairs {
        for (tokens, map) in [
            (&pair.clean_tokens, &pair.clean_map),
            (&pair.corrupt_tokens, &pair.corrupt_map),
        ] {
            let q = query.resolve(Some(map))?;
            let k = key.resolve(Some(map))?;
            let attn = model.attention_weights(tokens, layers.clone())?;
            for (row, l) in grid.iter_mut().zip(layers.clone()) {
                for (h, cell) in row.iter_mut().enumerate() {
                    *cell += f64::from(attn.weight(l, h, q, k).unwrap_or(0.0));
                }
            }
            passes += 1;
        }
    }
    for v in grid.iter_mut().flatten() {
        *v = (*v / passes as f64).clamp(0.0, 1.0);
    }
    let mut entries: Vec<HeadScore> = grid
        .iter()
        .zip(layers.clone())
        .flat_map(|(row, layer)| {
            row.iter()
                .enumerate()
                .map(move |(head, &score)| HeadScore { layer, head, score })
        })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    Ok(HeadRanking {
        layers,
        query,
        key,
        entries,
        grid,
    })
}

/// How a head set was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSetProvenance {
    /// Highest-ranked heads.
    TopK {
        /// Set size.
        k: usize,
    },
    /// Uniform draw excluding the top-k.
    Random {
        /// Draw seed.
        seed: u64,
    },
    /// Heads attending most to the comma.
    CommaControl,
    /// Supplied by the caller.
    Manual,
}

/// A duplicate-free set of `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    /// Heads, in selection order.
    pub heads: Vec<(usize, usize)>,
    /// Origin.
    pub provenance: HeadSetProvenance,
}

impl HeadSet {
    /// Manual set, checked against `spec`.
    pub fn new(heads: Vec<(usize, usize)>, spec: &ModelSpec) -> Result<Self> {
        let s = Self {
            heads,
            provenance: HeadSetProvenance::Manual,
        };
        s.validate(spec)?;
        Ok(s)
    }

    /// No duplicates and every index within the model.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(l, h) in &self.heads {
            if l >= spec.n_layers || h >= spec.n_heads {
                return Err(Error::SiteRange(format!("head L{l}.H{h} outside the model")));
            }
            if !seen.insert((l, h)) {
                return Err(Error::Intervention(format!("head L{l}.H{h} listed twice")));
            }
        }
        Ok(())
    }

    /// Number of heads.
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    /// Whether the set is empty.
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Head-output sites at `position`.
    pub fn sites(&self, position: Position) -> Vec<HookSite> {
        self.heads
            .iter()
            .map(|&(l, h)| HookSite::new(l, position, Component::AttentionHead(h)))
            .collect()
    }
}

/// `k` heads drawn uniformly from the ranking's layer range, excluding its
/// top-k.
pub fn random_control(ranking: &HeadRanking, k: usize, seed: u64) -> Result<HeadSet> {
    let top: BTreeSet<(usize, usize)> = ranking.top(k)?.heads.into_iter().collect();
    let pool: Vec<(usize, usize)> = ranking
        .entries
        .iter()
        .map(|e| (e.layer, e.head))
        .filter(|h| !top.contains(h))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.len() < k {
        return Err(Error::Intervention(format!(
            "{} heads remain after excluding the top {k}; {k} needed",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pool.len(), k).into_vec();
    idx.sort_unstable();
    Ok(HeadSet {
        heads: idx.into_iter().map(|i| pool[i]).collect(),
        provenance: HeadSetProvenance::Random { seed },
    })
}

/// Top-k heads by attention from the newline to the separate comma token.
/// Fails on tokenizers that fuse the comma into the newline token.
pub fn comma_control(
    model: &Model,
    pairs: &[PromptPair],
    layers: Range<usize>,
    k: usize,
) -> Result<HeadSet> {
    let ranking = rank_heads(model, pairs, layers, Position::NEWLINE, Position::Comma)?;
    let mut set = ranking.top(k)?;
    set.provenance = HeadSetProvenance::CommaControl;
    Ok(set)
}

/// Rates for a sequence of component sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPatchResult {
    /// Strategy label.
    pub strategy: String,
    /// Set size per cell.
    pub ks: Vec<usize>,
    /// One cell per set.
    pub cells: Vec<CellResult>,
    /// Full-residual reference used for recovered fractions.
    pub reference: Option<FullResidualReference>,
}

impl PathPatchResult {
    /// `rate / reference rate` per cell, when a positive reference exists.
    pub fn recovered(&self) -> Vec<Option<f64>> {
        let r = self.reference.as_ref().map(|r| r.rate).filter(|&r| r > 0.0);
        self.cells
            .iter()
            .map(|c| r.filter(|_| c.is_complete()).map(|r| c.rate / r))
            .collect()
    }
}

/// Shared settings for the k-sweeps.
#[derive(Debug, Clone)]
pub struct SweepSettings<'a> {
    /// Sampling.
    pub sampling: &'a SamplingConfig,
    /// Interval per cell.
    pub interval: IntervalChoice,
    /// Rhyme lexicon.
    pub lexicon: &'a PronunciationLexicon,
    /// Reference for recovered fractions.
    pub reference: Option<FullResidualReference>,
}

fn head_set_sweep(
    model: &Model,
    pairs: &[PromptPair],
    strategy: &str,
    sets: &[HeadSet],
    make: impl Fn(&HeadSet) -> CellDescriptor,
    settings: &SweepSettings<'_>,
) -> Result<PathPatchResult> {
    let mut cells = Vec::with_capacity(sets.len());
    for set in sets {
        set.validate(model.spec())?;
        cells.push(run_cell(
            model,
            pairs,
            make(set),
            settings.sampling,
            settings.interval,
            settings.lexicon,
        )?);
    }
    Ok(PathPatchResult {
        strategy: strategy.to_string(),
        ks: sets.iter().map(HeadSet::len).collect(),
        cells,
        reference: settings.reference.clone(),
    })
}

/// Replace each set's head outputs at `position` with the corrupt prompt's,
/// all heads of a set at once.
pub fn head_set_patch(
    model: &Model,
    pairs: &[PromptPair],
    strategy: &str,
    sets: &[HeadSet],
    position: Position,
    settings: &SweepSettings<'_>,
) -> Result<PathPatchResult> {
    head_set_sweep(
        model,
        pairs,
        strategy,
        sets,
        |s| {
            CellDescriptor::new(
                Intervention::Patch {
                    replacement: Replacement::Corrupt,
                },
                s.sites(position),
            )
        },
        settings,
    )
}

/// [`head_set_patch`] over the ranking's top-k for each `k`.
pub fn topk_head_patch(
    model: &Model,
    pairs: &[PromptPair],
    ranking: &HeadRanking,
    ks: &[usize],
    position: Position,
    settings: &SweepSettings<'_>,
) -> Result<PathPatchResult> {
    let sets: Vec<HeadSet> = ks.iter().map(|&k| ranking.top(k)).collect::<Result<_>>()?;
    head_set_patch(model, pairs, "topk_heads", &sets, position, settings)
}

/// Two-stage path patching: cache each set's head outputs at `dest` from a
/// clean run whose `source` residual is corrupt, then generate from the
/// clean prompt with those cached outputs substituted.
pub fn two_stage_path_patch(
    model: &Model,
    pairs: &[PromptPair],
    strategy: &str,
    sets: &[HeadSet],
    source: Position,
    dest: Position,
    stage1: Stage1Mode,
    settings: &SweepSettings<'_>,
) -> Result<PathPatchResult> {
    head_set_sweep(
        model,
        pairs,
        strategy,
        sets,
        |s| {
            CellDescriptor::new(
                Intervention::PathPatch { source, stage1 },
                s.sites(dest),
            )
        },
        settings,
    )
}

/// Layers ranked by the mean L2 norm of the clean-minus-corrupt MLP output
/// at `position`.
pub fn rank_mlp_layers(
    model: &Model,
    pairs: &[PromptPair],
    layers: Range<usize>,
    position: Position,
) -> Result<Vec<(usize, f64)>> {
    if layers.start >= layers.end || layers.end > model.spec().n_layers {
        return Err(Error::SiteRange(format!(
            "layer range {layers:?} outside 0..{}",
            model.spec().n_layers
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Intervention("ranking needs at least one pair".into()));
    }
    let sites: Vec<HookSite> = layers
        .clone()
        .map(|l| HookSite::new(l, position, Component::MlpOutput))
        .collect();
    let mut score = vec![0.0f64; sites.len()];
    for pair in pairs {
        let resolved: Vec<ResolvedSite> = resolve_pair_sites(pair, &sites)?;
        let clean = model.capture(&pair.clean_tokens, &resolved)?;
        let corrupt = model.capture(&pair.corrupt_tokens, &resolved)?;
        for (s, r) in score.iter_mut().zip(&resolved) {
            let a = clean.require(r)?;
            let b = corrupt.require(r)?;
            *s += a
                .iter()
                .zip(b)
                .map(|(x, y)| f64::from(x - y).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    let mut ranked: Vec<(usize, f64)> = layers
        .zip(score)
        .map(|(l, s)| (l, s / pairs.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Replace the top-k ranked layers' MLP outputs at `position` with the
/// corrupt prompt's, for each `k`.
pub fn topk_mlp_patch(
    model: &Model,
    pairs: &[PromptPair],
    ranking: &[(usize, f64)],
    ks: &[usize],
    position: Position,
    settings: &SweepSettings<'_>,
) -> Result<PathPatchResult> {
    let mut cells = Vec::with_capacity(ks.len());
    for &k in ks {
        if k > ranking.len() {
            return Err(Error::Intervention(format!(
                "k = {k} exceeds the {} layers ranked",
                ranking.len()
            )));
        }
        let sites = ranking[..k]
            .iter()
            .map(|&(l, _)| HookSite::new(l, position, Component::MlpOutput))
            .collect();
        let d = CellDescriptor::new(
            Intervention::Patch {
                replacement: Replacement::Corrupt,
            },
            sites,
        );
        cells.push(run_cell(
            model,
            pairs,
            d,
            settings.sampling,
            settings.interval,
            settings.lexicon,
        )?);
    }
    Ok(PathPatchResult {
        strategy: "topk_mlp".into(),
        ks: ks.to_vec(),
        cells,
        reference: settings.reference.clone(),
    })
}

/// One cell per head, patched alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGrid {
    /// Layers covered.
    pub layers: Range<usize>,
    /// Heads per layer.
    pub n_heads: usize,
    /// Cells, layer-major.
    pub cells: Vec<CellResult>,
}

impl HeadGrid {
    /// Cell for `(layer, head)`.
    pub fn get(&self, layer: usize, head: usize) -> Option<&CellResult> {
        if !self.layers.contains(&layer) || head >= self.n_heads {
            return None;
        }
        self.cells
            .get((layer - self.layers.start) * self.n_heads + head)
    }
}

/// Patch each head in `layers` individually at `position`.
pub fn single_head_sweep(
    model: &Model,
    pairs: &[PromptPair],
    layers: Range<usize>,
    position: Position,
    settings: &SweepSettings<'_>,
) -> Result<HeadGrid> {
    let spec = model.spec();
    if layers.start >= layers.end || layers.end > spec.n_layers {
        return Err(Error::SiteRange(format!(
            "layer range {layers:?} outside 0..{}",
            spec.n_layers
        )));
    }
    let sets: Vec<HeadSet> = layers
        .clone()
        .flat_map(|l| (0..spec.n_heads).map(move |h| (l, h)))
        .map(|lh| HeadSet::new(vec![lh], spec))
        .collect::<Result<_>>()?;
    let r = head_set_patch(model, pairs, "single_head", &sets, position, settings)?;
    Ok(HeadGrid {
        layers,
        n_heads: spec.n_heads,
        cells: r.cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{load_model, PatchPlan};
    use crate::corpus::{build_prompt_pairs, bundled_data_dir, load_pair_specs};
    use crate::interventions::{clean_cell, plan_for_pair, SeedScheme};
    use std::sync::OnceLock;

    fn lex() -> &'static PronunciationLexicon {
        static L: OnceLock<PronunciationLexicon> = OnceLock::new();
        L.get_or_init(PronunciationLexicon::bundled)
    }

    fn setup(id: &str) -> (Model, Vec<PromptPair>) {
        let m = load_model(id).unwrap();
        let specs = load_pair_specs(bundled_data_dir().join("prompt_pairs.jsonl")).unwrap();
        let pairs = build_prompt_pairs(&specs, lex(), m.tokenizer()).pairs;
        (m, pairs)
    }

    fn shared(n: usize) -> SamplingConfig {
        SamplingConfig {
            n_samples: n,
            seed_scheme: SeedScheme::Shared,
            base_seed: 5,
            ..SamplingConfig::default()
        }
    }

    #[test]
    fn ranking_order_grid_and_nesting() {
        let (m, pairs) = setup("toy-qwen");
        let r = rank_heads(&m, &pairs, 1..5, Position::NEWLINE, Position::LastWord).unwrap();
        let spec = m.spec();
        assert_eq!(r.entries.len(), 4 * spec.n_heads);
        assert_eq!(r.grid.len(), 4);
        for w in r.entries.windows(2) {
            let (a, b) = (w[0], w[1]);
            assert!(a.score > b.score || (a.score == b.score && (a.layer, a.head) < (b.layer, b.head)));
        }
        assert!(r.entries.iter().all(|e| (0.0..=1.0).contains(&e.score)));
        for e in &r.entries {
            assert_eq!(r.grid[e.layer - 1][e.head], e.score);
        }
        for k in 0..r.entries.len() {
            let a = r.top(k).unwrap().heads;
            let b = r.top(k + 1).unwrap().heads;
            assert_eq!(a[..], b[..k]);
        }
        assert!(r.top(r.entries.len() + 1).is_err());
        assert!(rank_heads(&m, &pairs, 0..spec.n_layers + 1, Position::NEWLINE, Position::LastWord).is_err());
    }

    #[test]
    fn ranking_score_matches_direct_attention_mean() {
        let (m, pairs) = setup("toy-qwen");
        let r = rank_heads(&m, &pairs, 2..3, Position::NEWLINE, Position::LastWord).unwrap();
        let h = 1;
        let mut total = 0.0;
        for p in &pairs {
            for (t, map) in [(&p.clean_tokens, &p.clean_map), (&p.corrupt_tokens, &p.corrupt_map)] {
                let a = m.attention_weights(t, 2..3).unwrap();
                total += f64::from(a.weight(2, h, map.newline_index, map.last_word_index).unwrap());
            }
        }
        let expected = total / (2 * pairs.len()) as f64;
        assert!((r.grid[0][h] - expected).abs() < 1e-12);
    }

    #[test]
    fn controls_are_deterministic_and_disjoint() {
        let (m, pairs) = setup("toy-qwen");
        let r = rank_heads(&m, &pairs, 0..4, Position::NEWLINE, Position::LastWord).unwrap();
        let a = random_control(&r, 5, 3).unwrap();
        assert_eq!(a, random_control(&r, 5, 3).unwrap());
        let top = r.top(5).unwrap().heads;
        assert!(a.heads.iter().all(|h| !top.contains(h)));
        a.validate(m.spec()).unwrap();
        assert!(random_control(&r, r.entries.len(), 0).is_err());
        let err = comma_control(&m, &pairs, 0..4, 3).unwrap_err();
        assert!(err.to_string().contains("no comma position"), "{err}");
        let (g, gp) = setup("toy-gemma");
        let c = comma_control(&g, &gp, 0..4, 3).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.provenance, HeadSetProvenance::CommaControl);
    }

    #[test]
    fn head_set_validation() {
        let m = load_model("toy-qwen").unwrap();
        assert!(HeadSet::new(vec![(0, 0), (0, 0)], m.spec()).is_err());
        assert!(HeadSet::new(vec![(m.spec().n_layers, 0)], m.spec()).is_err());
    }

    #[test]
    fn all_heads_at_a_layer_equal_attention_output_patch() {
        let (m, pairs) = setup("toy-qwen");
        let spec = m.spec().clone();
        let layer = 3;
        let heads = HeadSet::new((0..spec.n_heads).map(|h| (layer, h)).collect(), &spec).unwrap();
        for pair in &pairs {
            let by_heads = CellDescriptor::new(
                Intervention::Patch { replacement: Replacement::Corrupt },
                heads.sites(Position::NEWLINE),
            );
            let by_out = CellDescriptor::new(
                Intervention::Patch { replacement: Replacement::Corrupt },
                vec![HookSite::new(layer, Position::NEWLINE, Component::AttentionOutput)],
            );
            let a = m.logits(&pair.clean_tokens, Some(&plan_for_pair(&m, pair, &by_heads, None).unwrap())).unwrap();
            let b = m.logits(&pair.clean_tokens, Some(&plan_for_pair(&m, pair, &by_out, None).unwrap())).unwrap();
            let scale = b.iter().fold(0.0f32, |s, x| s.max(x.abs()));
            let diff = a.iter().zip(b.iter()).fold(0.0f32, |s, (x, y)| s.max((x - y).abs()));
            assert!(diff <= 1e-4 * scale, "{diff} vs {scale}");
        }
    }

    #[test]
    fn k_zero_reproduces_the_clean_rate() {
        let (m, pairs) = setup("toy-qwen");
        let s = shared(2);
        let settings = SweepSettings {
            sampling: &s,
            interval: IntervalChoice::Wilson { confidence: 0.95 },
            lexicon: lex(),
            reference: None,
        };
        let clean = clean_cell(&m, &pairs, &s, settings.interval, lex()).unwrap();
        let r = rank_heads(&m, &pairs, 0..4, Position::NEWLINE, Position::LastWord).unwrap();
        let topk = topk_head_patch(&m, &pairs, &r, &[0], Position::NEWLINE, &settings).unwrap();
        assert_eq!(topk.cells[0].pairs, clean.pairs);
        let empty = HeadSet::new(Vec::new(), m.spec()).unwrap();
        let path = two_stage_path_patch(&m, &pairs, "path", &[empty], Position::LastWord, Position::NEWLINE, Stage1Mode::FullColumn, &settings).unwrap();
        assert_eq!(path.cells[0].pairs, clean.pairs);
        let mlp = rank_mlp_layers(&m, &pairs, 0..m.spec().n_layers, Position::NEWLINE).unwrap();
        let mp = topk_mlp_patch(&m, &pairs, &mlp, &[0], Position::NEWLINE, &settings).unwrap();
        assert_eq!(mp.cells[0].pairs, clean.pairs);
        assert!(topk_mlp_patch(&m, &pairs, &mlp, &[mlp.len() + 1], Position::NEWLINE, &settings).is_err());
    }

    #[test]
    fn path_patch_stage1_matches_manual_two_pass_construction() {
        let (m, pairs) = setup("toy-qwen");
        let pair = &pairs[0];
        let heads = HeadSet::new(vec![(2, 0), (4, 1)], m.spec()).unwrap();
        let d = CellDescriptor::new(
            Intervention::PathPatch { source: Position::LastWord, stage1: Stage1Mode::FullColumn },
            heads.sites(Position::NEWLINE),
        );
        let plan = plan_for_pair(&m, pair, &d, None).unwrap();
        let src = pair.clean_map.last_word_index;
        let col: Vec<ResolvedSite> = (0..4).map(|l| ResolvedSite::new(l, src, Component::ResidualPostBlock)).collect();
        let stage1 = PatchPlan::replace_from(&m.capture(&pair.corrupt_tokens, &col).unwrap(), &col).unwrap();
        let dest: Vec<ResolvedSite> = heads
            .heads
            .iter()
            .map(|&(l, h)| ResolvedSite::new(l, pair.clean_map.newline_index, Component::AttentionHead(h)))
            .collect();
        let cached = m.forward(&pair.clean_tokens, Some(&stage1), &dest).unwrap().store;
        let manual = PatchPlan::replace_from(&cached, &dest).unwrap();
        assert_eq!(plan.entries(), manual.entries());
        // The source corruption must actually reach the cached heads.
        let clean = m.capture(&pair.clean_tokens, &dest).unwrap();
        assert_ne!(clean.require(&dest[1]).unwrap(), cached.require(&dest[1]).unwrap());
    }

    #[test]
    fn mlp_only_patch_differs_from_residual_patch() {
        let (m, pairs) = setup("toy-qwen");
        let pair = &pairs[0];
        let n = m.spec().n_layers;
        let mlp = CellDescriptor::new(
            Intervention::Patch { replacement: Replacement::Corrupt },
            (0..n).map(|l| HookSite::new(l, Position::NEWLINE, Component::MlpOutput)).collect(),
        );
        let resid = CellDescriptor::new(
            Intervention::Patch { replacement: Replacement::Corrupt },
            vec![HookSite::residual(n - 1, Position::NEWLINE)],
        );
        let a = m.logits(&pair.clean_tokens, Some(&plan_for_pair(&m, pair, &mlp, None).unwrap())).unwrap();
        let b = m.logits(&pair.clean_tokens, Some(&plan_for_pair(&m, pair, &resid, None).unwrap())).unwrap();
        let p = pair.clean_map.newline_index;
        let diff = a.row(p).iter().zip(b.row(p)).fold(0.0f32, |s, (x, y)| s.max((x - y).abs()));
        assert!(diff > 1e-3);
    }

    #[test]
    fn single_head_grid_shape() {
        let (m, pairs) = setup("toy-qwen");
        let s = shared(1);
        let settings = SweepSettings {
            sampling: &s,
            interval: IntervalChoice::Wilson { confidence: 0.95 },
            lexicon: lex(),
            reference: None,
        };
        let g = single_head_sweep(&m, &pairs[..2], 3..4, Position::NEWLINE, &settings).unwrap();
        assert_eq!(g.cells.len(), m.spec().n_heads);
        assert!(g.get(3, m.spec().n_heads - 1).is_some());
        assert!(g.get(4, 0).is_none());
    }
}
