// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-difference steering between rhyme schemes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    newline_reference, run_jobs, CellDescriptor, CellResult, Intervention, IntervalChoice, Job,
    SamplingConfig, SweepResult,
};
use crate::backend::{HookSite, Model, PatchOp, PatchPlan, Position, ResolvedSite, TokenId};
use crate::corpus::{resolve_positions, truncation_prompt, Couplet, PositionMap, Split};
use crate::error::{Error, Result};
use crate::phonology::{rhyme_key, PronunciationLexicon};
use crate::stats::BootstrapConfig;

/// A rhyme family with prompts whose first line ends in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhymeScheme {
    /// Scheme name (the anchor word).
    pub name: String,
    /// Most frequent first-line rhyme word; completions succeed by rhyming
    /// with it.
    pub anchor: String,
    /// Prompts used to fit vectors.
    pub train_prompts: Vec<String>,
    /// Prompts steered during evaluation.
    pub heldout_prompts: Vec<String>,
}

/// Group couplets by the rhyme key of `r1` and keep the `n_schemes` largest
/// families that have both training and held-out prompts.
pub fn schemes_from_couplets(
    couplets: &[Couplet],
    lexicon: &PronunciationLexicon,
    n_schemes: usize,
    max_train: usize,
    max_heldout: usize,
    preamble: &str,
) -> Result<Vec<RhymeScheme>> {
    let mut families: BTreeMap<String, Vec<&Couplet>> = BTreeMap::new();
    for c in couplets {
        if let Some(keys) = rhyme_key(&c.r1, lexicon) {
            families
                .entry(keys[0].phonemes().join(" "))
                .or_default()
                .push(c);
        }
    }
    let mut schemes: Vec<(usize, RhymeScheme)> = families
        .into_values()
        .filter_map(|members| {
            let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
            for c in &members {
                *freq.entry(c.r1.as_str()).or_default() += 1;
            }
            let anchor = freq
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(w, _)| w.to_string())?;
            let prompts = |split: Split, cap: usize| -> Vec<String> {
                members
                    .iter()
                    .filter(|c| c.split == split)
                    .take(cap)
                    .map(|c| truncation_prompt(c, preamble))
                    .collect()
            };
            let train_prompts = prompts(Split::Train, max_train);
            let heldout_prompts = prompts(Split::Validation, max_heldout);
            (!train_prompts.is_empty() && !heldout_prompts.is_empty()).then(|| {
                (
                    members.len(),
                    RhymeScheme {
                        name: anchor.clone(),
                        anchor,
                        train_prompts,
                        heldout_prompts,
                    },
                )
            })
        })
        .collect();
    schemes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.name.cmp(&b.1.name)));
    if schemes.len() < n_schemes {
        return Err(Error::Intervention(format!(
            "only {} rhyme schemes have both training and held-out prompts; {n_schemes} requested",
            schemes.len()
        )));
    }
    Ok(schemes.into_iter().take(n_schemes).map(|(_, s)| s).collect())
}

/// `mean(target activations) - mean(source activations)` at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    /// Source scheme.
    pub source: String,
    /// Target scheme.
    pub target: String,
    /// Site in prompt-relative coordinates.
    pub site: HookSite,
    /// Difference of means.
    pub vector: Vec<f32>,
    /// Source prompts averaged.
    pub n_source: usize,
    /// Target prompts averaged.
    pub n_target: usize,
}

struct Encoded {
    tokens: Vec<TokenId>,
    map: PositionMap,
}

fn encode_all(model: &Model, prompts: &[String]) -> Result<Vec<Encoded>> {
    prompts
        .iter()
        .map(|p| {
            let tokens = model.encode(p)?;
            let map = resolve_positions(&tokens, model.tokenizer())?;
            Ok(Encoded { tokens, map })
        })
        .collect()
}

fn mean_activation(model: &Model, prompts: &[Encoded], site: &HookSite) -> Result<Vec<f32>> {
    if prompts.is_empty() {
        return Err(Error::Intervention("no prompts to average".into()));
    }
    let mut acc: Vec<f64> = Vec::new();
    for p in prompts {
        let r = site.resolve(Some(&p.map))?;
        let store = model.capture(&p.tokens, &[r])?;
        let v = store.require(&r)?;
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += f64::from(*x);
        }
    }
    let n = prompts.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Fit one steering vector from raw prompts.
pub fn fit_steering_vector(
    model: &Model,
    source: (&str, &[String]),
    target: (&str, &[String]),
    site: HookSite,
) -> Result<SteeringVector> {
    let ms = mean_activation(model, &encode_all(model, source.1)?, &site)?;
    let mt = mean_activation(model, &encode_all(model, target.1)?, &site)?;
    Ok(SteeringVector {
        source: source.0.to_string(),
        target: target.0.to_string(),
        site,
        vector: mt.iter().zip(&ms).map(|(t, s)| t - s).collect(),
        n_source: source.1.len(),
        n_target: target.1.len(),
    })
}

/// Vectors for every ordered pair of distinct schemes at every site, from
/// each scheme's training prompts.
pub fn fit_steering_vectors(
    model: &Model,
    schemes: &[RhymeScheme],
    sites: &[HookSite],
) -> Result<Vec<SteeringVector>> {
    let encoded: Vec<Vec<Encoded>> = schemes
        .iter()
        .map(|s| encode_all(model, &s.train_prompts))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for site in sites {
        let means: Vec<Vec<f32>> = encoded
            .iter()
            .map(|e| mean_activation(model, e, site))
            .collect::<Result<_>>()?;
        for (si, s) in schemes.iter().enumerate() {
            for (ti, t) in schemes.iter().enumerate() {
                if si == ti {
                    continue;
                }
                out.push(SteeringVector {
                    source: s.name.clone(),
                    target: t.name.clone(),
                    site: *site,
                    vector: means[ti].iter().zip(&means[si]).map(|(a, b)| a - b).collect(),
                    n_source: s.train_prompts.len(),
                    n_target: t.train_prompts.len(),
                });
            }
        }
    }
    Ok(out)
}

fn vectors_hash(vectors: &[SteeringVector]) -> String {
    let mut h = Sha256::new();
    for v in vectors {
        h.update(v.source.as_bytes());
        h.update([0]);
        h.update(v.target.as_bytes());
        h.update([0]);
        h.update(v.site.to_string().as_bytes());
        for x in &v.vector {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Steer every held-out prompt of each source scheme toward each target
/// scheme at `site`. Clusters are ordered scheme pairs; a success rhymes
/// with the target scheme's anchor.
pub fn steered_cell(
    model: &Model,
    schemes: &[RhymeScheme],
    vectors: &[SteeringVector],
    alpha: f32,
    site: HookSite,
    sampling: &SamplingConfig,
    interval_choice: IntervalChoice,
    lexicon: &PronunciationLexicon,
) -> Result<CellResult> {
    if !alpha.is_finite() {
        return Err(Error::Intervention(format!("steering gain {alpha} is not finite")));
    }
    sampling.validate()?;
    let width = ResolvedSite::new(site.layer, 0, site.component).width(model.spec());
    let at_site: Vec<&SteeringVector> = vectors.iter().filter(|v| v.site == site).collect();
    if at_site.is_empty() {
        return Err(Error::Intervention(format!("no steering vectors at {site}")));
    }
    if let Some(v) = at_site.iter().find(|v| v.vector.len() != width) {
        return Err(Error::PatchWidth {
            site: site.to_string(),
            expected: width,
            got: v.vector.len(),
        });
    }
    let descriptor = CellDescriptor::new(
        Intervention::Steer {
            alpha,
            vectors: vectors_hash(vectors),
        },
        vec![site],
    );
    let by_name: BTreeMap<&str, &RhymeScheme> =
        schemes.iter().map(|s| (s.name.as_str(), s)).collect();
    let encoded: BTreeMap<&str, Vec<Encoded>> = schemes
        .iter()
        .map(|s| Ok((s.name.as_str(), encode_all(model, &s.heldout_prompts)?)))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for v in at_site {
        let (Some(src), Some(tgt)) = (by_name.get(v.source.as_str()), by_name.get(v.target.as_str()))
        else {
            continue;
        };
        for (k, p) in encoded[v.source.as_str()].iter().enumerate() {
            let r: ResolvedSite = site.resolve(Some(&p.map))?;
            let plan = PatchPlan::new().with(
                r,
                PatchOp::AddScaled {
                    vector: v.vector.clone(),
                    alpha,
                },
            );
            jobs.push(Job {
                cluster: format!("{}->{}", src.name, tgt.name),
                seed_key: format!("{}#{k}", src.name),
                prompt: &p.tokens,
                plan,
                target_word: tgt.anchor.clone(),
                other_word: src.anchor.clone(),
            });
        }
    }
    if jobs.is_empty() {
        return Err(Error::Intervention("no scheme pairs to steer".into()));
    }
    run_jobs(model, descriptor, jobs, sampling, interval_choice, lexicon)
}

/// Steered rate over every `(layer, position)`, with pair-clustered
/// bootstrap intervals.
pub fn steered_sweep(
    model: &Model,
    schemes: &[RhymeScheme],
    vectors: &[SteeringVector],
    alpha: f32,
    positions: &[Position],
    layers: &[usize],
    sampling: &SamplingConfig,
    bootstrap: &BootstrapConfig,
    lexicon: &PronunciationLexicon,
) -> Result<SweepResult> {
    if !alpha.is_finite() {
        return Err(Error::Intervention(format!("steering gain {alpha} is not finite")));
    }
    let mut cells = Vec::new();
    for &l in layers {
        for &p in positions {
            cells.push(steered_cell(
                model,
                schemes,
                vectors,
                alpha,
                HookSite::residual(l, p),
                sampling,
                IntervalChoice::ClusterBootstrap(*bootstrap),
                lexicon,
            )?);
        }
    }
    let mut sweep = SweepResult {
        layers: layers.to_vec(),
        positions: positions.to_vec(),
        cells,
        reference: None,
    };
    sweep.reference = newline_reference(&sweep);
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::load_model;
    use crate::corpus::{bundled_data_dir, load_couplets, DEFAULT_PREAMBLE};
    use crate::interventions::SeedScheme;

    fn fixture() -> (Model, PronunciationLexicon, Vec<RhymeScheme>) {
        let m = load_model("toy-qwen").unwrap();
        let lex = PronunciationLexicon::bundled();
        let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex).unwrap();
        let schemes = schemes_from_couplets(&set.couplets, &lex, 3, 4, 2, DEFAULT_PREAMBLE).unwrap();
        (m, lex, schemes)
    }

    #[test]
    fn self_vector_is_zero_and_pairs_are_antisymmetric() {
        let (m, _, schemes) = fixture();
        let site = HookSite::residual(3, Position::NEWLINE);
        let a = (schemes[0].name.as_str(), schemes[0].train_prompts.as_slice());
        let b = (schemes[1].name.as_str(), schemes[1].train_prompts.as_slice());
        let same = fit_steering_vector(&m, a, a, site).unwrap();
        assert!(same.vector.iter().all(|&x| x == 0.0));
        let ab = fit_steering_vector(&m, a, b, site).unwrap();
        let ba = fit_steering_vector(&m, b, a, site).unwrap();
        assert!(ab.vector.iter().zip(&ba.vector).all(|(x, y)| *x == -*y));
        assert!(ab.vector.iter().any(|&x| x != 0.0));
        let all = fit_steering_vectors(&m, &schemes, &[site]).unwrap();
        assert_eq!(all.len(), 6);
        let found = all.iter().find(|v| v.source == ab.source && v.target == ab.target).unwrap();
        assert_eq!(found.vector, ab.vector);
    }

    #[test]
    fn zero_gain_equals_unsteered_and_bad_inputs_fail() {
        let (m, lex, schemes) = fixture();
        let site = HookSite::residual(2, Position::NEWLINE);
        let vecs = fit_steering_vectors(&m, &schemes, &[site]).unwrap();
        let s = SamplingConfig { n_samples: 2, seed_scheme: SeedScheme::Shared, ..SamplingConfig::default() };
        let choice = IntervalChoice::Wilson { confidence: 0.95 };
        let zero = steered_cell(&m, &schemes, &vecs, 0.0, site, &s, choice, &lex).unwrap();
        let zeroed: Vec<SteeringVector> = vecs
            .iter()
            .map(|v| SteeringVector { vector: vec![0.0; v.vector.len()], ..v.clone() })
            .collect();
        let none = steered_cell(&m, &schemes, &zeroed, 1.0, site, &s, choice, &lex).unwrap();
        assert_eq!(zero.pairs, none.pairs);
        assert!(steered_cell(&m, &schemes, &vecs, f32::NAN, site, &s, choice, &lex).is_err());
        let narrow: Vec<SteeringVector> = vecs
            .iter()
            .map(|v| SteeringVector { vector: vec![0.0; 3], ..v.clone() })
            .collect();
        assert!(steered_cell(&m, &schemes, &narrow, 1.0, site, &s, choice, &lex).is_err());
    }

    #[test]
    fn too_many_schemes_requested() {
        let lex = PronunciationLexicon::bundled();
        let set = load_couplets(bundled_data_dir().join("couplets.jsonl"), &lex).unwrap();
        assert!(schemes_from_couplets(&set.couplets, &lex, 10_000, 1, 1, DEFAULT_PREAMBLE).is_err());
    }
}
