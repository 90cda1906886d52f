// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook and patching contracts of the decoder runtime on the toy models.

use plansite::backend::{
    load_model, CacheMode, Component, DecodeParams, Model, PatchOp, PatchPlan, PatchScope,
    ResolvedSite, StopCondition, TokenId,
};
use proptest::prelude::*;
use std::sync::OnceLock;

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| load_model("toy-qwen").unwrap())
}

fn tokens(text: &str) -> Vec<TokenId> {
    model().encode(text).unwrap()
}

fn max_rel_diff(a: &ndarray::Array2<f32>, b: &ndarray::Array2<f32>) -> f32 {
    let scale = b.iter().fold(0.0f32, |s, x| s.max(x.abs())).max(1e-12);
    a.iter().zip(b.iter()).fold(0.0f32, |s, (x, y)| s.max((x - y).abs())) / scale
}

fn component(i: usize, n_heads: usize) -> Component {
    match i % 4 {
        0 => Component::ResidualPostBlock,
        1 => Component::AttentionOutput,
        2 => Component::MlpOutput,
        _ => Component::AttentionHead(i / 4 % n_heads),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_patch_leaves_logits_unchanged(raw in prop::collection::vec((0usize..64, 0usize..64, 0usize..64), 1..8)) {
        let m = model();
        let ids = tokens("The children laughed in bliss,\nuntil they all");
        let spec = m.spec();
        let sites: Vec<ResolvedSite> = raw
            .iter()
            .map(|&(l, p, c)| ResolvedSite::new(l % spec.n_layers, p % ids.len(), component(c, spec.n_heads)))
            .collect();
        let store = m.capture(&ids, &sites).unwrap();
        let plan = PatchPlan::replace_from(&store, &sites).unwrap();
        let d = max_rel_diff(&m.logits(&ids, Some(&plan)).unwrap(), &m.logits(&ids, None).unwrap());
        prop_assert!(d < 1e-4, "relative difference {}", d);
    }
}

#[test]
fn empty_plan_equals_no_plan() {
    let m = model();
    let ids = tokens("She wandered home alone into the dark,\nand then she");
    let a = m.logits(&ids, Some(&PatchPlan::new())).unwrap();
    assert_eq!(a, m.logits(&ids, None).unwrap());
}

#[test]
fn final_layer_residual_substitution_gives_donor_logits() {
    let m = model();
    let last = m.spec().n_layers - 1;
    let a = tokens("The castle halls were filled with silent doom,\nwhen");
    let b = tokens("The castle halls were filled with silent dread,\nwhen");
    assert_eq!(a.len(), b.len());
    for p in 0..a.len() {
        let site = ResolvedSite::new(last, p, Component::ResidualPostBlock);
        let plan = PatchPlan::replace_from(&m.capture(&b, &[site]).unwrap(), &[site]).unwrap();
        let patched = m.logits(&a, Some(&plan)).unwrap();
        let donor = m.logits(&b, None).unwrap();
        assert_eq!(patched.row(p), donor.row(p));
    }
}

#[test]
fn all_head_slices_equal_attention_output_patch() {
    let m = model();
    let spec = m.spec();
    let a = tokens("I never knew the depth of such grief,\nas though the");
    let b = tokens("I never knew the depth of such pain,\nas though the");
    for layer in 0..spec.n_layers {
        let p = a.len() - 3;
        let heads: Vec<ResolvedSite> = (0..spec.n_heads)
            .map(|h| ResolvedSite::new(layer, p, Component::AttentionHead(h)))
            .collect();
        let out = [ResolvedSite::new(layer, p, Component::AttentionOutput)];
        let by_heads = PatchPlan::replace_from(&m.capture(&b, &heads).unwrap(), &heads).unwrap();
        let by_out = PatchPlan::replace_from(&m.capture(&b, &out).unwrap(), &out).unwrap();
        let d = max_rel_diff(
            &m.logits(&a, Some(&by_heads)).unwrap(),
            &m.logits(&a, Some(&by_out)).unwrap(),
        );
        assert!(d < 1e-4, "layer {layer}: {d}");
    }
}

#[test]
fn incremental_cache_matches_recompute_under_patching() {
    let m = model();
    let ids = tokens("She felt a sudden sense of fright,\nand hoped that");
    let site = ResolvedSite::new(2, ids.len() - 4, Component::ResidualPostBlock);
    let plan = PatchPlan::new().with(site, PatchOp::Zero);
    let inc = DecodeParams::greedy(12, StopCondition::Never);
    let rec = DecodeParams {
        cache: CacheMode::Recompute,
        ..inc.clone()
    };
    let a = m.generate(&ids, &inc, Some(&plan), &[]).unwrap();
    let b = m.generate(&ids, &rec, Some(&plan), &[]).unwrap();
    assert_eq!(a.tokens, b.tokens);
    let d = a
        .logprobs
        .iter()
        .zip(&b.logprobs)
        .fold(0.0f64, |s, (x, y)| s.max((x - y).abs()));
    assert!(d < 1e-4, "{d}");
}

#[test]
fn greedy_and_seeded_sampling_are_deterministic() {
    let m = model();
    let ids = tokens("The children laughed in joy,\nuntil they all");
    let g = DecodeParams::greedy(10, StopCondition::Newline);
    assert_eq!(
        m.generate(&ids, &g, None, &[]).unwrap().tokens,
        m.generate(&ids, &g, None, &[]).unwrap().tokens
    );
    let s = DecodeParams::default().with_seed(42);
    assert_eq!(
        m.generate(&ids, &s, None, &[]).unwrap().text,
        m.generate(&ids, &s, None, &[]).unwrap().text
    );
}

#[test]
fn attention_rows_are_causal_distributions() {
    let m = model();
    let ids = tokens("A rhyming couplet:\nThe castle halls were filled with silent doom,\n");
    let attn = m.attention_weights(&ids, 0..m.spec().n_layers).unwrap();
    for l in attn.layer_indices() {
        let a = attn.layer(l).unwrap();
        for h in 0..a.shape()[0] {
            for q in 0..a.shape()[1] {
                let row = a.slice(ndarray::s![h, q, ..]);
                let sum: f32 = row.sum();
                assert!((sum - 1.0).abs() < 1e-5, "L{l} H{h} q{q}: {sum}");
                assert!(row.iter().skip(q + 1).all(|&w| w == 0.0));
            }
        }
    }
}

#[test]
fn bad_sites_and_widths_are_rejected() {
    let m = model();
    let ids = tokens("The children laughed in bliss,\nuntil");
    let spec = m.spec();
    let out_of_range = ResolvedSite::new(spec.n_layers, 0, Component::ResidualPostBlock);
    assert!(m.capture(&ids, &[out_of_range]).is_err());
    let past_end = ResolvedSite::new(0, ids.len(), Component::ResidualPostBlock);
    assert!(m.capture(&ids, &[past_end]).is_err());
    let site = ResolvedSite::new(0, 0, Component::AttentionHead(0));
    let plan = PatchPlan::new().with(site, PatchOp::Replace(vec![0.0; spec.hidden_size]));
    assert!(m.logits(&ids, Some(&plan)).is_err());
}

#[test]
fn prompt_only_scope_leaves_decode_positions_alone() {
    let m = model();
    let ids = tokens("She wandered home alone into the night,\nand then she");
    let future = ids.len() + 1;
    let site = ResolvedSite::new(1, future, Component::ResidualPostBlock);
    let g = DecodeParams::greedy(6, StopCondition::Never);
    let plain = m.generate(&ids, &g, None, &[]).unwrap();
    let mut plan = PatchPlan::new().with(site, PatchOp::Zero);
    plan.scope = PatchScope::PromptOnly;
    assert_eq!(m.generate(&ids, &g, Some(&plan), &[]).unwrap().tokens, plain.tokens);
    plan.scope = PatchScope::EveryStep;
    let patched = m.generate(&ids, &g, Some(&plan), &[]).unwrap();
    assert_eq!(patched.tokens[..2], plain.tokens[..2]);
}
