// SPDX-License-Identifier: MIT OR Apache-2.0

//! Capture activations, patch them into another prompt, and decode.

use plansite::backend::{
    load_model, Component, DecodeParams, PatchOp, PatchPlan, ResolvedSite, StopCondition,
};
use plansite::corpus::resolve_positions;

fn main() -> plansite::Result<()> {
    let model = load_model("toy-qwen")?;
    let spec = model.spec();
    println!(
        "{} ({}): {} layers, d={}, {} heads ({} kv)",
        spec.model_id, spec.family, spec.n_layers, spec.hidden_size, spec.n_heads, spec.n_kv_heads
    );
    let clean = model.encode("A rhyming couplet:\nThe children laughed in bliss,\nuntil they all")?;
    let corrupt = model.encode("A rhyming couplet:\nThe children laughed in joy,\nuntil they all")?;
    let map = resolve_positions(&clean, model.tokenizer())?;
    let layer = spec.n_layers / 2;
    let site = ResolvedSite::new(layer, map.newline_index, Component::ResidualPostBlock);
    let donor = model.capture(&corrupt, &[site])?;
    let plan = PatchPlan::replace_from(&donor, &[site])?;
    let params = DecodeParams {
        max_new_tokens: 12,
        stop: StopCondition::Newline,
        ..DecodeParams::default()
    }
    .with_seed(7);
    let plain = model.generate(&clean, &params, None, &[])?;
    let patched = model.generate(&clean, &params, Some(&plan), &[])?;
    println!("clean:   {:?}", plain.text);
    println!("patched: {:?}  ({site})", patched.text);
    let head = ResolvedSite::new(layer, map.newline_index, Component::AttentionHead(0));
    let zeroed = PatchPlan::new().with(head, PatchOp::Zero);
    let out = model.forward(&clean, Some(&zeroed), &[head])?;
    println!("head 0 ablated, captured width {}", out.store.require(&head)?.len());
    let attn = model.attention_weights(&clean, layer..layer + 1)?;
    let w = attn.weight(layer, 0, map.newline_index, map.last_word_index);
    println!("L{layer}H0 newline -> last word attention: {w:?}");
    Ok(())
}
