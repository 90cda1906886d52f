// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward-pass parity against reference outputs recorded from the Hugging
//! Face implementations of each supported family.

use std::path::PathBuf;
use std::sync::Arc;

use plansite::backend::{
    ArchitectureFamily, Component, HfTokenizer, Model, ModelSpec, ResolvedSite,
    TokenizerAdapter,
};
use serde::Deserialize;

const TOL: f32 = 2e-4;

#[derive(Deserialize)]
struct Expected {
    input_ids: Vec<u32>,
    logits: Vec<Vec<f32>>,
    hidden_after_block0: Vec<Vec<f32>>,
    attention_layer0: Vec<Vec<Vec<f32>>>,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hf")
}

fn tokenizer() -> Arc<dyn TokenizerAdapter> {
    Arc::new(HfTokenizer::from_file(fixtures().join("tokenizer/tokenizer.json"), None).unwrap())
}

fn load(name: &str) -> (Model, Expected) {
    let dir = fixtures().join(name);
    let model = Model::from_dir_with_tokenizer(name, &dir, tokenizer()).unwrap();
    let text = std::fs::read_to_string(dir.join("expected.json")).unwrap();
    (model, serde_json::from_str(&text).unwrap())
}

fn max_abs_diff(a: impl IntoIterator<Item = f32>, b: impl IntoIterator<Item = f32>) -> f32 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn check_family(name: &str, family: ArchitectureFamily) {
    let (model, exp) = load(name);
    assert_eq!(model.spec().family, family);
    let ids = &exp.input_ids;

    let logits = model.logits(ids, None).unwrap();
    assert_eq!(logits.dim(), (exp.logits.len(), exp.logits[0].len()));
    let d = max_abs_diff(logits.iter().copied(), exp.logits.iter().flatten().copied());
    assert!(d < TOL, "{name} logits differ by {d}");

    let sites: Vec<ResolvedSite> = (0..ids.len())
        .map(|p| ResolvedSite::new(0, p, Component::ResidualPostBlock))
        .collect();
    let store = model.capture(ids, &sites).unwrap();
    for (p, site) in sites.iter().enumerate() {
        let got = store.require(site).unwrap();
        let d = max_abs_diff(got.iter().copied(), exp.hidden_after_block0[p].iter().copied());
        assert!(d < TOL, "{name} block-0 residual at {p} differs by {d}");
    }

    let attn = model.attention_weights(ids, 0..1).unwrap();
    let layer = attn.layer(0).unwrap();
    assert_eq!(layer.shape()[0], exp.attention_layer0.len());
    let d = max_abs_diff(
        layer.iter().copied(),
        exp.attention_layer0.iter().flatten().flatten().copied(),
    );
    assert!(d < TOL, "{name} layer-0 attention differs by {d}");
}

#[test]
fn llama_parity() {
    check_family("llama", ArchitectureFamily::Llama);
}

#[test]
fn qwen2_parity() {
    check_family("qwen2", ArchitectureFamily::Qwen2);
}

#[test]
fn qwen3_parity() {
    check_family("qwen3", ArchitectureFamily::Qwen3);
}

#[test]
fn gemma3_parity() {
    check_family("gemma3", ArchitectureFamily::Gemma3);
}

#[test]
fn gpt2_parity() {
    check_family("gpt2", ArchitectureFamily::Gpt2);
}

#[test]
fn head_slices_concatenate_to_attention_input() {
    let (model, exp) = load("qwen3");
    let spec = model.spec().clone();
    let ids = &exp.input_ids;
    let pos = ids.len() - 1;
    let heads: Vec<ResolvedSite> = (0..spec.n_heads)
        .map(|h| ResolvedSite::new(1, pos, Component::AttentionHead(h)))
        .collect();
    let store = model.capture(ids, &heads).unwrap();
    let widths: usize = heads.iter().map(|s| store.require(s).unwrap().len()).sum();
    assert_eq!(widths, spec.attention_width());
}

#[test]
fn tokenizer_round_trip() {
    let tok = tokenizer();
    let text = "A rhyming couplet:\nShe felt a sudden sense of fright,\nand hoped";
    let ids = tok.encode(text).unwrap();
    assert_eq!(tok.decode(&ids).unwrap(), text);
    let pieces: String = ids.iter().map(|&i| tok.token_text(i).unwrap()).collect();
    assert_eq!(pieces, text);
}

fn published(name: &str, config: serde_json::Value) -> ModelSpec {
    ModelSpec::from_hf_config(name, &config).unwrap()
}

#[test]
fn published_configs_report_expected_shapes() {
    let gemma = published(
        "gemma-3-27b",
        serde_json::json!({
            "model_type": "gemma3",
            "text_config": {
                "model_type": "gemma3_text",
                "num_hidden_layers": 62,
                "hidden_size": 5376,
                "num_attention_heads": 32,
                "num_key_value_heads": 16,
                "head_dim": 128,
                "intermediate_size": 21504,
                "query_pre_attn_scalar": 168,
                "sliding_window": 1024
            }
        }),
    );
    assert_eq!(
        (gemma.n_layers, gemma.hidden_size, gemma.vocab_size),
        (62, 5376, 262_208)
    );
    assert_eq!((gemma.n_heads, gemma.n_kv_heads, gemma.head_dim), (32, 16, 128));

    let qwen = published(
        "qwen3-32b",
        serde_json::json!({
            "model_type": "qwen3",
            "num_hidden_layers": 64,
            "hidden_size": 5120,
            "vocab_size": 151936,
            "num_attention_heads": 64,
            "num_key_value_heads": 8,
            "head_dim": 128,
            "intermediate_size": 25600
        }),
    );
    assert_eq!((qwen.n_layers, qwen.hidden_size, qwen.vocab_size), (64, 5120, 151_936));
    assert_eq!(qwen.attention_width(), 8192);

    let llama = published(
        "llama-3.1-70b",
        serde_json::json!({
            "model_type": "llama",
            "num_hidden_layers": 80,
            "hidden_size": 8192,
            "vocab_size": 128256,
            "num_attention_heads": 64,
            "num_key_value_heads": 8,
            "intermediate_size": 28672
        }),
    );
    assert_eq!((llama.n_layers, llama.hidden_size, llama.vocab_size), (80, 8192, 128_256));
    assert_eq!(llama.head_dim, 128);
    assert_eq!(llama.total_heads(), 80 * 64);
}

#[test]
fn unknown_family_is_rejected() {
    let err = ModelSpec::from_hf_config("x", &serde_json::json!({"model_type": "mamba"}));
    assert!(err.is_err());
}
