// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer forward pass with hook points and a KV cache.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayView2};

use super::arch::{Activation, Architecture, Positional, Rope};
use super::hooks::{ActivationStore, Component, PatchEntry, PatchScope, ResolvedSite};
use super::spec::ArchitectureFamily;
use super::tokenizer::TokenId;
use super::weights::TensorMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Linear {
    /// `[out, in]`.
    w: Array2<f32>,
    b: Option<Array1<f32>>,
}

impl Linear {
    fn forward(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.t());
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone)]
struct Norm {
    w: Array1<f32>,
    b: Option<Array1<f32>>,
    eps: f32,
    layer_norm: bool,
}

impl Norm {
    fn normalize_row(&self, row: &mut [f32]) {
        let n = row.len() as f32;
        if self.layer_norm {
            let mean = row.iter().sum::<f32>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (i, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv * self.w[i] + self.b.as_ref().map_or(0.0, |b| b[i]);
            }
        } else {
            let ms = row.iter().map(|x| x * x).sum::<f32>() / n;
            let inv = 1.0 / (ms + self.eps).sqrt();
            for (i, x) in row.iter_mut().enumerate() {
                *x *= inv * self.w[i];
            }
        }
    }

    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            self.normalize_row(row.as_slice_mut().expect("row-major"));
        }
        y
    }
}

#[derive(Debug, Clone)]
enum Mlp {
    Gated { gate: Linear, up: Linear, down: Linear },
    Plain { fc: Linear, proj: Linear },
}

impl Mlp {
    fn forward(&self, x: ArrayView2<'_, f32>, act: Activation) -> Array2<f32> {
        match self {
            Self::Gated { gate, up, down } => {
                let mut g = gate.forward(x);
                let u = up.forward(x);
                g.zip_mut_with(&u, |g, &u| *g = act.apply(*g) * u);
                down.forward(g.view())
            }
            Self::Plain { fc, proj } => {
                let mut h = fc.forward(x);
                h.mapv_inplace(|v| act.apply(v));
                proj.forward(h.view())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    q_norm: Option<Norm>,
    k_norm: Option<Norm>,
    post_attn: Option<Norm>,
    ln2: Norm,
    post_mlp: Option<Norm>,
    mlp: Mlp,
}

/// Per-layer key/value rows for already-processed positions.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    /// Whether nothing is cached.
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Patches, capture requests and collected outputs for one forward call.
#[derive(Debug)]
pub(crate) struct Hooks<'a> {
    pub patches: &'a [PatchEntry],
    pub scope: &'a PatchScope,
    pub prompt_len: usize,
    pub capture: &'a [ResolvedSite],
    pub store: ActivationStore,
    pub attention_layers: Option<Range<usize>>,
    pub attention: BTreeMap<usize, Array3<f32>>,
}

impl<'a> Hooks<'a> {
    pub fn new(
        patches: &'a [PatchEntry],
        scope: &'a PatchScope,
        prompt_len: usize,
        capture: &'a [ResolvedSite],
    ) -> Self {
        Self {
            patches,
            scope,
            prompt_len,
            capture,
            store: ActivationStore::default(),
            attention_layers: None,
            attention: BTreeMap::new(),
        }
    }

    fn step_of(&self, pos: usize) -> usize {
        if pos < self.prompt_len {
            0
        } else {
            pos - self.prompt_len + 1
        }
    }

    /// Apply matching patches to `rows` (positions `start..start+rows`),
    /// then record matching captures.
    fn visit(&mut self, layer: usize, kind: Component, rows: &mut Array2<f32>, start: usize, hd: usize) {
        let end = start + rows.nrows();
        let width = rows.ncols();
        let slot = |c: Component| -> Option<Range<usize>> {
            match (kind, c) {
                (Component::AttentionHead(_), Component::AttentionHead(h)) => Some(h * hd..(h + 1) * hd),
                (a, b) if a == b => Some(0..width),
                _ => None,
            }
        };
        for e in self.patches {
            let s = e.site;
            if s.layer != layer || s.position < start || s.position >= end {
                continue;
            }
            if !self.scope.active_at(self.step_of(s.position)) {
                continue;
            }
            if let Some(cols) = slot(s.component) {
                let mut row = rows.row_mut(s.position - start);
                let slice = &mut row.as_slice_mut().expect("row-major")[cols];
                e.op.apply(slice);
            }
        }
        for s in self.capture {
            if s.layer != layer || s.position < start || s.position >= end {
                continue;
            }
            if let Some(cols) = slot(s.component) {
                let row = rows.row(s.position - start);
                self.store.insert(*s, row.as_slice().expect("row-major")[cols].to_vec());
            }
        }
    }
}

/// Weights plus architecture: a runnable decoder.
#[derive(Debug, Clone)]
pub struct Transformer {
    arch: Architecture,
    embed: Array2<f32>,
    pos_embed: Option<Array2<f32>>,
    blocks: Vec<Block>,
    final_norm: Norm,
    lm_head: Option<Linear>,
    lm_bias: Option<Array1<f32>>,
}

fn unit_offset(mut n: Norm, on: bool) -> Norm {
    if on {
        n.w.mapv_inplace(|w| 1.0 + w);
    }
    n
}

impl Transformer {
    /// Build from Hugging Face–named tensors.
    pub fn from_tensors(arch: Architecture, mut t: TensorMap) -> Result<Self> {
        let model = match arch.spec.family {
            ArchitectureFamily::Gpt2 => Self::load_gpt2(arch, &mut t)?,
            _ => Self::load_llama_like(arch, &mut t)?,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn load_llama_like(arch: Architecture, t: &mut TensorMap) -> Result<Self> {
        t.strip_prefix(
            &["model.", "model.language_model.", "language_model.model.", ""],
            "embed_tokens.weight",
        )?;
        let eps = arch.norm_eps;
        let uo = arch.norm_unit_offset;
        let gemma = arch.spec.family == ArchitectureFamily::Gemma3;
        let norm = |t: &mut TensorMap, name: &str| -> Result<Norm> {
            Ok(unit_offset(
                Norm {
                    w: t.take_vector(name)?,
                    b: None,
                    eps,
                    layer_norm: false,
                },
                uo,
            ))
        };
        let opt_norm = |t: &mut TensorMap, name: &str| -> Result<Option<Norm>> {
            if t.contains(name) {
                norm(t, name).map(Some)
            } else {
                Ok(None)
            }
        };
        let linear = |t: &mut TensorMap, name: &str| -> Result<Linear> {
            Ok(Linear {
                w: t.take_matrix(&format!("{name}.weight"))?,
                b: t.take_opt_vector(&format!("{name}.bias"))?,
            })
        };
        let mut blocks = Vec::with_capacity(arch.spec.n_layers);
        for i in 0..arch.spec.n_layers {
            let p = format!("layers.{i}");
            let a = format!("{p}.self_attn");
            let (post_attn, ln2, post_mlp) = if gemma {
                (
                    Some(norm(t, &format!("{p}.post_attention_layernorm.weight"))?),
                    norm(t, &format!("{p}.pre_feedforward_layernorm.weight"))?,
                    Some(norm(t, &format!("{p}.post_feedforward_layernorm.weight"))?),
                )
            } else {
                (None, norm(t, &format!("{p}.post_attention_layernorm.weight"))?, None)
            };
            blocks.push(Block {
                ln1: norm(t, &format!("{p}.input_layernorm.weight"))?,
                q: linear(t, &format!("{a}.q_proj"))?,
                k: linear(t, &format!("{a}.k_proj"))?,
                v: linear(t, &format!("{a}.v_proj"))?,
                o: linear(t, &format!("{a}.o_proj"))?,
                q_norm: opt_norm(t, &format!("{a}.q_norm.weight"))?,
                k_norm: opt_norm(t, &format!("{a}.k_norm.weight"))?,
                post_attn,
                ln2,
                post_mlp,
                mlp: Mlp::Gated {
                    gate: linear(t, &format!("{p}.mlp.gate_proj"))?,
                    up: linear(t, &format!("{p}.mlp.up_proj"))?,
                    down: linear(t, &format!("{p}.mlp.down_proj"))?,
                },
            });
        }
        let embed = t.take_matrix("embed_tokens.weight")?;
        let final_norm = norm(t, "norm.weight")?;
        let lm_head = if arch.tied_embeddings && !t.contains("lm_head.weight") {
            None
        } else {
            Some(linear(t, "lm_head")?)
        };
        let lm_bias = t.take_opt_vector("lm_head_bias")?;
        Ok(Self {
            arch,
            embed,
            pos_embed: None,
            blocks,
            final_norm,
            lm_head,
            lm_bias,
        })
    }

    fn load_gpt2(arch: Architecture, t: &mut TensorMap) -> Result<Self> {
        t.strip_prefix(&["transformer.", ""], "wte.weight")?;
        let eps = arch.norm_eps;
        let d = arch.spec.hidden_size;
        let ln = |t: &mut TensorMap, name: &str| -> Result<Norm> {
            Ok(Norm {
                w: t.take_vector(&format!("{name}.weight"))?,
                b: t.take_opt_vector(&format!("{name}.bias"))?,
                eps,
                layer_norm: true,
            })
        };
        // Conv1D stores weights as [in, out].
        let conv = |t: &mut TensorMap, name: &str| -> Result<Linear> {
            Ok(Linear {
                w: t.take_matrix(&format!("{name}.weight"))?.reversed_axes().as_standard_layout().to_owned(),
                b: t.take_opt_vector(&format!("{name}.bias"))?,
            })
        };
        let mut blocks = Vec::with_capacity(arch.spec.n_layers);
        for i in 0..arch.spec.n_layers {
            let p = format!("h.{i}");
            let qkv = conv(t, &format!("{p}.attn.c_attn"))?;
            if qkv.out_dim() != 3 * d {
                return Err(Error::ModelLoad(format!("{p}.attn.c_attn: bad width")));
            }
            let part = |j: usize| Linear {
                w: qkv.w.slice(s![j * d..(j + 1) * d, ..]).to_owned(),
                b: qkv.b.as_ref().map(|b| b.slice(s![j * d..(j + 1) * d]).to_owned()),
            };
            blocks.push(Block {
                ln1: ln(t, &format!("{p}.ln_1"))?,
                q: part(0),
                k: part(1),
                v: part(2),
                o: conv(t, &format!("{p}.attn.c_proj"))?,
                q_norm: None,
                k_norm: None,
                post_attn: None,
                ln2: ln(t, &format!("{p}.ln_2"))?,
                post_mlp: None,
                mlp: Mlp::Plain {
                    fc: conv(t, &format!("{p}.mlp.c_fc"))?,
                    proj: conv(t, &format!("{p}.mlp.c_proj"))?,
                },
            });
        }
        let embed = t.take_matrix("wte.weight")?;
        let pos_embed = Some(t.take_matrix("wpe.weight")?);
        let final_norm = ln(t, "ln_f")?;
        let lm_head = if t.contains("lm_head.weight") && !arch.tied_embeddings {
            Some(Linear {
                w: t.take_matrix("lm_head.weight")?,
                b: None,
            })
        } else {
            None
        };
        let lm_bias = t.take_opt_vector("lm_head_bias")?;
        Ok(Self {
            arch,
            embed,
            pos_embed,
            blocks,
            final_norm,
            lm_head,
            lm_bias,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let spec = &self.arch.spec;
        let bad = |what: String| Err(Error::ModelLoad(format!("{}: {what}", spec.model_id)));
        if self.embed.dim() != (spec.vocab_size, spec.hidden_size) {
            return bad(format!("embedding shape {:?}", self.embed.dim()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.q.out_dim() != spec.attention_width()
                || b.k.out_dim() != spec.n_kv_heads * spec.head_dim
                || b.o.out_dim() != spec.hidden_size
            {
                return bad(format!("layer {i} attention projections disagree with config"));
            }
        }
        if let Some(h) = &self.lm_head {
            if h.out_dim() != spec.vocab_size {
                return bad(format!("lm_head rows {}", h.out_dim()));
            }
        }
        Ok(())
    }

    /// Architecture description.
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Fresh cache sized for this model.
    pub fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    fn rope(&self, layer: usize) -> Option<&Rope> {
        match &self.arch.positional {
            Positional::Rotary(r) => r.get(layer),
            Positional::Learned => None,
        }
    }

    fn apply_rope(rope: &Rope, rows: &mut Array2<f32>, heads: usize, hd: usize, start: usize) {
        let half = hd / 2;
        for (t, mut row) in rows.rows_mut().into_iter().enumerate() {
            let pos = (start + t) as f32;
            let row = row.as_slice_mut().expect("row-major");
            for h in 0..heads {
                let x = &mut row[h * hd..(h + 1) * hd];
                for i in 0..half {
                    let (sin, cos) = (pos * rope.inv_freq[i]).sin_cos();
                    let a = x[i];
                    let b = x[i + half];
                    x[i] = a * cos - b * sin;
                    x[i + half] = b * cos + a * sin;
                }
            }
        }
    }

    fn head_norm(norm: &Norm, rows: &mut Array2<f32>, heads: usize, hd: usize) {
        for mut row in rows.rows_mut() {
            let row = row.as_slice_mut().expect("row-major");
            for h in 0..heads {
                norm.normalize_row(&mut row[h * hd..(h + 1) * hd]);
            }
        }
    }

    /// Run `tokens` as positions `cache.len()..`, appending to the cache.
    /// Returns logits for every new position, `[tokens.len(), |V|]`.
    pub(crate) fn forward(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache,
        hooks: &mut Hooks<'_>,
    ) -> Result<Array2<f32>> {
        let spec = &self.arch.spec;
        let (d, nh, nkv, hd) = (spec.hidden_size, spec.n_heads, spec.n_kv_heads, spec.head_dim);
        let start = cache.len;
        let t_len = tokens.len();
        if start + t_len > self.arch.max_positions {
            return Err(Error::SiteRange(format!(
                "sequence of {} tokens exceeds the model's {} positions",
                start + t_len,
                self.arch.max_positions
            )));
        }
        let mut x = Array2::<f32>::zeros((t_len, d));
        for (t, &id) in tokens.iter().enumerate() {
            if id as usize >= spec.vocab_size {
                return Err(Error::Tokenizer(format!("token id {id} >= vocab {}", spec.vocab_size)));
            }
            let mut row = x.row_mut(t);
            row.assign(&self.embed.row(id as usize));
            row *= self.arch.embed_scale;
            if let Some(pe) = &self.pos_embed {
                row += &pe.row(start + t);
            }
        }
        let group = nh / nkv;
        let mut scores = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.ln1.forward(&x);
            let mut q = block.q.forward(h.view());
            let mut k = block.k.forward(h.view());
            let v = block.v.forward(h.view());
            if let Some(n) = &block.q_norm {
                Self::head_norm(n, &mut q, nh, hd);
            }
            if let Some(n) = &block.k_norm {
                Self::head_norm(n, &mut k, nkv, hd);
            }
            if let Some(r) = self.rope(l) {
                Self::apply_rope(r, &mut q, nh, hd, start);
                Self::apply_rope(r, &mut k, nkv, hd, start);
            }
            cache.keys[l].extend(k.iter());
            cache.values[l].extend(v.iter());
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let kw = nkv * hd;
            let want_attn = hooks
                .attention_layers
                .as_ref()
                .is_some_and(|r| r.contains(&l));
            let mut attn = want_attn.then(|| Array3::<f32>::zeros((nh, t_len, start + t_len)));
            let mut z = Array2::<f32>::zeros((t_len, nh * hd));
            let window = self.arch.windows[l];
            for t in 0..t_len {
                let p = start + t;
                let lo = window.map_or(0, |w| (p + 1).saturating_sub(w));
                let qrow = q.row(t);
                let qrow = qrow.as_slice().expect("row-major");
                let mut zrow = z.row_mut(t);
                let zrow = zrow.as_slice_mut().expect("row-major");
                for head in 0..nh {
                    let kvh = head / group;
                    let qv = &qrow[head * hd..(head + 1) * hd];
                    scores.clear();
                    let mut max = f32::NEG_INFINITY;
                    for j in lo..=p {
                        let kv = &keys[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                        let sdot = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f32>() * self.arch.attn_scale;
                        max = max.max(sdot);
                        scores.push(sdot);
                    }
                    let mut total = 0.0f32;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let out = &mut zrow[head * hd..(head + 1) * hd];
                    for (jj, sc) in scores.iter_mut().enumerate() {
                        *sc /= total;
                        let j = lo + jj;
                        let vv = &values[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                        for (o, vx) in out.iter_mut().zip(vv) {
                            *o += *sc * vx;
                        }
                        if let Some(a) = attn.as_mut() {
                            a[[head, t, j]] = *sc;
                        }
                    }
                }
            }
            if let Some(a) = attn {
                hooks.attention.insert(l, a);
            }
            hooks.visit(l, Component::AttentionHead(0), &mut z, start, hd);
            let mut a = block.o.forward(z.view());
            if let Some(n) = &block.post_attn {
                a = n.forward(&a);
            }
            hooks.visit(l, Component::AttentionOutput, &mut a, start, hd);
            x += &a;
            let h2 = block.ln2.forward(&x);
            let mut m = block.mlp.forward(h2.view(), self.arch.activation);
            if let Some(n) = &block.post_mlp {
                m = n.forward(&m);
            }
            hooks.visit(l, Component::MlpOutput, &mut m, start, hd);
            x += &m;
            hooks.visit(l, Component::ResidualPostBlock, &mut x, start, hd);
        }
        cache.len += t_len;
        let hfin = self.final_norm.forward(&x);
        let mut logits = match &self.lm_head {
            Some(head) => head.forward(hfin.view()),
            None => hfin.dot(&self.embed.t()),
        };
        if let Some(b) = &self.lm_bias {
            logits += b;
        }
        if let Some(cap) = self.arch.final_softcap {
            logits.mapv_inplace(|v| (v / cap).tanh() * cap);
        }
        Ok(logits)
    }

    /// Drop cached positions from `len` onward.
    pub(crate) fn truncate_cache(&self, cache: &mut KvCache, len: usize) {
        let kw = self.arch.spec.n_kv_heads * self.arch.spec.head_dim;
        for l in 0..cache.keys.len() {
            cache.keys[l].truncate(len * kw);
            cache.values[l].truncate(len * kw);
        }
        cache.len = cache.len.min(len);
    }
}
