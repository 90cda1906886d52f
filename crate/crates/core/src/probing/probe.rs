// SPDX-License-Identifier: MIT OR Apache-2.0

//! Softmax-regression probes trained with AdamW.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{ProbeCell, ProbeDataset};
use crate::backend::TokenId;
use crate::corpus::Split;
use crate::error::{Error, Result};

/// Optimizer and label-space settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyperparams {
    /// Learning rate (flat).
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Minibatch size.
    pub batch_size: usize,
    /// Passes over the training split.
    pub epochs: usize,
    /// Shuffle seed.
    pub seed: u64,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator epsilon.
    pub eps: f64,
    /// Output classes: the full vocabulary when `None`, otherwise the most
    /// frequent training labels up to this many.
    pub max_labels: Option<usize>,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_labels: None,
        }
    }
}

/// Training record stored with a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    /// Settings used.
    pub hyperparams: ProbeHyperparams,
    /// Cell trained on.
    pub cell: Option<ProbeCell>,
    /// Model id, when known.
    pub model_id: Option<String>,
    /// Epochs run.
    pub epochs_completed: usize,
    /// Mean training cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    /// Training examples seen per epoch.
    pub train_examples: usize,
}

impl ProbeMeta {
    /// Loss after the last epoch.
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// `softmax(W h + b)` over a set of token classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: Vec<TokenId>,
    weight: Array2<f32>,
    bias: Array1<f32>,
    /// Training record.
    pub meta: ProbeMeta,
}

impl LinearProbe {
    /// Zero-initialized probe over `classes`.
    pub fn zeros(classes: Vec<TokenId>, dim: usize, meta: ProbeMeta) -> Self {
        let c = classes.len();
        Self {
            classes,
            weight: Array2::zeros((c, dim)),
            bias: Array1::zeros(c),
            meta,
        }
    }

    /// Assemble from explicit parameters.
    pub fn from_parts(
        classes: Vec<TokenId>,
        weight: Array2<f32>,
        bias: Array1<f32>,
        meta: ProbeMeta,
    ) -> Result<Self> {
        if classes.len() != weight.nrows() || bias.len() != weight.nrows() {
            return Err(Error::Probe(format!(
                "{} classes, {} weight rows, {} biases",
                classes.len(),
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self {
            classes,
            weight,
            bias,
            meta,
        })
    }

    /// Token id of each output row.
    pub fn classes(&self) -> &[TokenId] {
        &self.classes
    }

    /// Input width.
    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    /// `[classes, dim]` weights.
    pub fn weight(&self) -> &Array2<f32> {
        &self.weight
    }

    /// Per-class bias.
    pub fn bias(&self) -> &Array1<f32> {
        &self.bias
    }

    /// Raw scores `W h + b`.
    pub fn scores(&self, h: &[f32]) -> Result<Vec<f32>> {
        if h.len() != self.dim() {
            return Err(Error::Probe(format!(
                "input width {} for a width-{} probe",
                h.len(),
                self.dim()
            )));
        }
        let s = self.weight.dot(&ArrayView1::from(h)) + &self.bias;
        Ok(s.to_vec())
    }

    /// Class probabilities, aligned with [`classes`](Self::classes).
    pub fn apply(&self, h: &[f32]) -> Result<Vec<f32>> {
        let mut s = self.scores(h)?;
        softmax_in_place(&mut s);
        Ok(s)
    }

    /// The `k` highest-scoring token ids, ties broken by ascending id.
    pub fn top_k(&self, h: &[f32], k: usize) -> Result<Vec<TokenId>> {
        let s = self.scores(h)?;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| {
            s[b].total_cmp(&s[a])
                .then(self.classes[a].cmp(&self.classes[b]))
        });
        Ok(order.into_iter().take(k).map(|i| self.classes[i]).collect())
    }

    /// Write weights, bias, classes and metadata to a safetensors file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let w: Vec<u8> = self.weight.iter().flat_map(|x| x.to_le_bytes()).collect();
        let b: Vec<u8> = self.bias.iter().flat_map(|x| x.to_le_bytes()).collect();
        let c: Vec<u8> = self.classes.iter().flat_map(|x| x.to_le_bytes()).collect();
        let tensors = BTreeMap::from([
            ("weight", view(Dtype::F32, self.weight.shape().to_vec(), &w)?),
            ("bias", view(Dtype::F32, vec![self.bias.len()], &b)?),
            ("classes", view(Dtype::U32, vec![self.classes.len()], &c)?),
        ]);
        let meta = HashMap::from([("probe".to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize_to_file(tensors, Some(meta), path)
            .map_err(|e| Error::Probe(format!("{}: {e}", path.display())))
    }

    /// Read a probe written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Probe(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta: ProbeMeta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("probe"))
            .ok_or_else(|| bad("missing probe metadata".into()))
            .and_then(|s| serde_json::from_str(s).map_err(|e| bad(e.to_string())))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let get = |name: &str, dtype: Dtype| {
            let t = st.tensor(name).map_err(|e| bad(e.to_string()))?;
            if t.dtype() != dtype {
                return Err(bad(format!("{name} has dtype {:?}", t.dtype())));
            }
            Ok((t.shape().to_vec(), t.data().to_vec()))
        };
        let f32s = |d: &[u8]| -> Vec<f32> {
            d.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        };
        let (ws, wd) = get("weight", Dtype::F32)?;
        let (_, bd) = get("bias", Dtype::F32)?;
        let (_, cd) = get("classes", Dtype::U32)?;
        if ws.len() != 2 {
            return Err(bad("weight must be 2-d".into()));
        }
        let weight = Array2::from_shape_vec((ws[0], ws[1]), f32s(&wd))
            .map_err(|e| bad(e.to_string()))?;
        let bias = Array1::from(f32s(&bd));
        let classes: Vec<TokenId> = cd
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_parts(classes, weight, bias, meta).map_err(|e| bad(e.to_string()))
    }
}

fn view(dtype: Dtype, shape: Vec<usize>, data: &[u8]) -> Result<TensorView<'_>> {
    TensorView::new(dtype, shape, data).map_err(|e| Error::Probe(e.to_string()))
}

fn softmax_in_place(s: &mut [f32]) {
    let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in s.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in s.iter_mut() {
        *x /= sum;
    }
}

fn label_space(
    dataset: &ProbeDataset,
    vocab_size: usize,
    max_labels: Option<usize>,
) -> Vec<TokenId> {
    match max_labels {
        None => (0..vocab_size as TokenId).collect(),
        Some(cap) => {
            let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
            for e in dataset.split(Split::Train) {
                *counts.entry(e.label).or_default() += 1;
            }
            let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut classes: Vec<TokenId> = ranked.into_iter().take(cap).map(|(t, _)| t).collect();
            classes.sort_unstable();
            classes
        }
    }
}

struct AdamW {
    m_w: Array2<f32>,
    v_w: Array2<f32>,
    m_b: Array1<f32>,
    v_b: Array1<f32>,
    t: i32,
}

impl AdamW {
    fn new(c: usize, d: usize) -> Self {
        Self {
            m_w: Array2::zeros((c, d)),
            v_w: Array2::zeros((c, d)),
            m_b: Array1::zeros(c),
            v_b: Array1::zeros(c),
            t: 0,
        }
    }

    fn step(
        &mut self,
        hp: &ProbeHyperparams,
        w: &mut Array2<f32>,
        b: &mut Array1<f32>,
        gw: &Array2<f32>,
        gb: &Array1<f32>,
    ) {
        self.t += 1;
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        let lr = hp.lr as f32;
        let decay = 1.0 - lr * hp.weight_decay as f32;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let eps = hp.eps as f32;
        let update = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        };
        ndarray::Zip::from(w)
            .and(&mut self.m_w)
            .and(&mut self.v_w)
            .and(gw)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(b)
            .and(&mut self.m_b)
            .and(&mut self.v_b)
            .and(gb)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

/// Train a zero-initialized probe on the training split of `dataset` by
/// minibatch cross-entropy with AdamW. The example order is reshuffled each
/// epoch from `hp.seed`, so training is deterministic.
pub fn train_probe(
    dataset: &ProbeDataset,
    vocab_size: usize,
    hp: &ProbeHyperparams,
) -> Result<LinearProbe> {
    let train: Vec<_> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Probe(format!("{}: no training examples", dataset.cell)));
    }
    if hp.batch_size == 0 || !(hp.lr > 0.0) || !hp.weight_decay.is_finite() {
        return Err(Error::Probe(format!("invalid hyperparameters {hp:?}")));
    }
    dataset.validate(vocab_size)?;
    let classes = label_space(dataset, vocab_size, hp.max_labels);
    let index: HashMap<TokenId, usize> = classes.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let usable: Vec<(&[f32], usize)> = train
        .iter()
        .filter_map(|e| index.get(&e.label).map(|&i| (e.hidden.as_slice(), i)))
        .collect();
    let d = dataset.dim;
    let c = classes.len();
    let meta = ProbeMeta {
        hyperparams: hp.clone(),
        cell: Some(dataset.cell),
        model_id: None,
        epochs_completed: 0,
        loss_history: Vec::new(),
        train_examples: usable.len(),
    };
    let mut probe = LinearProbe::zeros(classes, d, meta);
    let mut opt = AdamW::new(c, d);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(hp.batch_size) {
            let n = batch.len();
            let mut x = Array2::<f32>::zeros((n, d));
            for (r, &i) in batch.iter().enumerate() {
                x.row_mut(r).assign(&ArrayView1::from(usable[i].0));
            }
            let mut g = x.dot(&probe.weight.t()) + &probe.bias;
            for (r, &i) in batch.iter().enumerate() {
                let mut row = g.row_mut(r);
                let slice = row.as_slice_mut().expect("row-major");
                softmax_in_place(slice);
                let y = usable[i].1;
                total -= f64::from(slice[y].max(f32::MIN_POSITIVE).ln());
                slice[y] -= 1.0;
            }
            g /= n as f32;
            let gw = g.t().dot(&x);
            let gb = g.sum_axis(Axis(0));
            opt.step(hp, &mut probe.weight, &mut probe.bias, &gw, &gb);
        }
        let mean = total / usable.len().max(1) as f64;
        probe.meta.loss_history.push(mean);
        probe.meta.epochs_completed = epoch + 1;
        if !mean.is_finite() || probe.weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::Probe(format!(
                "{}: training diverged at epoch {}; loss history {:?}",
                dataset.cell,
                epoch + 1,
                probe.meta.loss_history
            )));
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::{ExampleMeta, ProbeExample};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn synthetic(n: usize, d: usize, classes: usize, seed: u64) -> ProbeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let rule: Vec<Vec<f32>> = (0..classes)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut ds = ProbeDataset::new(ProbeCell::Lookahead { layer: 0, k: 1 }, d);
        for i in 0..n {
            let h: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let label = (0..classes)
                .max_by(|&a, &b| {
                    let sa: f32 = rule[a].iter().zip(&h).map(|(w, x)| w * x).sum();
                    let sb: f32 = rule[b].iter().zip(&h).map(|(w, x)| w * x).sum();
                    sa.total_cmp(&sb)
                })
                .unwrap() as TokenId;
            ds.push(ProbeExample {
                hidden: h,
                label,
                split: if i % 5 == 0 { Split::Validation } else { Split::Train },
                meta: ExampleMeta {
                    source_id: format!("s{i}"),
                    position: 0,
                    rhyme_word: None,
                    label_word: None,
                },
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn zero_epochs_returns_uniform_probe() {
        let ds = synthetic(50, 4, 3, 1);
        let hp = ProbeHyperparams {
            epochs: 0,
            ..ProbeHyperparams::default()
        };
        let p = train_probe(&ds, 3, &hp).unwrap();
        let probs = p.apply(&ds.examples[0].hidden).unwrap();
        assert!(probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
        assert_eq!(p.top_k(&ds.examples[0].hidden, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = synthetic(400, 8, 4, 2);
        let hp = ProbeHyperparams {
            lr: 1e-2,
            epochs: 5,
            ..ProbeHyperparams::default()
        };
        let a = train_probe(&ds, 4, &hp).unwrap();
        let b = train_probe(&ds, 4, &hp).unwrap();
        assert_eq!(a, b);
        let h = &a.meta.loss_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{h:?}");
        assert!(h[4] < 4f64.ln());
    }

    #[test]
    fn compact_label_space_keeps_frequent_labels() {
        let ds = synthetic(300, 4, 6, 3);
        let hp = ProbeHyperparams {
            epochs: 1,
            max_labels: Some(2),
            ..ProbeHyperparams::default()
        };
        let p = train_probe(&ds, 6, &hp).unwrap();
        assert_eq!(p.classes().len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = synthetic(100, 4, 3, 4);
        let p = train_probe(&ds, 3, &ProbeHyperparams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.safetensors");
        p.save(&path).unwrap();
        assert_eq!(LinearProbe::load(&path).unwrap(), p);
    }

    #[test]
    fn divergence_is_reported() {
        let mut ds = synthetic(64, 4, 3, 5);
        ds.examples[1].hidden[0] = f32::INFINITY;
        let err = train_probe(&ds, 3, &ProbeHyperparams::default()).unwrap_err();
        assert!(err.to_string().contains("diverged"), "{err}");
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let ds = ProbeDataset::new(ProbeCell::Lookahead { layer: 0, k: 1 }, 4);
        assert!(train_probe(&ds, 3, &ProbeHyperparams::default()).is_err());
    }

    proptest! {
        #[test]
        fn apply_is_a_probability_vector(
            w in proptest::collection::vec(-5.0f32..5.0, 12),
            h in proptest::collection::vec(-5.0f32..5.0, 4),
        ) {
            let meta = ProbeMeta {
                hyperparams: ProbeHyperparams::default(),
                cell: None,
                model_id: None,
                epochs_completed: 0,
                loss_history: vec![],
                train_examples: 0,
            };
            let mut p = LinearProbe::zeros(vec![0, 1, 2], 4, meta);
            p.weight = Array2::from_shape_vec((3, 4), w).unwrap();
            let probs = p.apply(&h).unwrap();
            prop_assert!(probs.iter().all(|&x| x >= 0.0));
            prop_assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
