// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight loading from safetensors and model-directory resolution.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, IxDyn};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};

/// Named f32 tensors.
#[derive(Debug, Default, Clone)]
pub struct TensorMap {
    tensors: HashMap<String, ArrayD<f32>>,
}

impl TensorMap {
    /// Empty map.
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: ArrayD<f32>) {
        self.tensors.insert(name.into(), t);
    }

    /// Whether `name` is present.
    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    /// Whether the map is empty.
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Remove and return a tensor.
    pub(crate) fn take(&mut self, name: &str) -> Option<ArrayD<f32>> {
        self.tensors.remove(name)
    }

    pub(crate) fn take_matrix(&mut self, name: &str) -> Result<Array2<f32>> {
        let t = self
            .take(name)
            .ok_or_else(|| Error::ModelLoad(format!("missing tensor {name}")))?;
        t.into_dimensionality::<Ix2>()
            .map_err(|e| Error::ModelLoad(format!("{name}: expected a matrix ({e})")))
    }

    pub(crate) fn take_vector(&mut self, name: &str) -> Result<Array1<f32>> {
        self.take_opt_vector(name)?
            .ok_or_else(|| Error::ModelLoad(format!("missing tensor {name}")))
    }

    pub(crate) fn take_opt_vector(&mut self, name: &str) -> Result<Option<Array1<f32>>> {
        self.take(name)
            .map(|t| {
                t.into_dimensionality::<Ix1>()
                    .map_err(|e| Error::ModelLoad(format!("{name}: expected a vector ({e})")))
            })
            .transpose()
    }

    /// Load every tensor from one safetensors file, converting to f32.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::ModelLoad(format!("{}: {e}", path.display())))?;
        for (name, view) in st.tensors() {
            let shape: Vec<usize> = view.shape().to_vec();
            let data = view.data();
            let values: Vec<f32> = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
                    })
                    .collect(),
                // Integer buffers (e.g. causal-mask constants) are never weights.
                _ => continue,
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::ModelLoad(format!("{name}: {e}")))?;
            self.insert(name, arr);
        }
        Ok(())
    }

    /// Load all `*.safetensors` shards in a model directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        if files.is_empty() {
            return Err(Error::ModelLoad(format!(
                "no .safetensors files in {}",
                dir.display()
            )));
        }
        files.sort();
        let mut map = Self::new();
        for f in &files {
            map.load_file(f)?;
        }
        Ok(map)
    }

    /// Strip the first prefix under which `probe` exists, so that
    /// `model.layers.0...` style names become `layers.0...`.
    pub(crate) fn strip_prefix(&mut self, candidates: &[&str], probe: &str) -> Result<()> {
        let prefix = candidates
            .iter()
            .find(|p| self.contains(&format!("{p}{probe}")))
            .ok_or_else(|| {
                Error::ModelLoad(format!(
                    "cannot find {probe} under any of the prefixes {candidates:?}"
                ))
            })?;
        if prefix.is_empty() {
            return Ok(());
        }
        let old = std::mem::take(&mut self.tensors);
        for (k, v) in old {
            match k.strip_prefix(prefix) {
                Some(rest) => self.tensors.insert(rest.to_string(), v),
                None => self.tensors.insert(k, v),
            };
        }
        Ok(())
    }
}

/// Resolve a model id to a local directory.
///
/// Accepts a directory path directly, or an `org/name` id looked up in the
/// Hugging Face hub cache (`$HF_HUB_CACHE`, `$HF_HOME/hub`, or
/// `~/.cache/huggingface/hub`).
pub fn resolve_model_dir(model_id: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(model_id);
    if direct.join("config.json").is_file() {
        return Ok(direct);
    }
    let mut roots = Vec::new();
    if let Ok(p) = std::env::var("HF_HUB_CACHE") {
        roots.push(PathBuf::from(p));
    }
    if let Ok(p) = std::env::var("HF_HOME") {
        roots.push(PathBuf::from(p).join("hub"));
    }
    if let Ok(home) = std::env::var("HOME") {
        roots.push(PathBuf::from(home).join(".cache/huggingface/hub"));
    }
    let folder = format!("models--{}", model_id.replace('/', "--"));
    for root in &roots {
        let snapshots = root.join(&folder).join("snapshots");
        let Ok(entries) = std::fs::read_dir(&snapshots) else {
            continue;
        };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.json").is_file())
            .collect();
        dirs.sort();
        if let Some(d) = dirs.pop() {
            return Ok(d);
        }
    }
    Err(Error::ModelLoad(format!(
        "model {model_id:?} is neither a directory with config.json nor in the hub cache"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_prefix_picks_matching_candidate() {
        let mut m = TensorMap::new();
        m.insert("model.language_model.norm.weight", ArrayD::zeros(IxDyn(&[2])));
        m.insert("lm_head.weight", ArrayD::zeros(IxDyn(&[2, 2])));
        m.strip_prefix(&["model.", "model.language_model."], "norm.weight")
            .unwrap();
        assert!(m.contains("norm.weight"));
        assert!(m.contains("lm_head.weight"));
    }

    #[test]
    fn missing_model_dir_is_an_error() {
        assert!(resolve_model_dir("definitely/not-a-model-xyz").is_err());
    }
}
