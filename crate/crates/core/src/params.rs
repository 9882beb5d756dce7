//! Named parameter tensors, the Adam optimiser, and checkpoint files.
//!
//! Every trainable model keeps its weights in one [`ParamStore`]. The store
//! enumerates tensors in insertion order, which is the order gradients come
//! back from the tape and the order checkpoints are written in.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cmgf::FeatureTensor;
use crate::error::{read_text, write_file, Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Writes one CMGF file per tensor plus `params.json` indexing them.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = CheckpointIndex::default();
        for (i, (name, value)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("{i:04}.cmgf");
            FeatureTensor::from_mat(value).write(&dir.join(&file))?;
            index.params.push(CheckpointEntry {
                name: name.clone(),
                file,
                shape: [value.rows(), value.cols()],
            });
        }
        let json = serde_json::to_string_pretty(&index).expect("index serialises");
        write_file(&dir.join("params.json"), json)
    }

    /// Loads tensors into an existing store, matching by name and shape.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let text = read_text(&dir.join("params.json"))?;
        let index: CheckpointIndex =
            serde_json::from_str(&text).map_err(|e| Error::parse("params.json", e))?;
        let by_name: BTreeMap<&str, &CheckpointEntry> =
            index.params.iter().map(|e| (e.name.as_str(), e)).collect();
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let entry = by_name.get(name.as_str()).ok_or_else(|| {
                Error::validation(format!("checkpoint {} lacks parameter `{name}`", dir.display()))
            })?;
            let shape = (self.values[i].rows(), self.values[i].cols());
            if (entry.shape[0], entry.shape[1]) != shape {
                return Err(Error::validation(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, model expects {shape:?}",
                    entry.shape
                )));
            }
            let tensor = FeatureTensor::read(&dir.join(&entry.file))?;
            self.values[i] = tensor.to_mat(shape.0, shape.1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CheckpointIndex {
    params: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store
            .values
            .iter()
            .map(|v| Mat::zeros(v.rows(), v.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let norm = grads.iter().map(Mat::norm_sq).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((value, g), (m, v)) in store
            .values
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (value, g, m, v) = (value.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..value.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
