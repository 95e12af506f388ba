use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AttackSpec;
use crate::data::idx::{read_idx_images, write_idx_images, IdxPixel};
use crate::error::{LabError, Result};
use crate::nn::Network;
use crate::scalar::{l2_norm, Scalar};
use crate::tensor::Tensor;

/// Slack allowed on the ε-ball when re-verifying stored perturbations.
pub const NORM_SLACK: f64 = 1e-9;

/// Attack output together with the data needed to re-check and reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch<T> {
    pub originals: Tensor<T>,
    pub adversarials: Tensor<T>,
    pub true_labels: Vec<usize>,
    /// Ids of the attacked models, in attack order.
    pub model_ids: Vec<String>,
    /// One target list per attacked model; empty for non-targeted attacks.
    pub targets: Vec<Vec<usize>>,
    /// Predictions of each attacked model on the adversarials.
    pub source_predictions: Vec<Vec<usize>>,
    pub spec: AttackSpec,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: AttackSpec,
    shape: Vec<usize>,
    true_labels: Vec<usize>,
    model_ids: Vec<String>,
    targets: Vec<Vec<usize>>,
    source_predictions: Vec<Vec<usize>>,
}

impl<T: Scalar> AdversarialBatch<T> {
    /// Records an attack result, evaluating every attacked model on it.
    pub fn new(
        models: &[(&str, &Network<T>)],
        originals: Tensor<T>,
        adversarials: Tensor<T>,
        true_labels: Vec<usize>,
        targets: Vec<Vec<usize>>,
        spec: AttackSpec,
    ) -> Result<Self> {
        let source_predictions = models
            .iter()
            .map(|(_, m)| m.predict(&adversarials))
            .collect::<Result<Vec<_>>>()?;
        let batch = Self {
            originals,
            adversarials,
            true_labels,
            model_ids: models.iter().map(|(id, _)| id.to_string()).collect(),
            targets,
            source_predictions,
            spec,
        };
        batch.verify()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    /// l2 size of each perturbation.
    pub fn perturbation_norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let d: Vec<f64> = self
                    .adversarials
                    .item(i)
                    .iter()
                    .zip(self.originals.item(i))
                    .map(|(a, o)| a.to_f64_lossy() - o.to_f64_lossy())
                    .collect();
                l2_norm(&d)
            })
            .collect()
    }

    /// Checks shapes, the ε-ball and the pixel box.
    pub fn verify(&self) -> Result<()> {
        let n = self.true_labels.len();
        if self.originals.shape() != self.adversarials.shape() || self.originals.batch_len() != n {
            return Err(LabError::ShapeMismatch {
                expected: self.originals.shape().to_vec(),
                actual: self.adversarials.shape().to_vec(),
            });
        }
        let lists = self.targets.iter().chain(&self.source_predictions);
        if lists.clone().any(|l| l.len() != n) {
            return Err(LabError::InvalidAttack("per-item label list of the wrong length".into()));
        }
        if !self.targets.is_empty() && self.targets.len() != self.model_ids.len() {
            return Err(LabError::InvalidAttack("one target list per attacked model expected".into()));
        }
        for (i, r) in self.perturbation_norms().into_iter().enumerate() {
            if r > self.spec.epsilon + NORM_SLACK {
                return Err(LabError::InvalidAttack(format!(
                    "item {i}: perturbation norm {r} exceeds epsilon {}",
                    self.spec.epsilon
                )));
            }
        }
        if self.adversarials.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(LabError::InvalidAttack("adversarial pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    fn paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
        [
            dir.join(format!("{stem}.adv.idx")),
            dir.join(format!("{stem}.orig.idx")),
            dir.join(format!("{stem}.json")),
        ]
    }

    /// Writes `<stem>.adv.idx`, `<stem>.orig.idx` (both f64 IDX) and the
    /// `<stem>.json` sidecar; returns the written paths.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let [adv, orig, json] = Self::paths(dir.as_ref(), stem);
        write_idx_images(&adv, &self.adversarials, IdxPixel::F64)?;
        write_idx_images(&orig, &self.originals, IdxPixel::F64)?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            shape: self.originals.shape().to_vec(),
            true_labels: self.true_labels.clone(),
            model_ids: self.model_ids.clone(),
            targets: self.targets.clone(),
            source_predictions: self.source_predictions.clone(),
        };
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| LabError::io(&json, e))?;
        Ok(vec![adv, orig, json])
    }

    /// Reads a batch written by [`AdversarialBatch::save`] and re-verifies it.
    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let [adv, orig, json] = Self::paths(dir.as_ref(), stem);
        let text = fs::read_to_string(&json).map_err(|e| LabError::io(&json, e))?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        let adversarials = read_idx_images::<T>(&adv)?.reshape(&sc.shape)?;
        let originals = read_idx_images::<T>(&orig)?.reshape(&sc.shape)?;
        let batch = Self {
            originals,
            adversarials,
            true_labels: sc.true_labels,
            model_ids: sc.model_ids,
            targets: sc.targets,
            source_predictions: sc.source_predictions,
            spec: sc.spec,
        };
        batch.verify().map_err(|e| LabError::format(&json, e.to_string()))?;
        Ok(batch)
    }
}
