//! Non-robust feature datasets: N-targeted adversarials over a training set,
//! relabeled once with each model's target, then used to train fresh models
//! that are scored on clean test data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{n_targeted, sample_target_classes, AttackSpec, Objective, NORM_SLACK};
use crate::data::idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxPixel};
use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::{accuracy, fit, History, Network, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source images attacked per batch; bounds peak memory on large sets.
const BUILD_SLAB: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonRobustBuildSpec {
    pub f1: String,
    pub f2: String,
    /// Must carry the n-targeted objective.
    pub attack: AttackSpec,
    /// Adversarials generated per source image, each with fresh targets.
    pub replication: usize,
    pub seed: u64,
}

impl NonRobustBuildSpec {
    /// 100 steps of size 0.1 with per-image random targets.
    pub fn new(f1: &str, f2: &str, epsilon: f64, seed: u64) -> Self {
        Self {
            f1: f1.to_string(),
            f2: f2.to_string(),
            attack: AttackSpec::n_targeted(epsilon),
            replication: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.attack.objective != Objective::NTargeted {
            return Err(LabError::InvalidAttack(format!(
                "non-robust sets need an n-targeted attack, got {}",
                self.attack.objective
            )));
        }
        if self.replication == 0 {
            return Err(LabError::InvalidConfig("replication must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which label a dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The first model's target.
    Y1,
    /// The second model's target.
    Y2,
    /// Fresh uniform labels unrelated to the attack.
    Random,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Y1 => "y1",
            Variant::Y2 => "y2",
            Variant::Random => "random",
        })
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y1" => Ok(Variant::Y1),
            "y2" => Ok(Variant::Y2),
            "random" => Ok(Variant::Random),
            _ => Err(LabError::InvalidConfig(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: usize,
    /// True label of the source image.
    pub y: usize,
    pub y1: usize,
    pub y2: usize,
    /// `F1(x') == y1`.
    pub f1_hit: bool,
    /// `F2(x') == y2`.
    pub f2_hit: bool,
}

/// Attack success counts over a build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SuccessStats {
    pub n: usize,
    pub f1_hits: usize,
    pub f2_hits: usize,
    pub joint_hits: usize,
    /// Items whose two targets coincide.
    pub same_targets: usize,
}

impl SuccessStats {
    /// Recounts from stored provenance.
    pub fn from_provenance(items: &[Provenance]) -> Self {
        let mut s = Self {
            n: items.len(),
            ..Self::default()
        };
        for p in items {
            s.f1_hits += p.f1_hit as usize;
            s.f2_hits += p.f2_hit as usize;
            s.joint_hits += (p.f1_hit && p.f2_hit) as usize;
            s.same_targets += (p.y1 == p.y2) as usize;
        }
        s
    }
}

/// Hit rates of a build: `P[F1(x')=Y1]`, `P[F2(x')=Y2]` and both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessBreakdown {
    pub f1_rate: f64,
    pub f2_rate: f64,
    pub joint_rate: f64,
    pub same_target_rate: f64,
}

pub const BREAKDOWN_HEADER: &str = "f1,f2,epsilon,n,f1_rate,f2_rate,joint_rate,same_target_rate";

/// Rates from counts; `None` for an empty build.
pub fn success_breakdown(stats: &SuccessStats) -> Option<SuccessBreakdown> {
    if stats.n == 0 {
        return None;
    }
    let n = stats.n as f64;
    Some(SuccessBreakdown {
        f1_rate: stats.f1_hits as f64 / n,
        f2_rate: stats.f2_hits as f64 / n,
        joint_rate: stats.joint_hits as f64 / n,
        same_target_rate: stats.same_targets as f64 / n,
    })
}

/// Relabeled adversarials. The two variants of one build share the image
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NonRobustDataset<T> {
    pub images: Arc<Tensor<T>>,
    pub labels: Vec<usize>,
    pub variant: Variant,
    pub num_classes: usize,
    pub provenance: Vec<Provenance>,
    pub spec: NonRobustBuildSpec,
    /// Seed of the random labels; `None` for target variants.
    pub label_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: NonRobustBuildSpec,
    variant: Variant,
    num_classes: usize,
    shape: Vec<usize>,
    label_seed: Option<u64>,
    provenance: Vec<Provenance>,
}

impl<T: Scalar> NonRobustDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stats(&self) -> SuccessStats {
        SuccessStats::from_provenance(&self.provenance)
    }

    /// Copies images and labels into a training set.
    pub fn to_dataset(&self) -> Result<Dataset<T>> {
        Dataset::new((*self.images).clone(), self.labels.clone(), self.num_classes)
    }

    /// Same images with uniform labels drawn from `seed`, independent of
    /// every attack target.
    pub fn random_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            labels: (0..self.len()).map(|_| rng.gen_range(0..self.num_classes)).collect(),
            variant: Variant::Random,
            label_seed: Some(seed),
            ..self.clone()
        }
    }

    /// Keeps the items on which the attack succeeded: on both models when
    /// `both` is set, otherwise on the model whose target labels the set.
    pub fn filtered(&self, both: bool) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let p = &self.provenance[i];
                match (both, self.variant) {
                    (false, Variant::Y1) => p.f1_hit,
                    (false, Variant::Y2) => p.f2_hit,
                    _ => p.f1_hit && p.f2_hit,
                }
            })
            .collect();
        Self {
            images: Arc::new(self.images.gather(&keep)),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            provenance: keep.iter().map(|&i| self.provenance[i]).collect(),
            ..self.clone()
        }
    }

    /// Checks labels against the recorded targets and every image against
    /// its source: same true label, within the budget, inside `[0, 1]`.
    pub fn verify(&self, source: &Dataset<T>) -> Result<()> {
        let n = self.len();
        if self.images.batch_len() != n || self.provenance.len() != n {
            return Err(LabError::InvalidTensor(format!(
                "{} images, {n} labels and {} provenance records",
                self.images.batch_len(),
                self.provenance.len()
            )));
        }
        if n > 0 && self.images.item_shape() != source.item_shape() {
            return Err(LabError::ShapeMismatch {
                expected: source.item_shape().to_vec(),
                actual: self.images.item_shape().to_vec(),
            });
        }
        let bound = self.spec.attack.epsilon + NORM_SLACK;
        for (i, p) in self.provenance.iter().enumerate() {
            let label = self.labels[i];
            let expected = match self.variant {
                Variant::Y1 => Some(p.y1),
                Variant::Y2 => Some(p.y2),
                Variant::Random => None,
            };
            if label >= self.num_classes || expected.is_some_and(|e| e != label) {
                return Err(LabError::Precondition(format!(
                    "item {i}: label {label} does not match the recorded {} target",
                    self.variant
                )));
            }
            if p.source_index >= source.len() || source.labels()[p.source_index] != p.y {
                return Err(LabError::Precondition(format!(
                    "item {i}: source {} does not carry label {}",
                    p.source_index, p.y
                )));
            }
            if p.y1 == p.y || p.y2 == p.y {
                return Err(LabError::Precondition(format!("item {i}: a target equals the true label")));
            }
            let x = source.images().item(p.source_index);
            let xa = self.images.item(i);
            let norm = x
                .iter()
                .zip(xa)
                .map(|(&a, &b)| (b - a).to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            if !(norm <= bound) {
                return Err(LabError::Precondition(format!(
                    "item {i}: perturbation norm {norm} exceeds {}",
                    self.spec.attack.epsilon
                )));
            }
            if xa.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(LabError::Precondition(format!("item {i}: pixel outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// File stem encoding the model pair, variant, budget and seed.
    pub fn stem(&self) -> String {
        let s = &self.spec;
        let mut stem = format!("nonrobust_{}_{}_{}_eps{}_seed{}", s.f1, s.f2, self.variant, s.attack.epsilon, s.seed);
        if let Some(ls) = self.label_seed {
            stem.push_str(&format!("_labels{ls}"));
        }
        stem
    }

    fn paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
        [
            dir.join(format!("{stem}-images.idx")),
            dir.join(format!("{stem}-labels.idx")),
            dir.join(format!("{stem}.json")),
        ]
    }

    /// Writes f64 IDX images, u8 IDX labels and a JSON provenance sidecar
    /// under [`NonRobustDataset::stem`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let [img, lbl, json] = Self::paths(dir.as_ref(), &self.stem());
        write_idx_images(&img, &self.images, IdxPixel::F64)?;
        write_idx_labels(&lbl, &self.labels)?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            variant: self.variant,
            num_classes: self.num_classes,
            shape: self.images.shape().to_vec(),
            label_seed: self.label_seed,
            provenance: self.provenance.clone(),
        };
        fs::write(&json, serde_json::to_string(&sidecar)?).map_err(|e| LabError::io(&json, e))?;
        Ok(vec![img, lbl, json])
    }

    /// Reads a dataset written by [`NonRobustDataset::save`] and re-verifies
    /// it against the set the adversarials were generated from.
    pub fn load(dir: impl AsRef<Path>, stem: &str, source: &Dataset<T>) -> Result<Self> {
        let [img, lbl, json] = Self::paths(dir.as_ref(), stem);
        let text = fs::read_to_string(&json).map_err(|e| LabError::io(&json, e))?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        let images = read_idx_images::<T>(&img)?.reshape(&sc.shape)?;
        let labels = read_idx_labels(&lbl)?;
        let ds = Self {
            images: Arc::new(images),
            labels,
            variant: sc.variant,
            num_classes: sc.num_classes,
            provenance: sc.provenance,
            spec: sc.spec,
            label_seed: sc.label_seed,
        };
        ds.verify(source).map_err(|e| LabError::format(&json, e.to_string()))?;
        Ok(ds)
    }
}

/// Output of [`build_nonrobust_sets`].
#[derive(Debug, Clone)]
pub struct NonRobustSets<T> {
    pub d1: NonRobustDataset<T>,
    pub d2: NonRobustDataset<T>,
    /// Counted while attacking.
    pub stats: SuccessStats,
}

/// Attacks every training image `replication` times toward independent
/// targets `(Y1, Y2)` for `(F1, F2)` and relabels the adversarials twice.
/// Items are ordered replication-major. Failed attacks are kept.
pub fn build_nonrobust_sets<T: Scalar>(
    train: &Dataset<T>,
    f1: &Network<T>,
    f2: &Network<T>,
    spec: &NonRobustBuildSpec,
) -> Result<NonRobustSets<T>> {
    spec.validate()?;
    for m in [f1, f2] {
        if m.input_shape() != train.item_shape() || m.num_classes() != train.num_classes() {
            return Err(LabError::Precondition(
                "models and training set disagree on input shape or class count".into(),
            ));
        }
    }
    let n = train.len();
    let c = train.num_classes();
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts = Vec::new();
    let mut provenance = Vec::with_capacity(n * spec.replication);
    let mut stats = SuccessStats::default();
    for _ in 0..spec.replication {
        let y1_all = sample_target_classes(train.labels(), c, seeds.next_u64())?;
        let y2_all = sample_target_classes(train.labels(), c, seeds.next_u64())?;
        for start in (0..n).step_by(BUILD_SLAB) {
            let end = (start + BUILD_SLAB).min(n);
            let x = train.images().slice_batch(start, end);
            let y1 = y1_all[start..end].to_vec();
            let y2 = y2_all[start..end].to_vec();
            let adv = n_targeted(&[f1, f2], &x, &[y1.clone(), y2.clone()], &spec.attack)?;
            let p1 = f1.predict(&adv)?;
            let p2 = f2.predict(&adv)?;
            for k in 0..end - start {
                let (h1, h2) = (p1[k] == y1[k], p2[k] == y2[k]);
                stats.n += 1;
                stats.f1_hits += h1 as usize;
                stats.f2_hits += h2 as usize;
                stats.joint_hits += (h1 && h2) as usize;
                stats.same_targets += (y1[k] == y2[k]) as usize;
                provenance.push(Provenance {
                    source_index: start + k,
                    y: train.labels()[start + k],
                    y1: y1[k],
                    y2: y2[k],
                    f1_hit: h1,
                    f2_hit: h2,
                });
            }
            parts.push(adv);
        }
    }
    let images = if parts.is_empty() {
        let mut shape = vec![0];
        shape.extend_from_slice(train.item_shape());
        Tensor::zeros(&shape)
    } else {
        Tensor::concat(&parts)?
    };
    let images = Arc::new(images);
    let d1 = NonRobustDataset {
        images: Arc::clone(&images),
        labels: provenance.iter().map(|p| p.y1).collect(),
        variant: Variant::Y1,
        num_classes: c,
        provenance: provenance.clone(),
        spec: spec.clone(),
        label_seed: None,
    };
    let d2 = NonRobustDataset {
        images,
        labels: provenance.iter().map(|p| p.y2).collect(),
        variant: Variant::Y2,
        provenance,
        ..d1.clone()
    };
    Ok(NonRobustSets { d1, d2, stats })
}

/// Retraining schedule: the analysis schedule with batch size 256.
pub fn retrain_config(seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        batch_size: 256,
        seed,
        ..OptimizerConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainResult {
    pub preset: String,
    pub variant: Variant,
    pub n_train: usize,
    /// Clean test accuracy after the last epoch.
    pub test_accuracy: f64,
    /// Evaluation-mode accuracy on the non-robust set after the last epoch.
    pub train_accuracy: f64,
    pub history: History,
}

/// Trains a fresh `preset` model (initialized from `model_seed`) on the
/// non-robust set and scores it on clean test data after the final epoch.
pub fn retrain_and_eval<T: Scalar>(
    ds: &NonRobustDataset<T>,
    preset: &str,
    model_seed: u64,
    cfg: &OptimizerConfig,
    clean_test: &Dataset<T>,
) -> Result<(RetrainResult, Network<T>)> {
    if clean_test.item_shape() != ds.images.item_shape() || clean_test.num_classes() != ds.num_classes {
        return Err(LabError::Precondition(
            "clean test set does not match the non-robust set".into(),
        ));
    }
    let train = ds.to_dataset()?;
    let mut model = Network::build(preset, train.item_shape(), ds.num_classes, model_seed)?;
    let history = fit(&mut model, &train, cfg, None)?;
    let result = RetrainResult {
        preset: preset.to_string(),
        variant: ds.variant,
        n_train: train.len(),
        test_accuracy: accuracy(&model, clean_test)?,
        train_accuracy: accuracy(&model, &train)?,
        history,
    };
    Ok((result, model))
}

pub const RETRAIN_HEADER: &str = "f1,f2,epsilon,variant,preset,n_train,train_accuracy,test_accuracy";

impl RetrainResult {
    pub fn csv_row(&self, spec: &NonRobustBuildSpec) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            spec.f1, spec.f2, spec.attack.epsilon, self.variant, self.preset, self.n_train, self.train_accuracy,
            self.test_accuracy
        )
    }
}
