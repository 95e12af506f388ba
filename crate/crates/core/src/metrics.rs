//! Class-aware transfer outcomes.
//!
//! An adversarial example counts for a (source, target) pair only when both
//! models classify its original correctly and it fools the source. The
//! target's prediction then falls into exactly one of three outcomes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, sample_target_classes, AttackSpec, Objective};
use crate::data::idx::{read_idx_images, write_idx_images, IdxPixel};
use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Unfooled,
    DifferentMistake,
    SameMistake,
}

impl Outcome {
    /// Outcome of target label `y2` for true label `y` and source mistake `y1`.
    pub fn from_labels(y: usize, y1: usize, y2: usize) -> Self {
        if y2 == y {
            Outcome::Unfooled
        } else if y2 == y1 {
            Outcome::SameMistake
        } else {
            Outcome::DifferentMistake
        }
    }
}

/// One member of the eligible set.
#[derive(Debug, Clone, PartialEq)]
pub struct EligibleItem<T> {
    /// Index of the original in its dataset.
    pub index: usize,
    pub x: Vec<T>,
    pub x_adv: Vec<T>,
    pub y: usize,
    /// The source model's label on `x_adv`.
    pub y1: usize,
    /// Intended target when the attack was targeted.
    pub target: Option<usize>,
}

/// Eligible items sharing one item shape, plus how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct EligibleSet<T> {
    pub item_shape: Vec<usize>,
    pub items: Vec<EligibleItem<T>>,
    pub attack: AttackSpec,
    /// Images drawn before filtering.
    pub sampled: usize,
    /// Drawn images that every gate model classified correctly.
    pub all_correct: usize,
}

impl<T: Scalar> EligibleSet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn stack(&self, f: impl Fn(&EligibleItem<T>) -> &[T]) -> Tensor<T> {
        let rows: Vec<&[T]> = self.items.iter().map(f).collect();
        Tensor::stack(&self.item_shape, &rows).expect("items share the set's shape")
    }

    pub fn originals(&self) -> Tensor<T> {
        self.stack(|it| &it.x)
    }

    pub fn adversarials(&self) -> Tensor<T> {
        self.stack(|it| &it.x_adv)
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.y).collect()
    }

    /// Re-checks `F1(x) = y`, `F2(x) = y` and `F1(x') = y1 ≠ y` for every item.
    pub fn verify(&self, f1: &Network<T>, f2: &Network<T>) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let (x, xa) = (self.originals(), self.adversarials());
        let (p1, p2, pa) = (f1.predict(&x)?, f2.predict(&x)?, f1.predict(&xa)?);
        for (i, it) in self.items.iter().enumerate() {
            if p1[i] != it.y || p2[i] != it.y || pa[i] != it.y1 || it.y1 == it.y {
                return Err(LabError::Precondition(format!(
                    "eligible item {i} (source index {}) fails its defining predicates",
                    it.index
                )));
            }
        }
        Ok(())
    }

    /// Writes `<stem>.orig.idx`, `<stem>.adv.idx` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let paths = eligible_paths(dir, stem);
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.item_shape);
        let x = Tensor::new(shape.clone(), self.items.iter().flat_map(|it| it.x.clone()).collect())?;
        let xa = Tensor::new(shape, self.items.iter().flat_map(|it| it.x_adv.clone()).collect())?;
        write_idx_images(&paths[0], &x, IdxPixel::F64)?;
        write_idx_images(&paths[1], &xa, IdxPixel::F64)?;
        let side = EligibleSidecar {
            item_shape: self.item_shape.clone(),
            attack: self.attack.clone(),
            sampled: self.sampled,
            all_correct: self.all_correct,
            index: self.items.iter().map(|it| it.index).collect(),
            y: self.items.iter().map(|it| it.y).collect(),
            y1: self.items.iter().map(|it| it.y1).collect(),
            target: self.items.iter().map(|it| it.target).collect(),
        };
        fs::write(&paths[2], serde_json::to_string(&side)?).map_err(|e| LabError::io(&paths[2], e))?;
        Ok(paths.to_vec())
    }

    /// Reads a saved set and re-verifies every item against the two models.
    pub fn load(dir: impl AsRef<Path>, stem: &str, f1: &Network<T>, f2: &Network<T>) -> Result<Self> {
        let paths = eligible_paths(dir.as_ref(), stem);
        let text = fs::read_to_string(&paths[2]).map_err(|e| LabError::io(&paths[2], e))?;
        let side: EligibleSidecar = serde_json::from_str(&text)?;
        let n = side.y.len();
        let mut shape = vec![n];
        shape.extend_from_slice(&side.item_shape);
        let x = read_idx_images::<T>(&paths[0])?.reshape(&shape)?;
        let xa = read_idx_images::<T>(&paths[1])?.reshape(&shape)?;
        if [side.index.len(), side.y1.len(), side.target.len()].iter().any(|&l| l != n) {
            return Err(LabError::format(&paths[2], "per-item lists differ in length"));
        }
        let items = (0..n)
            .map(|i| EligibleItem {
                index: side.index[i],
                x: x.item(i).to_vec(),
                x_adv: xa.item(i).to_vec(),
                y: side.y[i],
                y1: side.y1[i],
                target: side.target[i],
            })
            .collect();
        let set = Self {
            item_shape: side.item_shape,
            items,
            attack: side.attack,
            sampled: side.sampled,
            all_correct: side.all_correct,
        };
        set.verify(f1, f2)?;
        Ok(set)
    }
}

fn eligible_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{stem}.orig.idx")),
        dir.join(format!("{stem}.adv.idx")),
        dir.join(format!("{stem}.json")),
    ]
}

#[derive(Serialize, Deserialize)]
struct EligibleSidecar {
    item_shape: Vec<usize>,
    attack: AttackSpec,
    sampled: usize,
    all_correct: usize,
    index: Vec<usize>,
    y: Vec<usize>,
    y1: Vec<usize>,
    target: Vec<Option<usize>>,
}

/// `sample_n` distinct indices below `total`, seeded.
pub fn sample_indices(total: usize, sample_n: usize, seed: u64) -> Result<Vec<usize>> {
    if sample_n > total {
        return Err(LabError::Precondition(format!(
            "cannot sample {sample_n} images from {total}"
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(sample_n);
    Ok(idx)
}

/// Indices (in order) that every model in `models` classifies correctly.
pub fn correctly_classified<T: Scalar>(models: &[&Network<T>], data: &Dataset<T>, indices: &[usize]) -> Result<Vec<usize>> {
    let sub = data.subset(indices);
    let mut keep = vec![true; indices.len()];
    for m in models {
        let p = m.predict(sub.images())?;
        for (k, (&pi, &yi)) in keep.iter_mut().zip(p.iter().zip(sub.labels())) {
            *k &= pi == yi;
        }
    }
    Ok(indices.iter().zip(&keep).filter(|(_, &k)| k).map(|(&i, _)| i).collect())
}

/// Keeps the attacked items that fool `f1`. `indices` are the dataset
/// indices of the rows of `x_adv`.
pub fn filter_fooled<T: Scalar>(
    f1: &Network<T>,
    data: &Dataset<T>,
    indices: &[usize],
    x_adv: &Tensor<T>,
    targets: Option<&[usize]>,
) -> Result<Vec<EligibleItem<T>>> {
    let pred = f1.predict(x_adv)?;
    let mut items = Vec::new();
    for (r, &i) in indices.iter().enumerate() {
        let y = data.labels()[i];
        if pred[r] != y {
            items.push(EligibleItem {
                index: i,
                x: data.images().item(i).to_vec(),
                x_adv: x_adv.item(r).to_vec(),
                y,
                y1: pred[r],
                target: targets.map(|t| t[r]),
            });
        }
    }
    Ok(items)
}

/// Draws `sample_n` images, keeps those that `f1` and every `gate` model
/// classify correctly, attacks them on `f1` and keeps the ones that fool it.
///
/// For the per-pair protocol `gate` is just the target model; passing the
/// whole roster gives the all-models variant. Targeted attacks draw their
/// targets from `attack.seed`.
pub fn build_eligible_set<T: Scalar>(
    f1: &Network<T>,
    gate: &[&Network<T>],
    data: &Dataset<T>,
    attack: &AttackSpec,
    sample_n: usize,
    seed: u64,
) -> Result<EligibleSet<T>> {
    let drawn = sample_indices(data.len(), sample_n, seed)?;
    let mut models = vec![f1];
    models.extend_from_slice(gate);
    let correct = correctly_classified(&models, data, &drawn)?;
    let sub = data.subset(&correct);
    let (labels, targets) = match attack.objective {
        Objective::NonTargeted => (sub.labels().to_vec(), None),
        Objective::Targeted => {
            let t = sample_target_classes(sub.labels(), data.num_classes(), attack.seed)?;
            (t.clone(), Some(t))
        }
        Objective::NTargeted => {
            return Err(LabError::InvalidAttack(
                "eligible sets are built from single-model attacks".into(),
            ))
        }
    };
    let x_adv = attack::attack(f1, sub.images(), &labels, attack)?;
    let items = filter_fooled(f1, data, &correct, &x_adv, targets.as_deref())?;
    Ok(EligibleSet {
        item_shape: data.item_shape().to_vec(),
        items,
        attack: attack.clone(),
        sampled: drawn.len(),
        all_correct: correct.len(),
    })
}

/// Outcome of every eligible item on `f2`.
pub fn classify_outcomes<T: Scalar>(f2: &Network<T>, set: &EligibleSet<T>) -> Result<Vec<(Outcome, usize)>> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let pred = f2.predict(&set.adversarials())?;
    Ok(set
        .items
        .iter()
        .zip(pred)
        .map(|(it, y2)| (Outcome::from_labels(it.y, it.y1, y2), y2))
        .collect())
}

/// Outcome of a single eligible item on `f2`.
pub fn classify_outcome<T: Scalar>(f2: &Network<T>, item: &EligibleItem<T>, item_shape: &[usize]) -> Result<Outcome> {
    let x = Tensor::stack(item_shape, &[&item.x_adv])?;
    let y2 = f2.predict(&x)?[0];
    Ok(Outcome::from_labels(item.y, item.y1, y2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub unfooled: f64,
    pub different: f64,
    pub same: f64,
}

impl Ratios {
    pub fn fooled(&self) -> f64 {
        self.different + self.same
    }

    /// Same mistakes as a share of all mistakes; `None` when nothing transferred.
    pub fn same_share(&self) -> Option<f64> {
        let f = self.fooled();
        (f > 0.0).then(|| self.same / f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub f1_id: String,
    pub f2_id: String,
    pub dataset_id: String,
    pub attack: AttackSpec,
    pub n_eligible: usize,
    pub unfooled: usize,
    pub different: usize,
    pub same: usize,
    /// `None` (serialized as `null`) when the eligible set is empty.
    pub ratios: Option<Ratios>,
    pub targeted: bool,
    /// Items whose source mistake hit the intended target (targeted attacks only).
    pub y1_is_target: Option<usize>,
    /// Same mistakes among the items whose source mistake hit the target.
    pub same_on_target: Option<usize>,
    /// Raw `(y1, F2 label)` pairs, one per eligible item.
    pub pairs: Vec<(usize, usize)>,
}

pub const CSV_HEADER: &str = "f1_id,f2_id,attack_family,objective,epsilon,steps,n_eligible,unfooled,different,same,unfooled_ratio,different_ratio,same_ratio";

/// Marker written for ratios that are undefined.
pub const NA: &str = "NA";

impl TransferReport {
    pub fn from_outcomes(
        f1_id: &str,
        f2_id: &str,
        dataset_id: &str,
        set: &EligibleSet<impl Scalar>,
        outcomes: &[(Outcome, usize)],
    ) -> Self {
        let count = |o: Outcome| outcomes.iter().filter(|(x, _)| *x == o).count();
        let (unfooled, different, same) = (
            count(Outcome::Unfooled),
            count(Outcome::DifferentMistake),
            count(Outcome::SameMistake),
        );
        let n = outcomes.len();
        let ratios = (n > 0).then(|| {
            let nf = n as f64;
            Ratios {
                unfooled: unfooled as f64 / nf,
                different: different as f64 / nf,
                same: same as f64 / nf,
            }
        });
        let targeted = set.attack.objective != Objective::NonTargeted;
        let on_target: Vec<usize> = (0..n)
            .filter(|&i| set.items[i].target == Some(set.items[i].y1))
            .collect();
        Self {
            f1_id: f1_id.into(),
            f2_id: f2_id.into(),
            dataset_id: dataset_id.into(),
            attack: set.attack.clone(),
            n_eligible: n,
            unfooled,
            different,
            same,
            ratios,
            targeted,
            y1_is_target: targeted.then_some(on_target.len()),
            same_on_target: targeted.then(|| {
                on_target
                    .iter()
                    .filter(|&&i| outcomes[i].0 == Outcome::SameMistake)
                    .count()
            }),
            pairs: set.items.iter().zip(outcomes).map(|(it, &(_, y2))| (it.y1, y2)).collect(),
        }
    }

    pub fn csv_row(&self) -> String {
        let r = |f: fn(&Ratios) -> f64| self.ratios.as_ref().map_or(NA.to_string(), |x| format!("{}", f(x)));
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.f1_id,
            self.f2_id,
            self.attack.family,
            self.attack.objective,
            self.attack.epsilon,
            self.attack.steps,
            self.n_eligible,
            self.unfooled,
            self.different,
            self.same,
            r(|x| x.unfooled),
            r(|x| x.different),
            r(|x| x.same)
        )
        .expect("writing to a String");
        s
    }
}

/// Builds the report of `f2` on an eligible set attacked on `f1`.
pub fn transfer_report<T: Scalar>(
    f1_id: &str,
    f2_id: &str,
    dataset_id: &str,
    f2: &Network<T>,
    set: &EligibleSet<T>,
) -> Result<TransferReport> {
    let outcomes = classify_outcomes(f2, set)?;
    Ok(TransferReport::from_outcomes(f1_id, f2_id, dataset_id, set, &outcomes))
}

/// Header plus one row per report, LF line endings.
pub fn reports_to_csv(reports: &[TransferReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Counts over all both-correct attacked images, as in a vanilla versus
/// ensemble comparison: source unfooled, then the three outcomes on the
/// target for images that fooled the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub source_unfooled: usize,
    pub target_unfooled: usize,
    pub different: usize,
    pub same: usize,
}

impl OutcomeTable {
    pub fn from_predictions(y: &[usize], source: &[usize], target: &[usize]) -> Self {
        let mut t = Self::default();
        for ((&yi, &s), &g) in y.iter().zip(source).zip(target) {
            if s == yi {
                t.source_unfooled += 1;
                continue;
            }
            match Outcome::from_labels(yi, s, g) {
                Outcome::Unfooled => t.target_unfooled += 1,
                Outcome::DifferentMistake => t.different += 1,
                Outcome::SameMistake => t.same += 1,
            }
        }
        t
    }

    pub fn total(&self) -> usize {
        self.source_unfooled + self.target_unfooled + self.different + self.same
    }
}

/// Vanilla versus ensemble targeted attack on the same images and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleComparison {
    pub attack: AttackSpec,
    /// Images attacked: drawn and classified correctly by source and target.
    pub n: usize,
    pub vanilla: OutcomeTable,
    pub ensemble: OutcomeTable,
}

pub const ENSEMBLE_HEADER: &str = "attack,source_unfooled,target_unfooled,different,same";

impl EnsembleComparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ENSEMBLE_HEADER}\n");
        for (name, t) in [("vanilla", &self.vanilla), ("ensemble", &self.ensemble)] {
            let _ = writeln!(out, "{name},{},{},{},{}", t.source_unfooled, t.target_unfooled, t.different, t.same);
        }
        out
    }
}

/// Draws `sample_n` images that `source` and `target` both classify
/// correctly, picks one random target class per image and attacks once with
/// `source` alone and once with `source` plus `extra`. Both tables are read
/// off the source and target predictions.
pub fn ensemble_comparison<T: Scalar>(
    source: &Network<T>,
    extra: &[&Network<T>],
    target: &Network<T>,
    data: &Dataset<T>,
    spec: &AttackSpec,
    sample_n: usize,
    seed: u64,
) -> Result<EnsembleComparison> {
    if spec.objective != Objective::Targeted {
        return Err(LabError::InvalidAttack(format!(
            "ensemble comparison needs a targeted attack, got {}",
            spec.objective
        )));
    }
    let drawn = sample_indices(data.len(), sample_n, seed)?;
    let correct = correctly_classified(&[source, target], data, &drawn)?;
    let sub = data.subset(&correct);
    let targets = sample_target_classes(sub.labels(), data.num_classes(), spec.seed)?;
    let table = |x_adv: &Tensor<T>| -> Result<OutcomeTable> {
        if sub.is_empty() {
            return Ok(OutcomeTable::default());
        }
        Ok(OutcomeTable::from_predictions(
            sub.labels(),
            &source.predict(x_adv)?,
            &target.predict(x_adv)?,
        ))
    };
    let vanilla = table(&attack::attack(source, sub.images(), &targets, spec)?)?;
    let mut members = vec![source];
    members.extend_from_slice(extra);
    let ensemble = table(&attack::ensemble_targeted(&members, sub.images(), &targets, spec)?)?;
    Ok(EnsembleComparison {
        attack: spec.clone(),
        n: sub.len(),
        vanilla,
        ensemble,
    })
}

/// Pearson product-moment correlation. `Ok(None)` when either sample has
/// zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Option<f64>> {
    if xs.len() != ys.len() {
        return Err(LabError::Precondition(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(LabError::Precondition("pearson needs at least three points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}
