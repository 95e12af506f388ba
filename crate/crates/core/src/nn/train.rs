//! Mini-batch SGD with momentum, weight decay and step learning-rate decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, Param};
use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input augmentation applied to training batches. Both toggles are
/// extensions for colour datasets and are off by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub horizontal_flip: bool,
    /// Zero padding for random crops; 0 disables cropping.
    pub crop_padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_epochs: vec![20],
            lr_decay_factor: 0.1,
            epochs: 40,
            batch_size: 128,
            seed: 0,
            augment: Augment::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Number of completed epochs.
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    /// Accuracy on the training batches as they were seen (training mode).
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    weight_decay: T,
    velocity: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Network<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| Param {
                    weight: Tensor::zeros(p.weight.shape()),
                    bias: Tensor::zeros(p.bias.shape()),
                })
            })
            .collect();
        Self {
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::from_f64_lossy(weight_decay),
            velocity,
        }
    }

    pub fn step(&mut self, model: &mut Network<T>, grads: &[Option<Param<T>>], lr: f64) {
        let lr = T::from_f64_lossy(lr);
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let (Some(p), Some(g), Some(v)) = (p.as_mut(), g.as_ref(), v.as_mut()) else {
                continue;
            };
            for (w, (g, v)) in [
                (&mut p.weight, (&g.weight, &mut v.weight)),
                (&mut p.bias, (&g.bias, &mut v.bias)),
            ] {
                for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *v = mu * *v + (g + wd * *w);
                    *w -= lr * *v;
                }
            }
        }
    }
}

/// Trains `model` in place. See [`fit_with`] for per-epoch callbacks.
pub fn fit<T: Scalar>(
    model: &mut Network<T>,
    train: &Dataset<T>,
    cfg: &OptimizerConfig,
    test: Option<&Dataset<T>>,
) -> Result<History> {
    fit_with(model, train, cfg, test, |_, _| Ok(()))
}

/// Trains `model` in place, invoking `on_epoch(completed_epochs, model)`
/// after every epoch (used for epoch snapshots).
pub fn fit_with<T: Scalar, F>(
    model: &mut Network<T>,
    train: &Dataset<T>,
    cfg: &OptimizerConfig,
    test: Option<&Dataset<T>>,
    mut on_epoch: F,
) -> Result<History>
where
    F: FnMut(usize, &Network<T>) -> Result<()>,
{
    cfg.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(LabError::Precondition("training set is empty".into()));
    }
    if cfg.batch_size > n {
        return Err(LabError::Precondition(format!(
            "batch size {} exceeds dataset size {n}",
            cfg.batch_size
        )));
    }
    if train.images().item_shape() != model.input_shape() {
        return Err(LabError::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: train.images().item_shape().to_vec(),
        });
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = train.images().gather(batch);
            if cfg.augment.horizontal_flip || cfg.augment.crop_padding > 0 {
                augment_batch(&mut x, &cfg.augment, &mut noise_rng);
            }
            let y: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let (loss, grads, logits) = model.train_step(&x, &y, &mut noise_rng)?;
            correct += (0..y.len())
                .filter(|&i| super::loss::argmax(logits.item(i)) == y[i])
                .count();
            if !loss.is_finite() {
                return Err(LabError::Numerical(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss.to_f64_lossy() * batch.len() as f64;
            opt.step(model, grads.params.as_deref().unwrap_or(&[]), lr);
        }
        let test_accuracy = match test {
            Some(t) => Some(accuracy(model, t)?),
            None => None,
        };
        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            test_accuracy,
        });
        on_epoch(epoch + 1, model)?;
    }
    Ok(history)
}

/// Fraction of `data` classified correctly in evaluation mode.
pub fn accuracy<T: Scalar>(model: &Network<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let pred = model.predict(data.images())?;
    let hits = pred.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

fn augment_batch<T: Scalar, R: Rng>(x: &mut Tensor<T>, aug: &Augment, rng: &mut R) {
    let shape = x.item_shape().to_vec();
    let [c, h, w] = shape[..] else { return };
    let pad = aug.crop_padding;
    for i in 0..x.batch_len() {
        let item = x.item_mut(i);
        let src = item.to_vec();
        let flip = aug.horizontal_flip && rng.gen_bool(0.5);
        let (dy, dx) = if pad > 0 {
            (
                rng.gen_range(0..=2 * pad) as isize - pad as isize,
                rng.gen_range(0..=2 * pad) as isize - pad as isize,
            )
        } else {
            (0, 0)
        };
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sx = if flip { w - 1 - xx } else { xx } as isize + dx;
                    let sy = y as isize + dy;
                    item[(ci * h + y) * w + xx] = if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        src[(ci * h + sy as usize) * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}
