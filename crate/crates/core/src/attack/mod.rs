//! l2-bounded gradient attacks.
//!
//! Every family shares one iteration: a normalized gradient step, radial
//! projection onto the ε-ball around the original, then clipping to
//! `[0, 1]`. FGM is the single-step case with step size ε, MIM adds an
//! l1-normalized momentum accumulator, and the multi-model objectives sum
//! per-model input gradients.

mod batch;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::Network;
use crate::scalar::{l1_norm, l2_norm, Scalar};
use crate::tensor::Tensor;

pub use batch::{AdversarialBatch, NORM_SLACK};

/// Gradients with an l2 norm below this are treated as zero: the step is
/// skipped and the iterate stays put.
pub const GRAD_EPS: f64 = 1e-12;

/// Items attacked together in one worker. Fixed so results never depend on
/// the thread count.
pub const ATTACK_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fgm,
    Pgd,
    Mim,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Fgm => "fgm",
            Family::Pgd => "pgd",
            Family::Mim => "mim",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgm" => Ok(Family::Fgm),
            "pgd" => Ok(Family::Pgd),
            "mim" => Ok(Family::Mim),
            _ => Err(LabError::InvalidAttack(format!("unknown attack family `{s}`"))),
        }
    }
}

/// Which loss the attack follows. The per-item labels (true labels or
/// targets) are passed alongside the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Ascend the loss of the true label.
    NonTargeted,
    /// Descend the loss of one target label per item.
    Targeted,
    /// Descend the summed losses of several models, each toward its own target.
    NTargeted,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::NonTargeted => "non-targeted",
            Objective::Targeted => "targeted",
            Objective::NTargeted => "n-targeted",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "non-targeted" | "nontargeted" | "untargeted" => Ok(Objective::NonTargeted),
            "targeted" => Ok(Objective::Targeted),
            "n-targeted" | "ntargeted" => Ok(Objective::NTargeted),
            _ => Err(LabError::InvalidAttack(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: Family,
    /// l2 radius in pixel units (pixels in `[0, 1]`).
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub objective: Objective,
    /// MIM decay μ; ignored by the other families.
    pub momentum_decay: f64,
    /// Seed for target sampling.
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgm(epsilon: f64, objective: Objective) -> Self {
        Self {
            family: Family::Fgm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            objective,
            momentum_decay: 0.0,
            seed: 0,
        }
    }

    /// Ten steps of size ε/5.
    pub fn pgd(epsilon: f64, objective: Objective) -> Self {
        Self {
            family: Family::Pgd,
            epsilon,
            steps: 10,
            step_size: epsilon / 5.0,
            objective,
            momentum_decay: 0.0,
            seed: 0,
        }
    }

    /// PGD schedule with momentum decay 1.
    pub fn mim(epsilon: f64, objective: Objective) -> Self {
        Self {
            family: Family::Mim,
            momentum_decay: 1.0,
            ..Self::pgd(epsilon, objective)
        }
    }

    /// 100 steps of size 0.1 on the summed multi-model loss.
    pub fn n_targeted(epsilon: f64) -> Self {
        Self {
            family: Family::Pgd,
            epsilon,
            steps: 100,
            step_size: 0.1,
            objective: Objective::NTargeted,
            momentum_decay: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize, step_size: f64) -> Self {
        self.steps = steps;
        self.step_size = step_size;
        self
    }

    /// ε = 0 is accepted (the identity attack), and with it a zero step.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidAttack(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be a finite non-negative number", self.epsilon));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.family == Family::Fgm && self.steps != 1 {
            return bad(format!("fgm takes exactly one step, got {}", self.steps));
        }
        let step_ok = self.step_size > 0.0 || (self.step_size == 0.0 && self.epsilon == 0.0);
        if self.family != Family::Fgm && !(step_ok && self.step_size.is_finite()) {
            return bad(format!("step size {} must be positive", self.step_size));
        }
        if !(self.momentum_decay >= 0.0 && self.momentum_decay.is_finite()) {
            return bad(format!("momentum decay {} must be non-negative", self.momentum_decay));
        }
        Ok(())
    }

    fn effective_step(&self) -> f64 {
        match self.family {
            Family::Fgm => self.epsilon,
            _ => self.step_size,
        }
    }

    fn effective_momentum(&self) -> Option<f64> {
        (self.family == Family::Mim).then_some(self.momentum_decay)
    }
}

/// Moves `cur` by `step·dir`, projects radially onto the ε-ball around `x0`
/// and clips to `[0, 1]`. Since `x0` lies in the box, clipping only shortens
/// the perturbation.
fn step_project_clip<T: Scalar>(x0: &[T], cur: &mut [T], dir: &[T], step: T, eps: T) {
    for (c, &d) in cur.iter_mut().zip(dir) {
        *c += step * d;
    }
    let mut sq = T::zero();
    for (&c, &o) in cur.iter().zip(x0) {
        let d = c - o;
        sq += d * d;
    }
    let norm = sq.sqrt();
    if norm > eps {
        let s = eps / norm;
        for (c, &o) in cur.iter_mut().zip(x0) {
            *c = o + s * (*c - o);
        }
    }
    for c in cur.iter_mut() {
        *c = c.max(T::zero()).min(T::one());
    }
}

fn check_batch<T: Scalar>(models: &[&Network<T>], x: &Tensor<T>, labels: &[&[usize]]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| LabError::InvalidAttack("attack needs at least one model".into()))?;
    for m in models {
        if m.input_shape() != first.input_shape() {
            return Err(LabError::ShapeMismatch {
                expected: first.input_shape().to_vec(),
                actual: m.input_shape().to_vec(),
            });
        }
    }
    if x.shape().is_empty() || x.item_shape() != first.input_shape() {
        return Err(LabError::ShapeMismatch {
            expected: first.input_shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    if labels.len() != models.len() {
        return Err(LabError::InvalidAttack(format!(
            "{} label sets for {} models",
            labels.len(),
            models.len()
        )));
    }
    for (m, l) in models.iter().zip(labels) {
        if l.len() != x.batch_len() {
            return Err(LabError::ShapeMismatch {
                expected: vec![x.batch_len()],
                actual: vec![l.len()],
            });
        }
        if let Some(&label) = l.iter().find(|&&v| v >= m.num_classes()) {
            return Err(LabError::InvalidLabel {
                label,
                num_classes: m.num_classes(),
            });
        }
    }
    Ok(())
}

/// The shared iteration over an arbitrary batched gradient oracle.
///
/// `grad` returns the per-item gradient of the objective at the current
/// iterate; `ascend` selects maximization. `x0` must lie in `[0, 1]`.
pub fn iterate<T, G>(x0: &Tensor<T>, spec: &AttackSpec, ascend: bool, mut grad: G) -> Result<Tensor<T>>
where
    T: Scalar,
    G: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    spec.validate()?;
    if x0.shape().is_empty() {
        return Err(LabError::InvalidTensor("attack input needs a batch axis".into()));
    }
    if x0.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(LabError::InvalidTensor("attack inputs must lie in [0, 1]".into()));
    }
    let n = x0.batch_len();
    let k = x0.item_len();
    let eps = T::from_f64_lossy(spec.epsilon);
    let alpha = T::from_f64_lossy(spec.effective_step());
    let step = if ascend { alpha } else { -alpha };
    let mu = spec.effective_momentum().map(T::from_f64_lossy);
    let grad_eps = T::from_f64_lossy(GRAD_EPS);

    let mut cur = x0.clone();
    // MIM keeps sum_j mu^j g_j/|g_j|_1 rescaled by the latest |g|_1, which
    // leaves the step direction unchanged and makes mu = 0 reduce to g exactly.
    let mut momentum = mu.map(|_| vec![T::zero(); n * k]);
    let mut last_l1 = vec![T::zero(); n];
    let mut dir = vec![T::zero(); k];

    for _ in 0..spec.steps {
        let grad = grad(&cur)?;
        if grad.shape() != cur.shape() {
            return Err(LabError::ShapeMismatch {
                expected: cur.shape().to_vec(),
                actual: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(LabError::Numerical("non-finite input gradient".into()));
        }
        for i in 0..n {
            let g = grad.item(i);
            if l2_norm(g) < grad_eps {
                continue;
            }
            let raw: &[T] = match (&mut momentum, mu) {
                (Some(mom), Some(mu)) => {
                    let l1 = l1_norm(g);
                    let coef = if last_l1[i] > T::zero() { mu * (l1 / last_l1[i]) } else { T::zero() };
                    last_l1[i] = l1;
                    let m = &mut mom[i * k..(i + 1) * k];
                    for (mv, &gv) in m.iter_mut().zip(g) {
                        *mv = coef * *mv + gv;
                    }
                    m
                }
                _ => g,
            };
            let norm = l2_norm(raw);
            if norm < grad_eps {
                continue;
            }
            for (d, &r) in dir.iter_mut().zip(raw) {
                *d = r / norm;
            }
            step_project_clip(x0.item(i), cur.item_mut(i), &dir, step, eps);
        }
    }
    Ok(cur)
}

fn summed_gradient<T: Scalar>(models: &[&Network<T>], x: &Tensor<T>, labels: &[Vec<usize>]) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (m, l) in models.iter().zip(labels) {
        let (_, g) = m.input_gradient(x, l)?;
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += gv;
                }
                a
            }
        });
    }
    Ok(acc.expect("at least one model"))
}

fn run<T: Scalar>(
    models: &[&Network<T>],
    x: &Tensor<T>,
    labels: &[&[usize]],
    spec: &AttackSpec,
    ascend: bool,
) -> Result<Tensor<T>> {
    spec.validate()?;
    check_batch(models, x, labels)?;
    let n = x.batch_len();
    if n == 0 {
        return Ok(x.clone());
    }
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ATTACK_CHUNK)
        .map(|s| (s, (s + ATTACK_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| {
            let ls: Vec<Vec<usize>> = labels.iter().map(|l| l[s..e].to_vec()).collect();
            iterate(&x.slice_batch(s, e), spec, ascend, |cur| summed_gradient(models, cur, &ls))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&parts)
}

fn single<T: Scalar>(model: &Network<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    let ascend = match spec.objective {
        Objective::NonTargeted => true,
        Objective::Targeted => false,
        Objective::NTargeted => {
            return Err(LabError::InvalidAttack(
                "n-targeted objective needs the multi-model entry point".into(),
            ))
        }
    };
    run(&[model], x, &[labels], spec, ascend)
}

/// One step of size ε along the normalized gradient. `labels` are true labels
/// for a non-targeted spec and targets for a targeted one.
pub fn fgm<T: Scalar>(model: &Network<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    expect_family(spec, Family::Fgm)?;
    single(model, x, labels, spec)
}

/// Iterated normalized-gradient steps from the clean point (no random start).
pub fn pgd<T: Scalar>(model: &Network<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    expect_family(spec, Family::Pgd)?;
    single(model, x, labels, spec)
}

/// Momentum iterative attack, l2 form: `m ← μm + g/‖g‖₁`, step along
/// `m/‖m‖₂`.
pub fn mim<T: Scalar>(model: &Network<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    expect_family(spec, Family::Mim)?;
    single(model, x, labels, spec)
}

/// Dispatches on `spec.family`.
pub fn attack<T: Scalar>(model: &Network<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    single(model, x, labels, spec)
}

fn expect_family(spec: &AttackSpec, family: Family) -> Result<()> {
    if spec.family != family {
        return Err(LabError::InvalidAttack(format!(
            "{} spec passed to the {family} attack",
            spec.family
        )));
    }
    Ok(())
}

/// Minimizes `Σ_i L(F_i(x'), targets[i])` over the ε-ball. `targets[i]`
/// holds one label per item for model `i`. The family selects plain (PGD,
/// FGM) or momentum (MIM) steps.
pub fn n_targeted<T: Scalar>(
    models: &[&Network<T>],
    x: &Tensor<T>,
    targets: &[Vec<usize>],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    let labels: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
    run(models, x, &labels, spec, false)
}

/// [`n_targeted`] with the same target for every model.
pub fn ensemble_targeted<T: Scalar>(
    models: &[&Network<T>],
    x: &Tensor<T>,
    shared_targets: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor<T>> {
    let labels: Vec<&[usize]> = vec![shared_targets; models.len()];
    run(models, x, &labels, spec, false)
}

/// Errors if any target equals the item's true label.
pub fn check_targets(true_labels: &[usize], targets: &[usize]) -> Result<()> {
    if true_labels.len() != targets.len() {
        return Err(LabError::ShapeMismatch {
            expected: vec![true_labels.len()],
            actual: vec![targets.len()],
        });
    }
    if let Some(i) = (0..targets.len()).find(|&i| targets[i] == true_labels[i]) {
        return Err(LabError::InvalidAttack(format!(
            "target of item {i} equals its true label {}",
            true_labels[i]
        )));
    }
    Ok(())
}

/// Uniform draw over the labels other than each item's true label.
pub fn sample_target_classes(true_labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(LabError::Precondition("target sampling needs at least two classes".into()));
    }
    if let Some(&label) = true_labels.iter().find(|&&l| l >= num_classes) {
        return Err(LabError::InvalidLabel { label, num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(true_labels
        .iter()
        .map(|&y| {
            let r = rng.gen_range(0..num_classes - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        })
        .collect())
}
