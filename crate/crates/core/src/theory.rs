//! Gaussian binary model with one strongly and `d` weakly label-correlated
//! features, and three linear classifiers that weight the weak features
//! uniformly, ascending or descending.
//!
//! A perturbed sample flips the mean of the first `d/2` weak features by
//! shifting them by `−2ηy`; classifiers leaning on the later features keep
//! their accuracy while those leaning on the earlier ones lose it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Samples generated per independently seeded block.
pub const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Number of weak features; even.
    pub d: usize,
    /// Mean shift η of the weak features.
    pub eta: f64,
    /// Probability that the strong feature equals `+y`.
    pub p: f64,
}

impl TheoryParams {
    pub fn new(d: usize, eta: f64) -> Self {
        Self { d, eta, p: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(LabError::InvalidConfig(format!("d = {} must be even and at least 2", self.d)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LabError::InvalidConfig(format!("eta = {} must be non-negative", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(LabError::InvalidConfig(format!("p = {} must lie in [0, 1]", self.p)));
        }
        Ok(())
    }

    /// Number of perturbed weak features.
    pub fn k(&self) -> usize {
        self.d / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Unif,
    A,
    B,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Unif, Scheme::A, Scheme::B];
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Unif => "unif",
            Scheme::A => "A",
            Scheme::B => "B",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unif" | "Unif" | "avg" => Ok(Scheme::Unif),
            "A" | "a" => Ok(Scheme::A),
            "B" | "b" => Ok(Scheme::B),
            _ => Err(LabError::InvalidConfig(format!("unknown classifier scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub scheme: Scheme,
    /// `d + 1` weights; index 0 is the strong feature.
    pub weights: Vec<f64>,
}

impl LinearClassifier {
    /// `sign(wᵀx)` with `sign(0) = +1`.
    pub fn predict(&self, x: &[f64]) -> i8 {
        let s: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum();
        if s >= 0.0 {
            1
        } else {
            -1
        }
    }
}

/// Weight vectors: `[0, 1/d, …, 1/d]`, `2/(d(d+1))·[0, 1, …, d]` and its
/// weak-feature reverse `2/(d(d+1))·[0, d, …, 1]`.
pub fn build_classifier(scheme: Scheme, d: usize) -> Result<LinearClassifier> {
    if d < 2 {
        return Err(LabError::InvalidConfig(format!("d = {d} must be at least 2")));
    }
    let c = 2.0 / (d as f64 * (d as f64 + 1.0));
    let mut weights = vec![0.0];
    match scheme {
        Scheme::Unif => weights.extend(std::iter::repeat_n(1.0 / d as f64, d)),
        Scheme::A => weights.extend((1..=d).map(|i| c * i as f64)),
        Scheme::B => weights.extend((1..=d).rev().map(|i| c * i as f64)),
    }
    Ok(LinearClassifier { scheme, weights })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Exact accuracy of a scheme on clean or perturbed samples.
pub fn closed_form_accuracy(scheme: Scheme, params: &TheoryParams, perturbed: bool) -> Result<f64> {
    params.validate()?;
    let d = params.d as f64;
    let eta = params.eta;
    // ‖w‖ for the ascending and descending profiles, up to the common factor.
    let sd_ab = (d * (d + 1.0) * (2.0 * d + 1.0) / 6.0).sqrt();
    let z = match (scheme, perturbed) {
        (Scheme::Unif, false) => eta * d.sqrt(),
        (Scheme::Unif, true) => 0.0,
        (Scheme::A | Scheme::B, false) => eta * d * (d + 1.0) / 2.0 / sd_ab,
        (Scheme::A, true) => eta * d * d / 4.0 / sd_ab,
        (Scheme::B, true) => -eta * d * d / 4.0 / sd_ab,
    };
    Ok(normal_cdf(z))
}

/// Draws the samples of one seeded block, calling `visit(x, y)` with the
/// clean features of each.
fn for_each_sample(params: &TheoryParams, seed: u64, block: usize, len: usize, mut visit: impl FnMut(&[f64], f64)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    let mut x = vec![0.0; params.d + 1];
    for _ in 0..len {
        let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        x[0] = if rng.gen_bool(params.p) { y } else { -y };
        for v in &mut x[1..] {
            let e: f64 = rng.sample(StandardNormal);
            *v = params.eta * y + e;
        }
        visit(&x, y);
    }
}

fn blocks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(BLOCK)).map(|b| (b, BLOCK.min(n - b * BLOCK))).collect()
}

/// Applies the perturbation in place: `x_i ← x_i − 2ηy` for the first
/// `d/2` weak features.
pub fn perturb(params: &TheoryParams, x: &mut [f64], y: f64) {
    for v in &mut x[1..=params.k()] {
        *v -= 2.0 * params.eta * y;
    }
}

/// Streams `n` samples to `visit(x, y)` in draw order without storing them.
pub fn stream_samples(
    params: &TheoryParams,
    n: usize,
    seed: u64,
    perturbed: bool,
    mut visit: impl FnMut(&[f64], i8),
) -> Result<()> {
    params.validate()?;
    if n == 0 {
        return Err(LabError::Precondition("sample size must be positive".into()));
    }
    let mut row = vec![0.0; params.d + 1];
    for (b, len) in blocks(n) {
        for_each_sample(params, seed, b, len, |x, y| {
            row.copy_from_slice(x);
            if perturbed {
                perturb(params, &mut row, y);
            }
            visit(&row, y as i8);
        });
    }
    Ok(())
}

/// `n` samples as a row-major `n × (d+1)` matrix with `±1` labels.
pub fn sample(params: &TheoryParams, n: usize, seed: u64, perturbed: bool) -> Result<(Vec<f64>, Vec<i8>)> {
    let mut xs = Vec::with_capacity(n * (params.d + 1));
    let mut ys = Vec::with_capacity(n);
    stream_samples(params, n, seed, perturbed, |x, y| {
        xs.extend_from_slice(x);
        ys.push(y);
    })?;
    Ok((xs, ys))
}

/// Correct-prediction counts of all schemes, clean and perturbed, on one
/// shared set of draws, plus the A-correct-and-B-wrong count on the
/// perturbed draws.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MonteCarloCounts {
    pub n: usize,
    /// `[scheme][perturbed]`, schemes in [`Scheme::ALL`] order.
    pub correct: [[usize; 2]; 3],
    pub a_right_b_wrong: usize,
}

impl MonteCarloCounts {
    fn add(&mut self, o: &Self) {
        self.n += o.n;
        for s in 0..3 {
            for p in 0..2 {
                self.correct[s][p] += o.correct[s][p];
            }
        }
        self.a_right_b_wrong += o.a_right_b_wrong;
    }

    /// `(estimate, stderr)` of a proportion.
    fn proportion(&self, count: usize) -> (f64, f64) {
        let p = count as f64 / self.n as f64;
        (p, (p * (1.0 - p) / self.n as f64).sqrt())
    }

    pub fn accuracy(&self, scheme: Scheme, perturbed: bool) -> (f64, f64) {
        let s = Scheme::ALL.iter().position(|&x| x == scheme).expect("known scheme");
        self.proportion(self.correct[s][perturbed as usize])
    }

    pub fn joint_disagreement(&self) -> (f64, f64) {
        self.proportion(self.a_right_b_wrong)
    }
}

/// Streams `n` samples (no sample matrix is held) and scores every
/// classifier on each, clean and perturbed.
pub fn monte_carlo(params: &TheoryParams, n: usize, seed: u64) -> Result<MonteCarloCounts> {
    params.validate()?;
    if n < 100 {
        return Err(LabError::Precondition(format!("Monte Carlo needs n >= 100, got {n}")));
    }
    let classifiers: Vec<LinearClassifier> = Scheme::ALL
        .iter()
        .map(|&s| build_classifier(s, params.d))
        .collect::<Result<_>>()?;
    let parts: Vec<MonteCarloCounts> = blocks(n)
        .into_par_iter()
        .map(|(b, len)| {
            let mut c = MonteCarloCounts {
                n: len,
                ..Default::default()
            };
            let mut pert = vec![0.0; params.d + 1];
            for_each_sample(params, seed, b, len, |x, y| {
                pert.copy_from_slice(x);
                perturb(params, &mut pert, y);
                let yi = y as i8;
                for (s, clf) in classifiers.iter().enumerate() {
                    c.correct[s][0] += (clf.predict(x) == yi) as usize;
                    c.correct[s][1] += (clf.predict(&pert) == yi) as usize;
                }
                let a_right = classifiers[1].predict(&pert) == yi;
                let b_wrong = classifiers[2].predict(&pert) != yi;
                c.a_right_b_wrong += (a_right && b_wrong) as usize;
            });
            c
        })
        .collect();
    let mut total = MonteCarloCounts::default();
    for p in &parts {
        total.add(p);
    }
    Ok(total)
}

/// Empirical accuracy `(estimate, stderr)` of one classifier.
pub fn monte_carlo_accuracy(
    scheme: Scheme,
    params: &TheoryParams,
    perturbed: bool,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    Ok(monte_carlo(params, n, seed)?.accuracy(scheme, perturbed))
}

/// Fraction `(estimate, stderr)` of perturbed samples that the ascending
/// classifier gets right while the descending one gets wrong.
pub fn joint_disagreement(params: &TheoryParams, n: usize, seed: u64) -> Result<(f64, f64)> {
    Ok(monte_carlo(params, n, seed)?.joint_disagreement())
}

/// As [`joint_disagreement`] for an arbitrary classifier pair: `right` must
/// be correct and `wrong` mistaken on the same perturbed sample.
pub fn joint_disagreement_of(
    params: &TheoryParams,
    right: &LinearClassifier,
    wrong: &LinearClassifier,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 100 {
        return Err(LabError::Precondition(format!("Monte Carlo needs n >= 100, got {n}")));
    }
    let mut hits = 0usize;
    stream_samples(params, n, seed, true, |x, y| {
        hits += (right.predict(x) == y && wrong.predict(x) != y) as usize;
    })?;
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

/// Monte-Carlo agreement band: three standard errors, using the larger of
/// the empirical and the closed-form binomial standard error so that a
/// saturated estimate (stderr 0) is still compared fairly.
pub fn agreement_tolerance(closed: f64, mc_stderr: f64, n: usize) -> f64 {
    let exact = (closed * (1.0 - closed) / n as f64).sqrt();
    3.0 * mc_stderr.max(exact) + 1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub d: usize,
    pub eta: f64,
    pub perturbed: bool,
    pub closed_form: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl SweepRow {
    pub fn agrees(&self) -> bool {
        (self.mc_estimate - self.closed_form).abs() <= agreement_tolerance(self.closed_form, self.mc_stderr, self.n)
    }
}

pub const SWEEP_HEADER: &str = "scheme,d,eta,perturbed,closed_form,mc_estimate,mc_stderr,n,seed";

/// Closed form and Monte Carlo for every scheme and both sample kinds over
/// the grid `ds × etas`. Each grid point gets its own seed stream
/// derived from `seed` and the point's position.
pub fn sweep(ds: &[usize], etas: &[f64], n: usize, seed: u64, p: f64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, &d) in ds.iter().enumerate() {
        for (j, &eta) in etas.iter().enumerate() {
            let params = TheoryParams { d, eta, p };
            let point_seed = seed.wrapping_add(((i * etas.len() + j) as u64) << 32);
            let mc = monte_carlo(&params, n, point_seed)?;
            for scheme in Scheme::ALL {
                for perturbed in [false, true] {
                    let (est, se) = mc.accuracy(scheme, perturbed);
                    rows.push(SweepRow {
                        scheme,
                        d,
                        eta,
                        perturbed,
                        closed_form: closed_form_accuracy(scheme, &params, perturbed)?,
                        mc_estimate: est,
                        mc_stderr: se,
                        n,
                        seed: point_seed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scheme, r.d, r.eta, r.perturbed, r.closed_form, r.mc_estimate, r.mc_stderr, r.n, r.seed
        ));
    }
    s
}
