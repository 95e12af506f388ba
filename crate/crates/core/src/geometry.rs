//! Decision-boundary geometry along adversarial directions.
//!
//! Distances are measured on the raw ray `x + t·v` without pixel clipping:
//! they describe the function, not the image domain.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::GRAD_EPS;
use crate::error::{LabError, Result};
use crate::metrics::Outcome;
use crate::nn::Network;
use crate::scalar::{dot, l2_norm, Scalar};
use crate::tensor::Tensor;

/// Default l2 length of each grid direction.
pub const GRID_UNIT: f64 = 0.02;
pub const GRID_HALF_EXTENT: usize = 30;
pub const GRID_RESOLUTION: usize = 61;

/// Points per refinement round of the boundary search.
const REFINE_POINTS: usize = 16;

/// Line-search settings for [`boundary_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySearch {
    pub cap: f64,
    pub tol: f64,
    /// Coarse scan points over `(0, cap]`.
    pub scan_points: usize,
}

impl Default for BoundarySearch {
    fn default() -> Self {
        Self {
            cap: 2.0,
            tol: 1e-4,
            scan_points: 64,
        }
    }
}

impl BoundarySearch {
    fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0 && self.tol > 0.0 && self.cap.is_finite()) || self.scan_points == 0 {
            return Err(LabError::Precondition(format!("invalid boundary search {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub d: f64,
    pub capped: bool,
    pub flips_to: Option<usize>,
}

fn item_batch<T: Scalar>(model: &Network<T>, rows: Vec<T>) -> Tensor<T> {
    let k: usize = model.input_shape().iter().product();
    let mut shape = vec![rows.len() / k];
    shape.extend_from_slice(model.input_shape());
    Tensor::new(shape, rows).expect("rows are whole items")
}

fn check_item<T: Scalar>(model: &Network<T>, x: &[T]) -> Result<()> {
    let k: usize = model.input_shape().iter().product();
    if x.len() != k {
        return Err(LabError::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: vec![x.len()],
        });
    }
    Ok(())
}

/// Unit vector along the non-targeted loss gradient `∇_x L(f(x), y)`.
pub fn gradient_direction<T: Scalar>(model: &Network<T>, x: &[T], y: usize) -> Result<Vec<T>> {
    check_item(model, x)?;
    let (_, g) = model.input_gradient(&item_batch(model, x.to_vec()), &[y])?;
    let norm = l2_norm(g.data());
    if !(norm.to_f64_lossy() >= GRAD_EPS) {
        return Err(LabError::Numerical("zero input gradient: direction undefined".into()));
    }
    Ok(g.data().iter().map(|&v| v / norm).collect())
}

/// Labels of `model` at `x + t·v` for each `t`, unclipped.
fn labels_along<T: Scalar>(model: &Network<T>, x: &[T], v: &[T], ts: &[f64]) -> Result<Vec<usize>> {
    let mut rows = Vec::with_capacity(ts.len() * x.len());
    for &t in ts {
        let t = T::from_f64_lossy(t);
        rows.extend(x.iter().zip(v).map(|(&a, &b)| a + t * b));
    }
    let batch = item_batch(model, rows);
    if !batch.all_finite() {
        return Err(LabError::Numerical("non-finite probe point".into()));
    }
    model.predict(&batch)
}

/// Smallest `t ∈ (0, cap]` with `f(x + t·v) ≠ y`, to within `tol`.
///
/// A coarse scan at `cap/scan_points` finds the first flipped probe, then
/// the bracket behind it is refined until narrower than `tol`. The result
/// is the flipped end of the final bracket. Without a flip up to `cap` the
/// result is `cap`, flagged as capped.
pub fn boundary_distance<T: Scalar>(
    f: &Network<T>,
    x: &[T],
    y: usize,
    v: &[T],
    search: &BoundarySearch,
) -> Result<DistanceResult> {
    search.validate()?;
    check_item(f, x)?;
    check_item(f, v)?;
    let vn = l2_norm(v).to_f64_lossy();
    if (vn - 1.0).abs() > 1e-9 {
        return Err(LabError::Precondition(format!("direction norm {vn} is not 1")));
    }
    if labels_along(f, x, v, &[0.0])?[0] != y {
        return Err(LabError::Precondition("model misclassifies the clean input".into()));
    }
    let step = search.cap / search.scan_points as f64;
    let scan: Vec<f64> = (1..=search.scan_points).map(|i| step * i as f64).collect();
    let labels = labels_along(f, x, v, &scan)?;
    let Some(first) = labels.iter().position(|&l| l != y) else {
        return Ok(DistanceResult {
            d: search.cap,
            capped: true,
            flips_to: None,
        });
    };
    let (mut lo, mut hi) = (if first == 0 { 0.0 } else { scan[first - 1] }, scan[first]);
    let mut hi_label = labels[first];
    while hi - lo > search.tol {
        let w = (hi - lo) / (REFINE_POINTS + 1) as f64;
        let ts: Vec<f64> = (1..=REFINE_POINTS).map(|i| lo + w * i as f64).collect();
        let ls = labels_along(f, x, v, &ts)?;
        match ls.iter().position(|&l| l != y) {
            Some(j) => {
                hi = ts[j];
                hi_label = ls[j];
                if j > 0 {
                    lo = ts[j - 1];
                }
            }
            None => lo = ts[REFINE_POINTS - 1],
        }
    }
    Ok(DistanceResult {
        d: hi,
        capped: false,
        flips_to: Some(hi_label),
    })
}

/// Mean absolute difference of boundary distances along the source
/// model's gradient directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDistance {
    pub dist: f64,
    pub n_images: usize,
    /// Capped searches, counted at the cap value.
    pub capped_f1: usize,
    pub capped_f2: usize,
    pub per_image: Vec<(f64, f64)>,
}

/// Dist(F1, F2) over images that both models classify correctly.
pub fn model_distance<T: Scalar>(
    f1: &Network<T>,
    f2: &Network<T>,
    images: &Tensor<T>,
    labels: &[usize],
    search: &BoundarySearch,
) -> Result<ModelDistance> {
    let n = images.batch_len();
    if n == 0 {
        return Err(LabError::Precondition("distance over an empty image set".into()));
    }
    if labels.len() != n {
        return Err(LabError::ShapeMismatch {
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let per_image = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = images.item(i);
            let v = gradient_direction(f1, x, labels[i])?;
            let a = boundary_distance(f1, x, labels[i], &v, search)?;
            let b = boundary_distance(f2, x, labels[i], &v, search)?;
            Ok((a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let dist = per_image.iter().map(|(a, b)| (a.d - b.d).abs()).sum::<f64>() / n as f64;
    Ok(ModelDistance {
        dist,
        n_images: n,
        capped_f1: per_image.iter().filter(|(a, _)| a.capped).count(),
        capped_f2: per_image.iter().filter(|(_, b)| b.capped).count(),
        per_image: per_image.iter().map(|(a, b)| (a.d, b.d)).collect(),
    })
}

/// Gaussian direction orthogonal to `delta1` with the same l2 length.
pub fn random_orthogonal<T: Scalar>(delta1: &[T], seed: u64) -> Result<Vec<T>> {
    if delta1.len() < 2 {
        return Err(LabError::Precondition("no orthogonal direction in one dimension".into()));
    }
    let d: Vec<f64> = delta1.iter().map(|v| v.to_f64_lossy()).collect();
    let dd = dot(&d, &d);
    if !(dd > 0.0) {
        return Err(LabError::Precondition("reference direction is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut g: Vec<f64> = (0..d.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = dot(&g, &d) / dd;
        g.iter_mut().zip(&d).for_each(|(a, b)| *a -= c * b);
        // A second pass removes the residual left by rounding.
        let c = dot(&g, &d) / dd;
        g.iter_mut().zip(&d).for_each(|(a, b)| *a -= c * b);
        let gn = l2_norm(&g);
        if gn > 1e-12 {
            let s = dd.sqrt() / gn;
            return Ok(g.into_iter().map(|v| T::from_f64_lossy(v * s)).collect());
        }
    }
}

/// The two axes of a boundary grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionPair<T> {
    pub delta1: Vec<T>,
    pub delta2: Vec<T>,
    pub unit_norm: f64,
}

impl<T: Scalar> DirectionPair<T> {
    /// `delta1` is the source model's gradient direction scaled to
    /// `unit_norm`; `delta2` is a random orthogonal direction of equal length.
    pub fn from_gradient(model: &Network<T>, x: &[T], y: usize, unit_norm: f64, seed: u64) -> Result<Self> {
        let v = gradient_direction(model, x, y)?;
        let u = T::from_f64_lossy(unit_norm);
        let delta1: Vec<T> = v.iter().map(|&a| a * u).collect();
        let delta2 = random_orthogonal(&delta1, seed)?;
        Ok(Self {
            delta1,
            delta2,
            unit_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub model_id: String,
    pub image_id: String,
    pub unit: f64,
    pub half_extent: usize,
    pub resolution: usize,
    /// Grid value the rows and columns denote, e.g. the predicted label.
    pub content: String,
    /// Row `i` holds `u = offset(i)`, column `j` holds `v = offset(j)`,
    /// with `offset(k) = (k − (resolution−1)/2)·2·half_extent/(resolution−1)` units.
    pub layout: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub legend: Vec<String>,
}

/// Predicted labels over `x + u·δ1 + v·δ2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub model_id: String,
    pub image_id: String,
    pub unit: f64,
    pub half_extent: usize,
    pub resolution: usize,
    /// `labels[i][j]` at `u = offset(i)`, `v = offset(j)`.
    pub labels: Vec<Vec<usize>>,
}

fn grid_offsets(half_extent: usize, resolution: usize) -> Result<Vec<i64>> {
    if resolution % 2 == 0 || resolution < 1 {
        return Err(LabError::Precondition(format!("grid resolution {resolution} must be odd")));
    }
    if resolution == 1 {
        return Ok(vec![0]);
    }
    if (2 * half_extent) % (resolution - 1) != 0 {
        return Err(LabError::Precondition(format!(
            "{resolution} points cannot span ±{half_extent} in whole units"
        )));
    }
    let stride = (2 * half_extent / (resolution - 1)) as i64;
    let c = ((resolution - 1) / 2) as i64;
    Ok((0..resolution as i64).map(|k| (k - c) * stride).collect())
}

const LAYOUT: &str = "row i: u = offset(i); column j: v = offset(j); offset(k) = (k - (resolution-1)/2) * 2*half_extent/(resolution-1) units";

impl BoundaryGrid {
    pub fn center(&self) -> usize {
        self.labels[self.resolution / 2][self.resolution / 2]
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            model_id: self.model_id.clone(),
            image_id: self.image_id.clone(),
            unit: self.unit,
            half_extent: self.half_extent,
            resolution: self.resolution,
            content: "predicted label".into(),
            layout: LAYOUT.into(),
            legend: Vec::new(),
        }
    }

    /// Offset in units of the `k`-th row or column.
    pub fn offset(&self, k: usize) -> i64 {
        grid_offsets(self.half_extent, self.resolution).expect("validated at construction")[k]
    }

    /// Offset (in units) of the first label change along `+u` at `v = 0`.
    pub fn first_flip_along_u(&self) -> Option<i64> {
        let c = self.resolution / 2;
        let y = self.labels[c][c];
        (c + 1..self.resolution).find(|&i| self.labels[i][c] != y).map(|i| self.offset(i))
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(&self.labels, |v| v.to_string())
    }

    /// Writes `<stem>.csv` and its `<stem>.json` header.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        write_pair(dir.as_ref(), stem, &self.to_csv(), &self.header())
    }
}

fn matrix_csv<V>(m: &[Vec<V>], f: impl Fn(&V) -> String) -> String {
    let mut s = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(&f).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn write_pair(dir: &Path, stem: &str, csv: &str, header: &GridHeader) -> Result<Vec<PathBuf>> {
    let (c, j) = (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")));
    fs::write(&c, csv).map_err(|e| LabError::io(&c, e))?;
    fs::write(&j, serde_json::to_string_pretty(header)?).map_err(|e| LabError::io(&j, e))?;
    Ok(vec![c, j])
}

/// Labels of `model` on the plane through `x` spanned by the direction pair.
pub fn boundary_grid<T: Scalar>(
    model: &Network<T>,
    model_id: &str,
    x: &[T],
    image_id: &str,
    dirs: &DirectionPair<T>,
    half_extent: usize,
    resolution: usize,
) -> Result<BoundaryGrid> {
    check_item(model, x)?;
    check_item(model, &dirs.delta1)?;
    check_item(model, &dirs.delta2)?;
    let offs = grid_offsets(half_extent, resolution)?;
    let mut rows = Vec::with_capacity(resolution * resolution * x.len());
    for &u in &offs {
        for &v in &offs {
            let (u, v) = (T::from_i64(u).unwrap(), T::from_i64(v).unwrap());
            rows.extend(
                x.iter()
                    .zip(dirs.delta1.iter().zip(&dirs.delta2))
                    .map(|(&a, (&d1, &d2))| a + u * d1 + v * d2),
            );
        }
    }
    let flat = model.predict(&item_batch(model, rows))?;
    Ok(BoundaryGrid {
        model_id: model_id.into(),
        image_id: image_id.into(),
        unit: dirs.unit_norm,
        half_extent,
        resolution,
        labels: flat.chunks(resolution).map(|r| r.to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// The source still predicts the true label here.
    NotAdversarial,
    Unfooled,
    DifferentMistake,
    SameMistake,
}

impl Region {
    pub fn code(self) -> u8 {
        match self {
            Region::NotAdversarial => 0,
            Region::Unfooled => 1,
            Region::DifferentMistake => 2,
            Region::SameMistake => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub source: String,
    pub target: String,
    pub image_id: String,
    pub unit: f64,
    pub half_extent: usize,
    pub resolution: usize,
    pub cells: Vec<Vec<Region>>,
}

impl RegionGrid {
    pub fn count(&self, r: Region) -> usize {
        self.cells.iter().flatten().filter(|&&c| c == r).count()
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            model_id: format!("{}->{}", self.source, self.target),
            image_id: self.image_id.clone(),
            unit: self.unit,
            half_extent: self.half_extent,
            resolution: self.resolution,
            content: "transfer region code".into(),
            layout: LAYOUT.into(),
            legend: ["0=not-adversarial", "1=unfooled", "2=different-mistake", "3=same-mistake"]
                .map(String::from)
                .to_vec(),
        }
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(&self.cells, |r| r.code().to_string())
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        write_pair(dir.as_ref(), stem, &self.to_csv(), &self.header())
    }
}

/// Transfer region of every cell, from the source grid `g1` and target grid `g2`.
pub fn outcome_overlay(g1: &BoundaryGrid, g2: &BoundaryGrid, y: usize) -> Result<RegionGrid> {
    let same_geometry = g1.resolution == g2.resolution
        && g1.half_extent == g2.half_extent
        && g1.unit == g2.unit
        && g1.image_id == g2.image_id
        && g1.labels.len() == g2.labels.len();
    if !same_geometry {
        return Err(LabError::Precondition("overlay grids differ in geometry".into()));
    }
    let cells = g1
        .labels
        .iter()
        .zip(&g2.labels)
        .map(|(r1, r2)| {
            r1.iter()
                .zip(r2)
                .map(|(&a, &b)| {
                    if a == y {
                        Region::NotAdversarial
                    } else {
                        match Outcome::from_labels(y, a, b) {
                            Outcome::Unfooled => Region::Unfooled,
                            Outcome::DifferentMistake => Region::DifferentMistake,
                            Outcome::SameMistake => Region::SameMistake,
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(RegionGrid {
        source: g1.model_id.clone(),
        target: g2.model_id.clone(),
        image_id: g1.image_id.clone(),
        unit: g1.unit,
        half_extent: g1.half_extent,
        resolution: g1.resolution,
        cells,
    })
}
