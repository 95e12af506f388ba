//! Seeded Gaussian-cluster image generator, the zero-download stand-in for
//! Fashion-MNIST.
//!
//! Every class has a smooth random mean image around mid-grey. A sample is
//! its class mean plus a shared low-rank "style" component (smooth fields
//! with Gaussian coefficients, the same basis for all classes) plus i.i.d.
//! pixel noise, clipped to `[0, 1]`. Small contrast between class means
//! relative to the image dimension is what makes the clusters attackable
//! with l2 budgets of order one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{LabError, Result};
use crate::scalar::{l2_norm, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    /// Per-pixel RMS deviation of class means from 0.5.
    pub mean_contrast: f64,
    /// Width (in pixels) of the Gaussian blur shaping means and style fields.
    pub smoothing: f64,
    /// Number of shared style fields.
    pub style_rank: usize,
    /// Per-pixel RMS of each style component.
    pub style_scale: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub pixel_noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

/// Fashion-MNIST shaped (`1×28×28`, ten classes) with within-class
/// variation set so that FC-2 and Conv-2 reach roughly 90% test accuracy.
impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_shape: vec![1, 28, 28],
            mean_contrast: 0.25,
            smoothing: 2.0,
            style_rank: 16,
            style_scale: 0.3,
            pixel_noise: 0.1,
            train_count: 6000,
            test_count: 2000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// `1×12×12` images with milder variation; fast enough for unit tests.
    pub fn small() -> Self {
        Self {
            input_shape: vec![1, 12, 12],
            style_rank: 8,
            style_scale: 0.15,
            pixel_noise: 0.05,
            train_count: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad("synthetic data needs at least two classes".into());
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} must be [c, h, w]", self.input_shape));
        }
        for (name, v) in [
            ("mean_contrast", self.mean_contrast),
            ("smoothing", self.smoothing),
            ("style_scale", self.style_scale),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        if self.mean_contrast == 0.0 {
            return bad("mean_contrast 0 makes all class means identical".into());
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Separable Gaussian blur over each channel, followed by rescaling to a
/// per-pixel RMS of one.
fn smooth_field(shape: &[usize], width: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let raw: Vec<f64> = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * width).ceil() as isize;
    let kernel: Vec<f64> = if width > 0.0 {
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * width * width)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    } else {
        vec![1.0]
    };
    let r = if width > 0.0 { radius } else { 0 };
    let mut tmp = vec![0.0; raw.len()];
    let mut out = vec![0.0; raw.len()];
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = x as isize + j as isize - r;
                    if (0..w as isize).contains(&xx) {
                        acc += kv * raw[base + y * w + xx as usize];
                    }
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = y as isize + j as isize - r;
                    if (0..h as isize).contains(&yy) {
                        acc += kv * tmp[base + yy as usize * w + x];
                    }
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    let rms = l2_norm(&out) / (out.len() as f64).sqrt();
    out.iter().map(|v| v / rms).collect()
}

/// Class mean images `[num_classes, c, h, w]` for `spec`.
pub fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_classes)
        .map(|_| {
            smooth_field(&spec.input_shape, spec.smoothing, &mut rng)
                .into_iter()
                .map(|v| 0.5 + spec.mean_contrast * v)
                .collect()
        })
        .collect()
}

/// Generates class-balanced `(train, test)` sets. Labels cycle through the
/// classes so every prefix is balanced as well.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let means = class_means(spec);
    for i in 0..means.len() {
        for j in 0..i {
            if means[i] == means[j] {
                return Err(LabError::InvalidConfig(format!(
                    "class means {i} and {j} coincide"
                )));
            }
        }
    }
    let mut basis_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    basis_rng.set_stream(1);
    let basis: Vec<Vec<f64>> = (0..spec.style_rank)
        .map(|_| smooth_field(&spec.input_shape, spec.smoothing, &mut basis_rng))
        .collect();

    let draw = |count: usize, stream: u64| -> Result<Dataset<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let d = spec.dim();
        let mut data = Vec::with_capacity(count * d);
        let mut labels = Vec::with_capacity(count);
        let mut img = vec![0.0; d];
        for i in 0..count {
            let y = i % spec.num_classes;
            img.copy_from_slice(&means[y]);
            for b in &basis {
                let coef: f64 = StandardNormal.sample(&mut rng);
                let s = coef * spec.style_scale;
                for (p, &bv) in img.iter_mut().zip(b) {
                    *p += s * bv;
                }
            }
            for p in img.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *p = (*p + spec.pixel_noise * e).clamp(0.0, 1.0);
            }
            data.extend(img.iter().map(|&v| T::from_f64_lossy(v)));
            labels.push(y);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(&spec.input_shape);
        Dataset::new(Tensor::new(shape, data)?, labels, spec.num_classes)
    };
    Ok((draw(spec.train_count, 2)?, draw(spec.test_count, 3)?))
}
