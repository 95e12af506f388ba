use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::arch::{Architecture, LayerSpec};
use super::loss::{argmax, softmax_cross_entropy};
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inference chunk used by [`Network::predict`] and [`Network::forward`]
/// callers that evaluate large sets.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What [`Network::loss_and_grads`] differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Input,
    Both,
}

impl Wrt {
    fn params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::Both)
    }

    fn input(self) -> bool {
        matches!(self, Wrt::Input | Wrt::Both)
    }
}

/// Weight and bias of one parametric layer.
///
/// Dense weights are `[outputs, inputs]`; convolution weights are
/// `[out_channels, in_channels, kernel, kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per layer, `Some` for parametric layers.
    pub params: Option<Vec<Option<Param<T>>>>,
    pub input: Option<Tensor<T>>,
}

/// Feed-forward classifier over a fixed layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    params: Vec<Option<Param<T>>>,
}

/// Per-layer state recorded during a forward pass for backpropagation.
struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    dropout_masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Network<T> {
    /// Initializes parameters with He-uniform fan-in scaling
    /// (`U(-√(6/fan_in), √(6/fan_in))`) and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers()
            .iter()
            .map(|layer| {
                layer.param_shapes().map(|(wshape, blen)| {
                    let fan_in: usize = wshape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = wshape.iter().product();
                    let w = (0..n)
                        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                        .collect();
                    Param {
                        weight: Tensor::from_parts(wshape, w),
                        bias: Tensor::zeros(&[blen]),
                    }
                })
            })
            .collect();
        Self { arch, params }
    }

    /// Builds a network from a preset name (`FC-2`, `FC-4`, `Conv-2`,
    /// `Conv-4`) or a full architecture string.
    pub fn build(name_or_spec: &str, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let arch = if super::arch::is_preset(name_or_spec) {
            Architecture::preset(name_or_spec, input_shape, num_classes)?
        } else if name_or_spec.contains('(') || name_or_spec.contains(';') {
            let layers = name_or_spec
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty() && !s.starts_with("in=") && !s.starts_with("classes="))
                .map(str::parse)
                .collect::<Result<Vec<LayerSpec>>>()?;
            Architecture::new(layers, input_shape, num_classes)?
        } else {
            return Err(LabError::UnknownPreset(name_or_spec.to_string()));
        };
        Ok(Self::new(arch, seed))
    }

    /// Assembles a network from explicit parameters, validating their shapes.
    pub fn from_params(arch: Architecture, params: Vec<Option<Param<T>>>) -> Result<Self> {
        if params.len() != arch.layers().len() {
            return Err(LabError::InvalidArchitecture(format!(
                "{} parameter slots for {} layers",
                params.len(),
                arch.layers().len()
            )));
        }
        for (layer, p) in arch.layers().iter().zip(&params) {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) if p.weight.shape() == w.as_slice() && p.bias.shape() == [b] => {}
                _ => {
                    return Err(LabError::InvalidArchitecture(format!(
                        "parameters do not match layer {layer}"
                    )))
                }
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.arch.input_shape()
    }

    pub fn params(&self) -> &[Option<Param<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Param<T>>] {
        &mut self.params
    }

    /// All parameter tensors in checkpoint order: per layer, weight then bias.
    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| Param {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape().len() + 1 || x.item_shape() != self.input_shape() {
            let mut expected = vec![x.batch_len()];
            expected.extend_from_slice(self.input_shape());
            return Err(LabError::ShapeMismatch {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(LabError::ShapeMismatch {
                expected: vec![n],
                actual: vec![labels.len()],
            });
        }
        let c = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(LabError::InvalidLabel {
                label,
                num_classes: c,
            });
        }
        Ok(())
    }

    /// Logits `[n, num_classes]` in evaluation mode.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (logits, _) = self.run(x.clone(), Mode::Eval, None, false);
        Ok(logits)
    }

    /// Logits in an explicit mode; `rng` drives dropout masks in training mode.
    pub fn forward_mode<R: Rng>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (logits, _) = self.run(x.clone(), mode, Some(rng as &mut dyn rand::RngCore), false);
        Ok(logits)
    }

    /// Arg-max labels in evaluation mode. Ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let n = x.batch_len();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let labels = chunks
            .par_iter()
            .map(|&(s, e)| {
                let (logits, _) = self.run(x.slice_batch(s, e), Mode::Eval, None, false);
                (0..e - s).map(|i| argmax(logits.item(i))).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        Ok(labels.into_iter().flatten().collect())
    }

    /// Mean softmax cross-entropy over the batch and its exact gradients,
    /// evaluated in evaluation mode.
    pub fn loss_and_grads(&self, x: &Tensor<T>, labels: &[usize], wrt: Wrt) -> Result<(T, Gradients<T>)> {
        self.loss_and_grads_impl(x, labels, wrt, Mode::Eval, None)
            .map(|(l, g, _)| (l, g))
    }

    /// As [`Network::loss_and_grads`] in an explicit mode.
    pub fn loss_and_grads_mode<R: Rng>(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        wrt: Wrt,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(T, Gradients<T>)> {
        self.loss_and_grads_impl(x, labels, wrt, mode, Some(rng as &mut dyn rand::RngCore))
            .map(|(l, g, _)| (l, g))
    }

    /// Training-step variant that also returns the logits of the pass.
    pub(crate) fn train_step<R: Rng>(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<(T, Gradients<T>, Tensor<T>)> {
        self.loss_and_grads_impl(x, labels, Wrt::Params, Mode::Train, Some(rng as &mut dyn rand::RngCore))
    }

    fn loss_and_grads_impl(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        wrt: Wrt,
        mode: Mode,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(T, Gradients<T>, Tensor<T>)> {
        self.check_input(x)?;
        let n = x.batch_len();
        self.check_labels(labels, n)?;
        if n == 0 {
            return Err(LabError::Precondition("empty batch".into()));
        }
        let (logits, trace) = self.run(x.clone(), mode, rng, true);
        let (losses, mut dlogits) = softmax_cross_entropy(&logits, labels);
        let scale = T::one() / T::from_usize(n).unwrap();
        dlogits.data_mut().iter_mut().for_each(|v| *v *= scale);
        let loss = losses.iter().copied().sum::<T>() * scale;
        let grads = self.backward(trace.expect("trace requested"), dlogits, wrt);
        Ok((loss, grads, logits))
    }

    /// Per-example losses and the gradient of their sum with respect to the
    /// input, i.e. each item's own loss gradient. Evaluation mode.
    pub fn input_gradient(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        self.check_input(x)?;
        self.check_labels(labels, x.batch_len())?;
        let (logits, trace) = self.run(x.clone(), Mode::Eval, None, true);
        let (losses, dlogits) = softmax_cross_entropy(&logits, labels);
        let grads = self.backward(trace.expect("trace requested"), dlogits, Wrt::Input);
        Ok((losses, grads.input.expect("input gradient requested")))
    }

    fn run(
        &self,
        mut x: Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut dyn rand::RngCore>,
        keep_trace: bool,
    ) -> (Tensor<T>, Option<Trace<T>>) {
        let n = x.batch_len();
        let layers = self.arch.layers();
        let mut trace = keep_trace.then(|| Trace {
            inputs: Vec::with_capacity(layers.len()),
            pool_argmax: Vec::with_capacity(layers.len()),
            dropout_masks: Vec::with_capacity(layers.len()),
        });
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = self.arch.shape_at(i);
            let out_shape = self.arch.shape_at(i + 1);
            let mut shape = vec![n];
            shape.extend_from_slice(out_shape);
            let mut pool = None;
            let mut mask = None;
            let y = match layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let p = self.params[i].as_ref().unwrap();
                    dense_forward(&x, p, n, *inputs, *outputs)
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    conv_forward(&x, p, n, in_shape, out_shape, *stride)
                }
                LayerSpec::ReLU => x.data().iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::MaxPool2x2 => {
                    let (y, idx) = maxpool_forward(&x, n, in_shape, out_shape);
                    pool = Some(idx);
                    y
                }
                LayerSpec::Dropout { rate } => match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(rng)) if *rate > 0.0 => {
                        let keep = T::one() / T::from_f64_lossy(1.0 - rate);
                        let m: Vec<T> = (0..x.len())
                            .map(|_| if rng.gen::<f64>() < *rate { T::zero() } else { keep })
                            .collect();
                        let y = x.data().iter().zip(&m).map(|(&a, &b)| a * b).collect();
                        mask = Some(m);
                        y
                    }
                    _ => x.data().to_vec(),
                },
                LayerSpec::Flatten => x.data().to_vec(),
            };
            let y = Tensor::from_parts(shape, y);
            if let Some(t) = trace.as_mut() {
                t.inputs.push(std::mem::replace(&mut x, y));
                t.pool_argmax.push(pool);
                t.dropout_masks.push(mask);
            } else {
                x = y;
            }
        }
        (x, trace)
    }

    fn backward(&self, trace: Trace<T>, dlogits: Tensor<T>, wrt: Wrt) -> Gradients<T> {
        let layers = self.arch.layers();
        let n = dlogits.batch_len();
        let mut pgrads: Option<Vec<Option<Param<T>>>> = wrt
            .params()
            .then(|| self.params.iter().map(|p| p.as_ref().map(Param::zeros_like)).collect());
        // Index of the first layer whose input gradient is still needed.
        let first_needed = if wrt.input() {
            0
        } else {
            layers.iter().position(LayerSpec::has_params).map_or(layers.len(), |i| i + 1)
        };
        let mut dy = dlogits.into_data();
        let Trace {
            inputs,
            pool_argmax,
            dropout_masks,
        } = trace;
        for (i, layer) in layers.iter().enumerate().rev() {
            let x = &inputs[i];
            let in_shape = self.arch.shape_at(i);
            let out_shape = self.arch.shape_at(i + 1);
            let need_dx = i >= first_needed;
            let dx = match layer {
                LayerSpec::Dense { inputs: fin, outputs } => {
                    let p = self.params[i].as_ref().unwrap();
                    let g = pgrads.as_mut().and_then(|g| g[i].as_mut());
                    dense_backward(x, p, &dy, n, *fin, *outputs, g, need_dx)
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let g = pgrads.as_mut().and_then(|g| g[i].as_mut());
                    conv_backward(x, p, &dy, n, in_shape, out_shape, *stride, g, need_dx)
                }
                LayerSpec::ReLU => need_dx.then(|| {
                    x.data()
                        .iter()
                        .zip(&dy)
                        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                        .collect()
                }),
                LayerSpec::MaxPool2x2 => need_dx.then(|| {
                    let idx = pool_argmax[i].as_ref().unwrap();
                    let in_item: usize = in_shape.iter().product();
                    let out_item: usize = out_shape.iter().product();
                    let mut dx = vec![T::zero(); x.len()];
                    for b in 0..n {
                        for o in 0..out_item {
                            dx[b * in_item + idx[b * out_item + o] as usize] += dy[b * out_item + o];
                        }
                    }
                    dx
                }),
                LayerSpec::Dropout { .. } => need_dx.then(|| match &dropout_masks[i] {
                    Some(m) => dy.iter().zip(m).map(|(&g, &k)| g * k).collect(),
                    None => dy.clone(),
                }),
                LayerSpec::Flatten => need_dx.then(|| dy.clone()),
            };
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        let input = wrt
            .input()
            .then(|| Tensor::from_parts(inputs[0].shape().to_vec(), dy));
        Gradients {
            params: pgrads,
            input,
        }
    }
}

fn dense_forward<T: Scalar>(x: &Tensor<T>, p: &Param<T>, n: usize, fin: usize, fout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(p.bias.data());
    }
    // y[n, out] += x[n, in] · Wᵀ
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        x.data(),
        fin as isize,
        1,
        p.weight.data(),
        1,
        fin as isize,
        T::one(),
        &mut y,
        fout as isize,
        1,
    );
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Param<T>,
    dy: &[T],
    n: usize,
    fin: usize,
    fout: usize,
    grad: Option<&mut Param<T>>,
    need_dx: bool,
) -> Option<Vec<T>> {
    if let Some(g) = grad {
        // dW[out, in] += dyᵀ · x
        T::gemm(
            fout,
            n,
            fin,
            T::one(),
            dy,
            1,
            fout as isize,
            x.data(),
            fin as isize,
            1,
            T::one(),
            g.weight.data_mut(),
            fin as isize,
            1,
        );
        let db = g.bias.data_mut();
        for row in dy.chunks_exact(fout) {
            for (b, &v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); n * fin];
        T::gemm(
            n,
            fout,
            fin,
            T::one(),
            dy,
            fout as isize,
            1,
            p.weight.data(),
            fin as isize,
            1,
            T::zero(),
            &mut dx,
            fin as isize,
            1,
        );
        dx
    })
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], out_shape: &[usize], k: usize, s: usize) -> Self {
        Self {
            c: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            oc: out_shape[0],
            oh: out_shape[1],
            ow: out_shape[2],
            k,
            s,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let src = (ci * self.h + oy * self.s + ki) * self.w + kj;
                        let row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.s == 1 {
                            row.copy_from_slice(&x[src..src + self.ow]);
                        } else {
                            for (ox, v) in row.iter_mut().enumerate() {
                                *v = x[src + ox * self.s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.oh {
                        let base = (ci * self.h + oy * self.s + ki) * self.w + kj;
                        for ox in 0..self.ow {
                            dx[base + ox * self.s] += src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &Param<T>,
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
) -> Vec<T> {
    let g = ConvGeom::new(in_shape, out_shape, p.weight.shape()[2], stride);
    let in_item = g.c * g.h * g.w;
    let out_item = g.oc * g.cols();
    let mut y = vec![T::zero(); n * out_item];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    for b in 0..n {
        g.im2col(&x.data()[b * in_item..(b + 1) * in_item], &mut cols);
        let out = &mut y[b * out_item..(b + 1) * out_item];
        for (o, &bias) in p.bias.data().iter().enumerate() {
            out[o * g.cols()..(o + 1) * g.cols()].fill(bias);
        }
        T::gemm(
            g.oc,
            g.rows(),
            g.cols(),
            T::one(),
            p.weight.data(),
            g.rows() as isize,
            1,
            &cols,
            g.cols() as isize,
            1,
            T::one(),
            out,
            g.cols() as isize,
            1,
        );
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &Param<T>,
    dy: &[T],
    n: usize,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    mut grad: Option<&mut Param<T>>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let g = ConvGeom::new(in_shape, out_shape, p.weight.shape()[2], stride);
    let in_item = g.c * g.h * g.w;
    let out_item = g.oc * g.cols();
    let (rows, ncols) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_item]);
    for b in 0..n {
        let dyb = &dy[b * out_item..(b + 1) * out_item];
        if let Some(gr) = grad.as_deref_mut() {
            g.im2col(&x.data()[b * in_item..(b + 1) * in_item], &mut cols);
            // dW[oc, rows] += dy[oc, cols] · colsᵀ
            T::gemm(
                g.oc,
                ncols,
                rows,
                T::one(),
                dyb,
                ncols as isize,
                1,
                &cols,
                1,
                ncols as isize,
                T::one(),
                gr.weight.data_mut(),
                rows as isize,
                1,
            );
            for (o, db) in gr.bias.data_mut().iter_mut().enumerate() {
                *db += dyb[o * ncols..(o + 1) * ncols].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, cols] = Wᵀ · dy
            T::gemm(
                rows,
                g.oc,
                ncols,
                T::one(),
                p.weight.data(),
                1,
                rows as isize,
                dyb,
                ncols as isize,
                1,
                T::zero(),
                &mut dcols,
                ncols as isize,
                1,
            );
            g.col2im_add(&dcols, &mut dx[b * in_item..(b + 1) * in_item]);
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, n: usize, in_shape: &[usize], out_shape: &[usize]) -> (Vec<T>, Vec<u32>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let in_item = c * h * w;
    let out_item = c * oh * ow;
    let mut y = Vec::with_capacity(n * out_item);
    let mut idx = Vec::with_capacity(n * out_item);
    for b in 0..n {
        let xb = &x.data()[b * in_item..(b + 1) * in_item];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ci * h * w + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xb[j] > xb[best] {
                            best = j;
                        }
                    }
                    y.push(xb[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}
