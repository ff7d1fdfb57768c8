//! A small convolutional classifier with hand-written backpropagation.
//!
//! Architecture: `[conv3x3 -> ReLU -> maxpool2]* -> dense -> ReLU -> dense`.
//! The network is generic over the float type so the same code trains in
//! `f32` and serves as its own `f64` oracle in gradient checks. All
//! parameters live in one flat vector laid out tensor by tensor in
//! declaration order; gradients and momentum buffers share that layout.

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::PredictionRecord;
use crate::geometry::Raster;
use crate::labeling::{context_label, LabelVector, LabelingPolicy};
use crate::loss::{cross_entropy_with_grad, softmax, top1};
use crate::rng::stream_rng;
use crate::synthdata::{draw_training_item, Dataset, EvalSet, ItemKind, SamplerConfig};
use crate::{Error, Result};

/// Samples per gradient partial sum. Partial sums are reduced in index
/// order, so the result does not depend on the number of workers.
const GRAD_CHUNK: usize = 8;

pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub input_size: (u32, u32),
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: (32, 32),
            channels: vec![8, 16],
            kernel: 3,
            hidden: 64,
            num_classes: 10,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.input_size.0 as usize, self.input_size.1 as usize);
        if w == 0 || h == 0 {
            return Err(Error::invalid("input size must be positive"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid(
                "channels must be a non-empty list of positive widths",
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let div = 1usize << self.channels.len();
        if w % div != 0 || h % div != 0 {
            return Err(Error::invalid(format!(
                "input {w}x{h} must be divisible by {div} for {} pooling stages",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvShape {
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
    weight: usize,
    bias: usize,
}

impl ConvShape {
    fn plane(&self) -> usize {
        self.h * self.w
    }
    fn pooled(&self) -> usize {
        self.out_c * (self.h / 2) * (self.w / 2)
    }
}

#[derive(Debug, Clone)]
struct DenseShape {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvShape>,
    hidden: DenseShape,
    output: DenseShape,
    len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Layout {
        let mut off = 0;
        let mut convs = Vec::new();
        let (mut h, mut w) = (cfg.input_size.1 as usize, cfg.input_size.0 as usize);
        let mut in_c = 1;
        for &out_c in &cfg.channels {
            let weight = off;
            off += out_c * in_c * cfg.kernel * cfg.kernel;
            let bias = off;
            off += out_c;
            convs.push(ConvShape {
                in_c,
                out_c,
                k: cfg.kernel,
                h,
                w,
                weight,
                bias,
            });
            in_c = out_c;
            h /= 2;
            w /= 2;
        }
        let flat = in_c * h * w;
        let mut dense = |inputs: usize, outputs: usize| {
            let weight = off;
            off += inputs * outputs;
            let bias = off;
            off += outputs;
            DenseShape {
                inputs,
                outputs,
                weight,
                bias,
            }
        };
        let hidden = dense(flat, cfg.hidden);
        let output = dense(cfg.hidden, cfg.num_classes);
        Layout {
            convs,
            hidden,
            output,
            len: off,
        }
    }
}

/// Activations kept from the forward pass, plus backward scratch.
struct Cache<T> {
    /// `acts[i]` is the input of conv stage `i`; the last entry is the
    /// flattened input of the hidden dense layer.
    acts: Vec<Vec<T>>,
    conv_out: Vec<Vec<T>>,
    pool_idx: Vec<Vec<u32>>,
    hidden: Vec<T>,
    logits: Vec<T>,
    d_conv: Vec<Vec<T>>,
    d_acts: Vec<Vec<T>>,
    d_hidden: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    fn new(layout: &Layout) -> Self {
        let mut acts = Vec::new();
        for c in &layout.convs {
            acts.push(vec![T::zero(); c.in_c * c.plane()]);
        }
        acts.push(vec![T::zero(); layout.hidden.inputs]);
        let conv_out: Vec<Vec<T>> = layout
            .convs
            .iter()
            .map(|c| vec![T::zero(); c.out_c * c.plane()])
            .collect();
        let pool_idx = layout
            .convs
            .iter()
            .map(|c| vec![0u32; c.pooled()])
            .collect();
        Cache {
            d_acts: acts.clone(),
            d_conv: conv_out.clone(),
            acts,
            conv_out,
            pool_idx,
            hidden: vec![T::zero(); layout.hidden.outputs],
            logits: vec![T::zero(); layout.output.outputs],
            d_hidden: vec![T::zero(); layout.hidden.outputs],
        }
    }
}

/// Dot product over eight interleaved accumulators, combined in a fixed
/// order. Breaking the single add chain lets the loop vectorise.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] = acc[l] + x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

fn conv_forward<T: Scalar>(s: &ConvShape, params: &[T], input: &[T], out: &mut [T]) {
    let (h, w, k) = (s.h, s.w, s.k);
    let pad = (k / 2) as isize;
    let plane = s.plane();
    for oc in 0..s.out_c {
        let o = &mut out[oc * plane..(oc + 1) * plane];
        o.fill(params[s.bias + oc]);
        for ic in 0..s.in_c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let wv = params[s.weight + ((oc * s.in_c + ic) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a = *a + wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `d_input` is given.
fn conv_backward<T: Scalar>(
    s: &ConvShape,
    params: &[T],
    input: &[T],
    d_out: &[T],
    grads: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    let (h, w, k) = (s.h, s.w, s.k);
    let pad = (k / 2) as isize;
    let plane = s.plane();
    if let Some(d) = d_input.as_deref_mut() {
        d.fill(T::zero());
    }
    for oc in 0..s.out_c {
        let go = &d_out[oc * plane..(oc + 1) * plane];
        let gb = go.iter().copied().fold(T::zero(), |a, b| a + b);
        grads[s.bias + oc] = grads[s.bias + oc] + gb;
        for ic in 0..s.in_c {
            let inp = &input[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let wi = s.weight + ((oc * s.in_c + ic) * k + ky) * k + kx;
                    let wv = params[wi];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * w + x0..y * w + x1];
                        let irow = &inp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc = acc + dot(grow, irow);
                        if let Some(d) = d_input.as_deref_mut() {
                            let drow = &mut d
                                [ic * plane + sy * w + sx0..ic * plane + sy * w + sx0 + (x1 - x0)];
                            for (dv, &g) in drow.iter_mut().zip(grow) {
                                *dv = *dv + wv * g;
                            }
                        }
                    }
                    grads[wi] = grads[wi] + acc;
                }
            }
        }
    }
}

fn relu_pool<T: Scalar>(s: &ConvShape, conv: &mut [T], pooled: &mut [T], idx: &mut [u32]) {
    for v in conv.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let (h, w) = (s.h, s.w);
    let (ph, pw) = (h / 2, w / 2);
    for c in 0..s.out_c {
        let base = c * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + 2 * py * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * py + dy) * w + 2 * px + dx;
                    if conv[i] > conv[best] {
                        best = i;
                    }
                }
                let o = c * ph * pw + py * pw + px;
                pooled[o] = conv[best];
                idx[o] = best as u32;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetConfig,
    layout: Layout,
    params: Vec<T>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len
    }
}

impl<T: Scalar> Network<T> {
    /// He-scaled normal weights, zero biases, and an all-zero output layer so
    /// that a fresh network predicts the uniform distribution.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.len];
        let mut rng = stream_rng(config.init_seed, "init", 0);
        let mut fill = |start: usize, n: usize, fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut params[start..start + n] {
                let z: f64 = rng.sample(StandardNormal);
                *p = T::of_f64(z * std);
            }
        };
        for c in &layout.convs {
            fill(c.weight, c.out_c * c.in_c * c.k * c.k, c.in_c * c.k * c.k);
        }
        let hd = &layout.hidden;
        fill(hd.weight, hd.inputs * hd.outputs, hd.inputs);
        Ok(Network {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: NetConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Network {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// `(name, length)` of every tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, c) in self.layout.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.out_c * c.in_c * c.k * c.k));
            out.push((format!("conv{i}.bias"), c.out_c));
        }
        for (name, d) in [
            ("hidden", &self.layout.hidden),
            ("output", &self.layout.output),
        ] {
            out.push((format!("{name}.weight"), d.inputs * d.outputs));
            out.push((format!("{name}.bias"), d.outputs));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| U::of_f64(p.as_f64())).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        (self.config.input_size.0 * self.config.input_size.1) as usize
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::invalid(format!(
                "input has {} pixels, network expects {}x{}",
                input.len(),
                self.config.input_size.0,
                self.config.input_size.1
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, input: &[T], cache: &mut Cache<T>) {
        let p = &self.params;
        cache.acts[0].copy_from_slice(input);
        for (i, s) in self.layout.convs.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(i + 1);
            conv_forward(s, p, &before[i], &mut cache.conv_out[i]);
            relu_pool(
                s,
                &mut cache.conv_out[i],
                &mut after[0],
                &mut cache.pool_idx[i],
            );
        }
        let flat = cache.acts.last().expect("at least one activation");
        let hd = &self.layout.hidden;
        for (o, out) in cache.hidden.iter_mut().enumerate() {
            let row = &p[hd.weight + o * hd.inputs..hd.weight + (o + 1) * hd.inputs];
            let z = p[hd.bias + o] + dot(row, flat);
            *out = if z > T::zero() { z } else { T::zero() };
        }
        let od = &self.layout.output;
        for (o, out) in cache.logits.iter_mut().enumerate() {
            let row = &p[od.weight + o * od.inputs..od.weight + (o + 1) * od.inputs];
            *out = p[od.bias + o] + dot(row, &cache.hidden);
        }
    }

    /// Adds `d(logits . d_logits)/d(params)` into `grads`.
    fn backward_cached(&self, cache: &mut Cache<T>, d_logits: &[T], grads: &mut [T]) {
        let p = &self.params;
        let od = &self.layout.output;
        cache.d_hidden.fill(T::zero());
        for (o, &g) in d_logits.iter().enumerate() {
            grads[od.bias + o] = grads[od.bias + o] + g;
            let w0 = od.weight + o * od.inputs;
            for j in 0..od.inputs {
                grads[w0 + j] = grads[w0 + j] + g * cache.hidden[j];
                cache.d_hidden[j] = cache.d_hidden[j] + g * p[w0 + j];
            }
        }
        let hd = &self.layout.hidden;
        let n_stages = self.layout.convs.len();
        let flat = &cache.acts[n_stages];
        let d_flat = &mut cache.d_acts[n_stages];
        d_flat.fill(T::zero());
        for o in 0..hd.outputs {
            if cache.hidden[o] <= T::zero() {
                continue;
            }
            let g = cache.d_hidden[o];
            if g == T::zero() {
                continue;
            }
            grads[hd.bias + o] = grads[hd.bias + o] + g;
            let w0 = hd.weight + o * hd.inputs;
            let grow = &mut grads[w0..w0 + hd.inputs];
            for (gw, &x) in grow.iter_mut().zip(flat.iter()) {
                *gw = *gw + g * x;
            }
            let wrow = &p[w0..w0 + hd.inputs];
            for (d, &w) in d_flat.iter_mut().zip(wrow) {
                *d = *d + g * w;
            }
        }
        for i in (0..n_stages).rev() {
            let s = &self.layout.convs[i];
            let d_conv = &mut cache.d_conv[i];
            d_conv.fill(T::zero());
            let d_pooled = &cache.d_acts[i + 1];
            for (&idx, &g) in cache.pool_idx[i].iter().zip(d_pooled.iter()) {
                let idx = idx as usize;
                if cache.conv_out[i][idx] > T::zero() {
                    d_conv[idx] = d_conv[idx] + g;
                }
            }
            let (d_before, _) = cache.d_acts.split_at_mut(i + 1);
            let d_input = if i > 0 {
                Some(&mut d_before[i][..])
            } else {
                None
            };
            conv_backward(s, p, &cache.acts[i], &cache.d_conv[i], grads, d_input);
        }
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let mut cache = Cache::new(&self.layout);
        self.forward_cached(input, &mut cache);
        Ok(cache.logits)
    }

    /// Vector-Jacobian product: gradient of `logits . d_logits` with respect
    /// to every parameter.
    pub fn vjp(&self, input: &[T], d_logits: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        if d_logits.len() != self.config.num_classes {
            return Err(Error::invalid("d_logits length differs from class count"));
        }
        let mut cache = Cache::new(&self.layout);
        self.forward_cached(input, &mut cache);
        let mut grads = vec![T::zero(); self.layout.len];
        self.backward_cached(&mut cache, d_logits, &mut grads);
        Ok(grads)
    }

    /// Cross-entropy of one sample and its parameter gradient.
    pub fn loss_and_grad(&self, input: &[T], label: &LabelVector) -> Result<(f64, Vec<T>)> {
        self.check_input(input)?;
        let mut cache = Cache::new(&self.layout);
        self.forward_cached(input, &mut cache);
        let z: Vec<f64> = cache.logits.iter().map(|v| v.as_f64()).collect();
        let (loss, g) = cross_entropy_with_grad(&z, label)?;
        let g: Vec<T> = g.into_iter().map(T::of_f64).collect();
        let mut grads = vec![T::zero(); self.layout.len];
        self.backward_cached(&mut cache, &g, &mut grads);
        Ok((loss, grads))
    }

    pub fn loss(&self, input: &[T], label: &LabelVector) -> Result<f64> {
        let z: Vec<f64> = self.forward(input)?.iter().map(|v| v.as_f64()).collect();
        crate::loss::cross_entropy(&z, label)
    }

    /// Sum of per-sample losses and gradients scaled by `scale`, accumulated
    /// in sample order.
    fn batch_partial(
        &self,
        inputs: &[&[T]],
        labels: &[&LabelVector],
        scale: f64,
    ) -> Result<(Vec<f64>, Vec<T>)> {
        let mut cache = Cache::new(&self.layout);
        let mut grads = vec![T::zero(); self.layout.len];
        let mut losses = Vec::with_capacity(inputs.len());
        for (x, label) in inputs.iter().zip(labels) {
            self.forward_cached(x, &mut cache);
            let z: Vec<f64> = cache.logits.iter().map(|v| v.as_f64()).collect();
            // diverged parameters, not a malformed input
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite logits during training".into()));
            }
            let (loss, g) = cross_entropy_with_grad(&z, label)?;
            let g: Vec<T> = g.into_iter().map(|v| T::of_f64(v * scale)).collect();
            self.backward_cached(&mut cache, &g, &mut grads);
            losses.push(loss);
        }
        Ok((losses, grads))
    }
}

/// Trainable state: `f32` parameters plus SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub net: Network<f32>,
    pub momentum: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epoch fractions at which the learning rate is multiplied by `lr_decay`.
    pub decay_at: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    /// Optimisation steps per epoch; defaults to one pass over the training
    /// split.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.1,
            lr_decay: 0.1,
            decay_at: vec![0.25, 0.5, 0.75],
            batch_size: 64,
            momentum: 0.9,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.decay_at.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("decay_at must be sorted"));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("decay_at fractions must lie in [0, 1]"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be positive"));
        }
        Ok(())
    }

    /// Step schedule: `base_lr * lr_decay^m` where `m` counts the decay
    /// points already reached by 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|&&f| epoch as f64 >= f * self.epochs as f64)
            .count();
        self.base_lr * self.lr_decay.powi(passed as i32)
    }
}

impl ModelState {
    pub fn new(config: NetConfig) -> Result<Self> {
        let net = Network::new(config)?;
        let momentum = vec![0.0; net.num_params()];
        Ok(ModelState { net, momentum })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    pub fn logits(&self, image: &Raster) -> Result<Vec<f32>> {
        self.net.forward(&image.data)
    }

    pub fn forward_batch(&self, images: &[Raster]) -> Result<Vec<Vec<f32>>> {
        images.iter().map(|im| self.logits(im)).collect()
    }

    pub fn predict(
        &self,
        image: &Raster,
        true_class: usize,
        objectness: Option<f64>,
    ) -> Result<PredictionRecord> {
        let z: Vec<f64> = self.logits(image)?.iter().map(|&v| v as f64).collect();
        let probs = softmax(&z)?;
        let (predicted, confidence) = top1(&probs);
        Ok(PredictionRecord {
            probs,
            predicted,
            confidence,
            true_class,
            objectness,
        })
    }

    /// One SGD-with-momentum step on the mean batch cross-entropy:
    /// `v <- mu v + g`, `theta <- theta - lr v`. Returns the loss before the
    /// update. Gradients are summed in fixed chunks of samples so any worker
    /// count gives the same bits.
    pub fn train_step(
        &mut self,
        batch: &[Raster],
        labels: &[LabelVector],
        lr: f64,
        momentum: f64,
    ) -> Result<f64> {
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(Error::invalid(format!(
                "batch of {} images with {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let k = self.config().num_classes;
        for (im, l) in batch.iter().zip(labels) {
            if im.data.len() != self.net.input_len() {
                return Err(Error::invalid(
                    "batch image size differs from network input",
                ));
            }
            if l.len() != k {
                return Err(Error::invalid("label length differs from class count"));
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let inputs: Vec<&[f32]> = batch.iter().map(|r| r.data.as_slice()).collect();
        let labels: Vec<&LabelVector> = labels.iter().collect();
        let net = &self.net;
        let partials = inputs
            .par_chunks(GRAD_CHUNK)
            .zip(labels.par_chunks(GRAD_CHUNK))
            .map(|(x, y)| net.batch_partial(x, y, scale))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = vec![0.0f32; net.num_params()];
        let mut loss_sum = 0.0;
        for (losses, g) in &partials {
            loss_sum += losses.iter().sum::<f64>();
            for (a, &b) in grads.iter_mut().zip(g) {
                *a += b;
            }
        }
        let loss = loss_sum * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at lr {lr}")));
        }
        let (lr, mu) = (lr as f32, momentum as f32);
        for ((p, v), &g) in self
            .net
            .params_mut()
            .iter_mut()
            .zip(self.momentum.iter_mut())
            .zip(&grads)
        {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    /// SHA-256 over the pixels of the first batch, for comparing data
    /// streams across runs.
    pub first_batch_hash: String,
}

pub fn accuracy(state: &ModelState, set: &EvalSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut correct = 0usize;
    for item in &set.items {
        if state.predict(&item.image, item.class, None)?.predicted == item.class {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Runs the full schedule. Batch `s` consists of draws
/// `s * batch_size .. (s + 1) * batch_size` from the training stream, so two
/// policies with the same sampler see the same images in the same order.
/// Only adaptive policies receive context-only items; for other policies the
/// context rate is forced to zero.
pub fn train(
    dataset: &Dataset,
    val: Option<&EvalSet>,
    sampler: &SamplerConfig,
    policy: &LabelingPolicy,
    net: &NetConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    sampler.validate()?;
    if net.num_classes != policy.num_classes || net.num_classes != dataset.spec.num_classes {
        return Err(Error::invalid(format!(
            "class count mismatch: net {}, policy {}, data {}",
            net.num_classes, policy.num_classes, dataset.spec.num_classes
        )));
    }
    if net.input_size != sampler.output_size {
        return Err(Error::invalid(
            "network input size must equal the sampler output size",
        ));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut sampler = sampler.clone();
    if !policy.mode.uses_context_items() {
        sampler.context_fraction = 0.0;
    }
    let steps = tc
        .steps_per_epoch
        .unwrap_or_else(|| dataset.len().div_ceil(tc.batch_size));
    let uniform = context_label(policy.num_classes)?;

    let mut state = ModelState::new(net.clone())?;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut first_batch_hash = String::new();
    let mut global = 0u64;
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let mut images = Vec::with_capacity(tc.batch_size);
            let mut labels = Vec::with_capacity(tc.batch_size);
            for j in 0..tc.batch_size as u64 {
                let item =
                    draw_training_item(dataset, &sampler, global * tc.batch_size as u64 + j)?;
                let label = match item.kind {
                    ItemKind::Context => uniform.clone(),
                    ItemKind::Object { class, objectness } => policy.label(class, objectness)?,
                };
                images.push(item.image);
                labels.push(label);
            }
            if global == 0 {
                first_batch_hash = hash_images(&images);
            }
            let loss = state
                .train_step(&images, &labels, lr, tc.momentum)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (epoch {}, step {global}, policy {})",
                        epoch + 1,
                        policy.mode
                    )),
                    other => other,
                })?;
            loss_sum += loss;
            global += 1;
        }
        let val_acc = val.map(|v| accuracy(&state, v)).transpose()?;
        log.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps as f64,
            val_acc,
        });
    }
    Ok(TrainOutcome {
        state,
        log,
        first_batch_hash,
    })
}

pub fn hash_images(images: &[Raster]) -> String {
    let mut h = Sha256::new();
    for im in images {
        for v in &im.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
