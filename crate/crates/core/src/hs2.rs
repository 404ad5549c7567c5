//! The HS² classifier: two 3×3 convolutions (each followed by ReLU and 2×2
//! max pooling), three ReLU fully connected layers and a two-way softmax.
//!
//! Everything is written out by hand: forward pass, exact backpropagation of
//! the mean cross-entropy, mini-batch SGD with a step learning-rate schedule,
//! and a small binary model format. The network is generic over the scalar
//! type so gradient checks can run in `f64`; the production model is `f32`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;
pub const MODEL_MAGIC: &[u8; 4] = b"HS2M";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum Hs2Error {
    #[error("non-finite input value at index {0}")]
    NonFinite(usize),
    #[error("input has {got} values, expected {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("model format: {0}")]
    Format(String),
}

pub trait Scalar: Float + Sum + Send + Sync + Debug + Default + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Tissue,
    Nodule,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Tissue => 0,
            Label::Nodule => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Nodule
        } else {
            Label::Tissue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_nodule: f64,
    pub p_tissue: f64,
    pub label: Label,
}

/// Layer widths. Kernel, padding and pooling are fixed (3×3, pad 1, 2×2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub conv_channels: [usize; 2],
    pub fc_widths: [usize; 3],
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input_size: 48, conv_channels: [30, 50], fc_widths: [2048, 1024, 512], classes: 2 }
    }
}

impl Architecture {
    pub fn pooled_size(&self) -> usize {
        self.input_size / (POOL * POOL)
    }

    pub fn flatten_len(&self) -> usize {
        self.pooled_size().pow(2) * self.conv_channels[1]
    }

    fn validate(&self) -> Result<(), Hs2Error> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(POOL * POOL) {
            return Err(Hs2Error::Format(format!("input size {} must be a positive multiple of 4", self.input_size)));
        }
        if self.classes != 2 || self.conv_channels.contains(&0) || self.fc_widths.contains(&0) {
            return Err(Hs2Error::Format(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn dense_shapes(&self) -> [(usize, usize); 4] {
        let [a, b, c] = self.fc_widths;
        [(self.flatten_len(), a), (a, b), (b, c), (c, self.classes)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hs2Net<T> {
    pub arch: Architecture,
    pub conv: [Conv<T>; 2],
    pub dense: [Dense<T>; 4],
    pub seed: u64,
}

pub type Hs2Model = Hs2Net<f32>;

/// Per-parameter gradients, in [`Hs2Net::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

pub struct Example<'a, T> {
    pub input: &'a [T],
    pub label: Label,
}

#[inline]
fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("representable")
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Output rows `y` for which input row `y + dy` exists, and the column
/// window likewise.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

impl<T: Scalar> Conv<T> {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![T::zero(); out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Same-size 3×3 convolution with zero padding of 1. Planes are `n × n`.
    fn forward(&self, input: &[T], n: usize, out: &mut [T]) {
        let plane = n * n;
        for o in 0..self.out_channels {
            let out_plane = &mut out[o * plane..(o + 1) * plane];
            out_plane.fill(self.bias[o]);
            for c in 0..self.in_channels {
                let in_plane = &input[c * plane..(c + 1) * plane];
                let w = &self.weights[(o * self.in_channels + c) * 9..][..9];
                for ky in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(n, dy);
                    for kx in 0..KERNEL {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(n, dx);
                        let wk = w[ky * KERNEL + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * n + (x0 as isize + dx) as usize..][..x1 - x0];
                            axpy(wk, src, &mut out_plane[y * n + x0..y * n + x1]);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight and bias gradients; writes the input gradient
    /// into `d_input` when given.
    fn backward(
        &self,
        input: &[T],
        d_out: &[T],
        n: usize,
        d_weights: &mut [T],
        d_bias: &mut [T],
        mut d_input: Option<&mut [T]>,
    ) {
        let plane = n * n;
        if let Some(di) = d_input.as_deref_mut() {
            di.fill(T::zero());
        }
        for o in 0..self.out_channels {
            let g_plane = &d_out[o * plane..(o + 1) * plane];
            d_bias[o] = d_bias[o] + g_plane.iter().copied().sum::<T>();
            for c in 0..self.in_channels {
                let in_plane = &input[c * plane..(c + 1) * plane];
                let wi = (o * self.in_channels + c) * 9;
                for ky in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(n, dy);
                    for kx in 0..KERNEL {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(n, dx);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &in_plane[sy * n + (x0 as isize + dx) as usize..][..x1 - x0];
                            acc = acc + dot(src, &g_plane[y * n + x0..y * n + x1]);
                        }
                        d_weights[wi + ky * KERNEL + kx] = d_weights[wi + ky * KERNEL + kx] + acc;
                        if let Some(di) = d_input.as_deref_mut() {
                            let wk = self.weights[wi + ky * KERNEL + kx];
                            let di_plane = &mut di[c * plane..(c + 1) * plane];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let start = sy * n + (x0 as isize + dx) as usize;
                                axpy(wk, &g_plane[y * n + x0..y * n + x1], &mut di_plane[start..start + x1 - x0]);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Dense<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    /// `xs` holds `batch` rows of `inputs`; returns `batch` rows of `outputs`.
    fn forward(&self, xs: &[T], batch: usize) -> Vec<T> {
        let mut out = vec![T::zero(); batch * self.outputs];
        for j in 0..self.outputs {
            let row = &self.weights[j * self.inputs..(j + 1) * self.inputs];
            for b in 0..batch {
                out[b * self.outputs + j] = self.bias[j] + dot(row, &xs[b * self.inputs..(b + 1) * self.inputs]);
            }
        }
        out
    }

    fn backward(
        &self,
        xs: &[T],
        d_out: &[T],
        batch: usize,
        d_weights: &mut [T],
        d_bias: &mut [T],
        d_input: Option<&mut Vec<T>>,
    ) {
        let mut d_in = d_input;
        if let Some(di) = d_in.as_deref_mut() {
            di.clear();
            di.resize(batch * self.inputs, T::zero());
        }
        for j in 0..self.outputs {
            let row = &self.weights[j * self.inputs..(j + 1) * self.inputs];
            let d_row = &mut d_weights[j * self.inputs..(j + 1) * self.inputs];
            for b in 0..batch {
                let g = d_out[b * self.outputs + j];
                if g == T::zero() {
                    continue;
                }
                d_bias[j] = d_bias[j] + g;
                axpy(g, &xs[b * self.inputs..(b + 1) * self.inputs], d_row);
                if let Some(di) = d_in.as_deref_mut() {
                    axpy(g, row, &mut di[b * self.inputs..(b + 1) * self.inputs]);
                }
            }
        }
    }
}

fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// 2×2 max pooling over `channels` planes of `n × n`; records the flat
/// index of each winner (first maximum in raster order).
fn max_pool<T: Scalar>(input: &[T], channels: usize, n: usize) -> (Vec<T>, Vec<usize>) {
    let m = n / POOL;
    let mut out = Vec::with_capacity(channels * m * m);
    let mut arg = Vec::with_capacity(channels * m * m);
    for c in 0..channels {
        let base = c * n * n;
        for y in 0..m {
            for x in 0..m {
                let mut best = base + 2 * y * n + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * n + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Activations kept for the backward pass of one sample's conv stack.
struct ConvTrace<T> {
    z1: Vec<T>,
    arg1: Vec<usize>,
    p1: Vec<T>,
    z2: Vec<T>,
    arg2: Vec<usize>,
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| cast(normal.sample(rng))).collect()
}

fn log_softmax_pair(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    (l0 - lse, l1 - lse)
}

impl<T: Scalar> Hs2Net<T> {
    pub fn zeros(arch: Architecture) -> Self {
        let [c1, c2] = arch.conv_channels;
        let shapes = arch.dense_shapes();
        Self {
            arch,
            conv: [Conv::zeros(1, c1), Conv::zeros(c1, c2)],
            dense: shapes.map(|(i, o)| Dense::zeros(i, o)),
            seed: 0,
        }
    }

    /// He-initialized weights (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut net = Self::zeros(arch);
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut net.conv {
            let fan_in = conv.in_channels * KERNEL * KERNEL;
            conv.weights = he_normal(&mut rng, conv.weights.len(), fan_in);
        }
        for d in &mut net.dense {
            d.weights = he_normal(&mut rng, d.weights.len(), d.inputs);
        }
        net
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_size * self.arch.input_size
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::with_capacity(12);
        for c in &self.conv {
            v.push(&c.weights);
            v.push(&c.bias);
        }
        for d in &self.dense {
            v.push(&d.weights);
            v.push(&d.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::with_capacity(12);
        for c in &mut self.conv {
            v.push(&mut c.weights);
            v.push(&mut c.bias);
        }
        for d in &mut self.dense {
            v.push(&mut d.weights);
            v.push(&mut d.bias);
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, input: &[T]) -> Result<(), Hs2Error> {
        if input.len() != self.input_len() {
            return Err(Hs2Error::InputSize { expected: self.input_len(), got: input.len() });
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Hs2Error::NonFinite(i));
        }
        Ok(())
    }

    fn conv_stack(&self, input: &[T]) -> (Vec<T>, ConvTrace<T>) {
        let n = self.arch.input_size;
        let [c1, c2] = self.arch.conv_channels;
        let mut z1 = vec![T::zero(); c1 * n * n];
        self.conv[0].forward(input, n, &mut z1);
        let mut a1 = z1.clone();
        relu_inplace(&mut a1);
        let (p1, arg1) = max_pool(&a1, c1, n);
        let m = n / POOL;
        let mut z2 = vec![T::zero(); c2 * m * m];
        self.conv[1].forward(&p1, m, &mut z2);
        let mut a2 = z2.clone();
        relu_inplace(&mut a2);
        let (p2, arg2) = max_pool(&a2, c2, m);
        (p2, ConvTrace { z1, arg1, p1, z2, arg2 })
    }

    /// Flattened output of the convolutional stage (channel-major).
    pub fn conv_features(&self, input: &[T]) -> Vec<T> {
        self.conv_stack(input).0
    }

    /// The linear piece of the network at `input`: every max-pool winner
    /// followed by the on/off state of every ReLU. Parameter settings with
    /// equal patterns lie on the same piece, where the loss is smooth.
    pub fn decision_pattern(&self, input: &[T]) -> Vec<usize> {
        let (feats, tr) = self.conv_stack(input);
        let mut pattern = tr.arg1;
        pattern.extend(tr.arg2);
        let on = |v: &T| usize::from(*v > T::zero());
        pattern.extend(tr.z1.iter().map(on));
        pattern.extend(tr.z2.iter().map(on));
        let mut x = feats;
        for d in &self.dense[..3] {
            x = d.forward(&x, 1);
            pattern.extend(x.iter().map(on));
            relu_inplace(&mut x);
        }
        pattern
    }

    /// Logits of the fully connected head for a batch of feature rows.
    pub fn head_logits(&self, features: &[T], batch: usize) -> Vec<T> {
        let mut x = features.to_vec();
        for (l, d) in self.dense.iter().enumerate() {
            x = d.forward(&x, batch);
            if l < 3 {
                relu_inplace(&mut x);
            }
        }
        x
    }

    pub fn logits(&self, input: &[T]) -> Result<[T; 2], Hs2Error> {
        self.check_input(input)?;
        let l = self.head_logits(&self.conv_features(input), 1);
        Ok([l[0], l[1]])
    }

    pub fn forward(&self, input: &[T]) -> Result<Prediction, Hs2Error> {
        let [l0, l1] = self.logits(input)?;
        let (l0, l1) = (l0.to_f64().unwrap_or(f64::NAN), l1.to_f64().unwrap_or(f64::NAN));
        let (lp0, lp1) = log_softmax_pair(l0, l1);
        let p_nodule = lp1.exp();
        let p_tissue = lp0.exp();
        let label = if p_nodule > p_tissue { Label::Nodule } else { Label::Tissue };
        Ok(Prediction { p_nodule, p_tissue: 1.0 - p_nodule, label })
    }

    /// Mean cross-entropy of a batch.
    pub fn loss(&self, batch: &[Example<'_, T>]) -> Result<f64, Hs2Error> {
        Ok(self.per_sample_losses(batch)?.iter().sum::<f64>() / batch.len() as f64)
    }

    pub fn per_sample_losses(&self, batch: &[Example<'_, T>]) -> Result<Vec<f64>, Hs2Error> {
        if batch.is_empty() {
            return Err(Hs2Error::EmptyBatch);
        }
        let mut feats = Vec::with_capacity(batch.len() * self.arch.flatten_len());
        for ex in batch {
            self.check_input(ex.input)?;
            feats.extend(self.conv_features(ex.input));
        }
        let logits = self.head_logits(&feats, batch.len());
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, ex)| {
                let (lp0, lp1) = log_softmax_pair(
                    logits[2 * b].to_f64().unwrap_or(f64::NAN),
                    logits[2 * b + 1].to_f64().unwrap_or(f64::NAN),
                );
                -[lp0, lp1][ex.label.index()]
            })
            .collect())
    }

    /// Exact gradients of the mean cross-entropy over `batch`, plus the
    /// per-sample losses at the current parameters.
    pub fn backward(&self, batch: &[Example<'_, T>]) -> Result<(Gradients<T>, Vec<f64>), Hs2Error> {
        if batch.is_empty() {
            return Err(Hs2Error::EmptyBatch);
        }
        let bsz = batch.len();
        let n = self.arch.input_size;
        let m = n / POOL;
        let [c1, c2] = self.arch.conv_channels;

        let mut traces = Vec::with_capacity(bsz);
        let mut feats = Vec::with_capacity(bsz * self.arch.flatten_len());
        for ex in batch {
            self.check_input(ex.input)?;
            let (p2, trace) = self.conv_stack(ex.input);
            feats.extend(p2);
            traces.push(trace);
        }

        // Dense forward keeping each layer's input and pre-activation.
        let mut layer_inputs = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        let mut x = feats;
        for (l, d) in self.dense.iter().enumerate() {
            let z = d.forward(&x, bsz);
            layer_inputs.push(x);
            let mut a = z.clone();
            if l < 3 {
                relu_inplace(&mut a);
            }
            pre.push(z);
            x = a;
        }
        let logits = x;

        let mut losses = Vec::with_capacity(bsz);
        let mut grad = vec![T::zero(); bsz * 2];
        let inv_b = 1.0 / bsz as f64;
        for (b, ex) in batch.iter().enumerate() {
            let (lp0, lp1) = log_softmax_pair(
                logits[2 * b].to_f64().unwrap_or(f64::NAN),
                logits[2 * b + 1].to_f64().unwrap_or(f64::NAN),
            );
            let k = ex.label.index();
            losses.push(-[lp0, lp1][k]);
            for (c, lp) in [lp0, lp1].into_iter().enumerate() {
                let target = if c == k { 1.0 } else { 0.0 };
                grad[2 * b + c] = cast((lp.exp() - target) * inv_b);
            }
        }

        let mut g = Gradients { tensors: self.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect() };
        let (conv_g, dense_g) = g.tensors.split_at_mut(4);

        for l in (0..4).rev() {
            let d = &self.dense[l];
            let (dw, db) = dense_g[2 * l..2 * l + 2].split_at_mut(1);
            let mut d_in = Vec::new();
            d.backward(&layer_inputs[l], &grad, bsz, &mut dw[0], &mut db[0], Some(&mut d_in));
            if l > 0 {
                for (gi, &z) in d_in.iter_mut().zip(&pre[l - 1]) {
                    if z <= T::zero() {
                        *gi = T::zero();
                    }
                }
            }
            grad = d_in;
        }

        let flat = self.arch.flatten_len();
        let (c1g, c2g) = conv_g.split_at_mut(2);
        let (c1w, c1b) = c1g.split_at_mut(1);
        let (c2w, c2b) = c2g.split_at_mut(1);
        let mut d_z2 = vec![T::zero(); c2 * m * m];
        let mut d_p1 = vec![T::zero(); c1 * m * m];
        let mut d_z1 = vec![T::zero(); c1 * n * n];
        for (b, (ex, tr)) in batch.iter().zip(&traces).enumerate() {
            d_z2.fill(T::zero());
            for (i, &src) in tr.arg2.iter().enumerate() {
                if tr.z2[src] > T::zero() {
                    d_z2[src] = d_z2[src] + grad[b * flat + i];
                }
            }
            self.conv[1].backward(&tr.p1, &d_z2, m, &mut c2w[0], &mut c2b[0], Some(&mut d_p1));
            d_z1.fill(T::zero());
            for (i, &src) in tr.arg1.iter().enumerate() {
                if tr.z1[src] > T::zero() {
                    d_z1[src] = d_z1[src] + d_p1[i];
                }
            }
            self.conv[0].backward(ex.input, &d_z1, n, &mut c1w[0], &mut c1b[0], None);
        }
        Ok((g, losses))
    }

    /// `params -= learning_rate * gradients`.
    pub fn apply_gradients(&mut self, g: &Gradients<T>, learning_rate: f64) {
        let lr: T = cast(learning_rate);
        for (p, gt) in self.tensors_mut().into_iter().zip(&g.tensors) {
            axpy(-lr, gt, p);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Hs2Model {
    pub fn predict_grid(&self, normalized: &crate::lhi::Grid<f32>) -> Result<Prediction, Hs2Error> {
        self.forward(&normalized.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Oversample the minority class to a 1:1 ratio.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_decay: 0.1,
            decay_every: 500,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            balance_classes: true,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }

    fn validate(&self) -> Result<(), Hs2Error> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Hs2Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Hs2Error::Config("epochs, batch size and decay interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// Normalized LHI, row-major.
    pub input: Vec<f32>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    pub epoch_slots: usize,
}

/// Sample indices visited each epoch. With balancing, the minority class is
/// repeated cyclically up to the majority count.
fn epoch_slots(dataset: &[LabeledImage], balance: bool) -> Vec<usize> {
    let nodules: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].label == Label::Nodule).collect();
    let tissues: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].label == Label::Tissue).collect();
    if !balance {
        return (0..dataset.len()).collect();
    }
    let (major, minor) = if nodules.len() >= tissues.len() { (nodules, tissues) } else { (tissues, nodules) };
    let mut slots = major.clone();
    slots.extend(minor.iter().cycle().take(major.len()));
    slots.sort_unstable();
    slots
}

/// Mini-batch SGD on the mean cross-entropy. Deterministic for a given
/// seed: batches are drawn from a seeded shuffle and gradients are summed in
/// a fixed order.
pub fn train(model: &mut Hs2Model, dataset: &[LabeledImage], config: &TrainConfig) -> Result<TrainReport, Hs2Error> {
    config.validate()?;
    let has = |l: Label| dataset.iter().any(|s| s.label == l);
    if !has(Label::Nodule) || !has(Label::Tissue) {
        return Err(Hs2Error::Config("training data must contain both classes".into()));
    }
    let slots = epoch_slots(dataset, config.balance_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..slots.len()).collect();
    let mut slot_loss = vec![0.0f64; slots.len()];
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_, f32>> = chunk
                .iter()
                .map(|&s| {
                    let img = &dataset[slots[s]];
                    Example { input: &img.input, label: img.label }
                })
                .collect();
            let (g, losses) = model.backward(&batch)?;
            for (&s, l) in chunk.iter().zip(losses) {
                slot_loss[s] = l;
            }
            if lr > 0.0 {
                model.apply_gradients(&g, lr);
            }
        }
        let mean = slot_loss.iter().sum::<f64>() / slots.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:e} loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainReport { loss_history: history, epoch_slots: slots.len() })
}

/// Fraction of images whose argmax label matches.
pub fn accuracy(model: &Hs2Model, data: &[LabeledImage]) -> Result<f64, Hs2Error> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        if model.forward(&s.input)?.label == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Binary cross-entropy of probability `p` against a 0/1 target.
pub fn loss_bce(p: f64, target: u8) -> Result<f64, Hs2Error> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Hs2Error::Config(format!("probability {p} outside (0, 1)")));
    }
    let t = f64::from(target.min(1));
    Ok(-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
}

pub fn loss_smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Serializes a model: magic, version, seed, architecture, then every
/// tensor as a length-prefixed run of little-endian `f32`.
pub fn save_model(model: &Hs2Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.parameter_count() * 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    let a = &model.arch;
    for v in [
        a.input_size,
        KERNEL,
        a.conv_channels[0],
        a.conv_channels[1],
        a.fc_widths[0],
        a.fc_widths[1],
        a.fc_widths[2],
        a.classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in model.tensors() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Hs2Error> {
        if self.bytes.len() - self.pos < n {
            return Err(Hs2Error::Format(format!("truncated stream at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Hs2Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, Hs2Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_model(bytes: &[u8]) -> Result<Hs2Model, Hs2Error> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Hs2Error::Format("bad magic, not an HS2 model file".into()));
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return Err(Hs2Error::Format(format!(
            "unsupported model version {version}, this build reads version {MODEL_VERSION}"
        )));
    }
    let seed = c.u64()?;
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = c.u32()? as usize;
    }
    if dims[1] != KERNEL {
        return Err(Hs2Error::Format(format!("kernel size {} unsupported", dims[1])));
    }
    let arch = Architecture {
        input_size: dims[0],
        conv_channels: [dims[2], dims[3]],
        fc_widths: [dims[4], dims[5], dims[6]],
        classes: dims[7],
    };
    arch.validate()?;
    let mut model = Hs2Model::zeros(arch);
    model.seed = seed;
    for (i, t) in model.tensors_mut().into_iter().enumerate() {
        let len = c.u32()? as usize;
        if len != t.len() {
            return Err(Hs2Error::Format(format!("tensor {i} has {len} values, expected {}", t.len())));
        }
        let raw = c.take(len * 4)?;
        for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Hs2Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    if !model.all_finite() {
        return Err(Hs2Error::Format("non-finite parameter".into()));
    }
    Ok(model)
}
