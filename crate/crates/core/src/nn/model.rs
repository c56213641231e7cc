use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerSpec, Shape, KERNEL};
use super::NnError;
use crate::rng::rng_from_seed;
use crate::tensor::{argmax, Tensor};

/// Per-channel input normalization applied before the network:
/// `(pixel - mean) / std`. Single-element vectors broadcast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.0],
            std: vec![255.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub train_acc: f32,
    pub val_acc: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub arch: ArchitectureSpec,
    /// Weight then bias for each conv/dense layer, in layer order.
    pub weights: Vec<Tensor>,
    pub labels: Vec<String>,
    pub normalization: Normalization,
    pub log: Vec<EpochLog>,
}

/// Mean-loss gradients, one tensor per weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f32,
    pub tensors: Vec<Tensor>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_weights(arch: &ArchitectureSpec, seed: u64) -> Result<TrainedModel, NnError> {
    let shapes = arch.weight_shapes()?;
    let mut rng = rng_from_seed(seed);
    let weights = shapes
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let (fan_in, fan_out) = if shape.len() == 4 {
                let receptive = KERNEL * KERNEL;
                (receptive * shape[3], receptive * shape[0])
            } else {
                (shape[0], shape[1])
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * limit)
                .collect();
            Tensor::new(shape, data).expect("shape product matches")
        })
        .collect();
    Ok(TrainedModel {
        arch: arch.clone(),
        weights,
        labels: (0..arch.num_classes).map(|i| format!("class_{i}")).collect(),
        normalization: Normalization::default(),
        log: Vec::new(),
    })
}

/// Precomputed layer shapes and weight offsets for one architecture.
pub(crate) struct Network<'a> {
    layers: &'a [LayerSpec],
    shapes: Vec<Shape>,
    /// Index of the weight tensor for parametric layers.
    param_slot: Vec<Option<usize>>,
    weights: &'a [Tensor],
}

impl<'a> Network<'a> {
    pub(crate) fn new(arch: &'a ArchitectureSpec, weights: &'a [Tensor]) -> Result<Self, NnError> {
        let shapes = arch.shapes()?;
        let expected = arch.weight_shapes()?;
        if expected.len() != weights.len()
            || expected.iter().zip(weights).any(|(s, w)| s.as_slice() != w.shape())
        {
            return Err(NnError::ShapeMismatch(format!(
                "weights do not match architecture {}",
                arch.id
            )));
        }
        let mut next = 0;
        let param_slot = arch
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                    next += 2;
                    Some(next - 2)
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            layers: &arch.layers,
            shapes,
            param_slot,
            weights,
        })
    }

    pub(crate) fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    pub(crate) fn output_len(&self) -> usize {
        self.shapes.last().expect("non-empty").len()
    }

    /// Runs one sample; `acts[i]` is the input of layer `i`, the last entry
    /// the output (softmax probabilities).
    pub(crate) fn forward_sample(&self, input: &[f32], acts: &mut Vec<Vec<f32>>) {
        acts.resize_with(self.layers.len() + 1, Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(input);
        for i in 0..self.layers.len() {
            let (done, rest) = acts.split_at_mut(i + 1);
            let x = &done[i];
            let y = &mut rest[0];
            y.clear();
            y.resize(self.shapes[i + 1].len(), 0.0);
            match self.layers[i] {
                LayerSpec::Conv2d { filters } => {
                    let slot = self.param_slot[i].expect("conv has params");
                    conv_forward(
                        x,
                        self.shapes[i],
                        filters,
                        self.weights[slot].data(),
                        self.weights[slot + 1].data(),
                        y,
                    );
                }
                LayerSpec::MaxPool2d => pool_forward(x, self.shapes[i], y),
                LayerSpec::Flatten => y.copy_from_slice(x),
                LayerSpec::Dense { units } => {
                    let slot = self.param_slot[i].expect("dense has params");
                    dense_forward(
                        x,
                        units,
                        self.weights[slot].data(),
                        self.weights[slot + 1].data(),
                        y,
                    );
                }
                LayerSpec::Relu => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = v.max(0.0);
                    }
                }
                LayerSpec::Softmax => softmax_into(x, y),
            }
        }
    }

    /// Accumulates `scale * dLoss/dW` for one sample into `grads`, given the
    /// cached activations and the one-hot target. Returns the sample loss.
    pub(crate) fn backward_sample(
        &self,
        acts: &[Vec<f32>],
        target: &[f32],
        scale: f32,
        grads: &mut [Vec<f32>],
        delta: &mut Vec<f32>,
        scratch: &mut Vec<f32>,
    ) -> f32 {
        let n = self.layers.len();
        let logits = &acts[n - 1];
        let probs = &acts[n];
        let loss = cross_entropy_from_logits(logits, target);
        // softmax + cross-entropy: gradient at the logits is p - y
        delta.clear();
        delta.extend(probs.iter().zip(target).map(|(p, t)| (p - t) * scale));
        for i in (0..n - 1).rev() {
            let x = &acts[i];
            let need_input_grad = i > 0;
            scratch.clear();
            scratch.resize(x.len(), 0.0);
            match self.layers[i] {
                LayerSpec::Conv2d { filters } => {
                    let slot = self.param_slot[i].expect("conv has params");
                    let (gw, gb) = split_pair(grads, slot);
                    conv_backward(
                        x,
                        self.shapes[i],
                        filters,
                        self.weights[slot].data(),
                        delta,
                        gw,
                        gb,
                        need_input_grad.then_some(scratch.as_mut_slice()),
                    );
                }
                LayerSpec::MaxPool2d => pool_backward(x, self.shapes[i], delta, scratch),
                LayerSpec::Flatten => scratch.copy_from_slice(delta),
                LayerSpec::Dense { units } => {
                    let slot = self.param_slot[i].expect("dense has params");
                    let (gw, gb) = split_pair(grads, slot);
                    dense_backward(
                        x,
                        units,
                        self.weights[slot].data(),
                        delta,
                        gw,
                        gb,
                        need_input_grad.then_some(scratch.as_mut_slice()),
                    );
                }
                LayerSpec::Relu => {
                    for ((s, &d), &v) in scratch.iter_mut().zip(delta.iter()).zip(x) {
                        *s = if v > 0.0 { d } else { 0.0 };
                    }
                }
                LayerSpec::Softmax => unreachable!("softmax only as the last layer"),
            }
            if !need_input_grad {
                break;
            }
            std::mem::swap(delta, scratch);
        }
        loss
    }
}

fn split_pair(grads: &mut [Vec<f32>], slot: usize) -> (&mut [f32], &mut [f32]) {
    let (a, b) = grads[slot..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn spatial(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Spatial { h, w, c } => (h, w, c),
        Shape::Flat(_) => unreachable!("validated spatial input"),
    }
}

/// Gathers the 3x3xC patch anchored at (y, x) into `patch`.
#[inline]
fn gather_patch(x: &[f32], w: usize, c: usize, oy: usize, ox: usize, patch: &mut [f32]) {
    let row = KERNEL * c;
    for dy in 0..KERNEL {
        let start = ((oy + dy) * w + ox) * c;
        patch[dy * row..(dy + 1) * row].copy_from_slice(&x[start..start + row]);
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(x: &[f32], shape: Shape, filters: usize, kernel: &[f32], bias: &[f32], y: &mut [f32]) {
    let (h, w, c) = spatial(shape);
    let (oh, ow) = (h - KERNEL + 1, w - KERNEL + 1);
    let plen = KERNEL * KERNEL * c;
    let mut patch = vec![0.0; plen];
    for oy in 0..oh {
        for ox in 0..ow {
            gather_patch(x, w, c, oy, ox, &mut patch);
            let out = &mut y[(oy * ow + ox) * filters..(oy * ow + ox + 1) * filters];
            for (k, o) in out.iter_mut().enumerate() {
                *o = bias[k] + dot(&patch, &kernel[k * plen..(k + 1) * plen]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    shape: Shape,
    filters: usize,
    kernel: &[f32],
    dy: &[f32],
    dkernel: &mut [f32],
    dbias: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let (h, w, c) = spatial(shape);
    let (oh, ow) = (h - KERNEL + 1, w - KERNEL + 1);
    let plen = KERNEL * KERNEL * c;
    let row = KERNEL * c;
    let mut patch = vec![0.0; plen];
    let mut dpatch = vec![0.0; plen];
    for oy in 0..oh {
        for ox in 0..ow {
            gather_patch(x, w, c, oy, ox, &mut patch);
            let g = &dy[(oy * ow + ox) * filters..(oy * ow + ox + 1) * filters];
            if dx.is_some() {
                dpatch.iter_mut().for_each(|v| *v = 0.0);
            }
            for (k, &gk) in g.iter().enumerate() {
                if gk == 0.0 {
                    continue;
                }
                dbias[k] += gk;
                let kk = &mut dkernel[k * plen..(k + 1) * plen];
                for (d, &p) in kk.iter_mut().zip(&patch) {
                    *d += gk * p;
                }
                if dx.is_some() {
                    for (d, &wv) in dpatch.iter_mut().zip(&kernel[k * plen..(k + 1) * plen]) {
                        *d += gk * wv;
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                for dyy in 0..KERNEL {
                    let start = ((oy + dyy) * w + ox) * c;
                    for (d, &v) in dx[start..start + row]
                        .iter_mut()
                        .zip(&dpatch[dyy * row..(dyy + 1) * row])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Position (within the input) of the max of each 2x2 window; first
/// occurrence in row-major window order wins ties.
#[inline]
fn pool_argmax(x: &[f32], w: usize, c: usize, py: usize, px: usize, ch: usize) -> usize {
    let mut best = ((2 * py) * w + 2 * px) * c + ch;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let i = ((2 * py + dy) * w + 2 * px + dx) * c + ch;
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

fn pool_forward(x: &[f32], shape: Shape, y: &mut [f32]) {
    let (h, w, c) = spatial(shape);
    let (oh, ow) = (h / 2, w / 2);
    for py in 0..oh {
        for px in 0..ow {
            for ch in 0..c {
                y[(py * ow + px) * c + ch] = x[pool_argmax(x, w, c, py, px, ch)];
            }
        }
    }
}

fn pool_backward(x: &[f32], shape: Shape, dy: &[f32], dx: &mut [f32]) {
    let (h, w, c) = spatial(shape);
    let (oh, ow) = (h / 2, w / 2);
    for py in 0..oh {
        for px in 0..ow {
            for ch in 0..c {
                dx[pool_argmax(x, w, c, py, px, ch)] += dy[(py * ow + px) * c + ch];
            }
        }
    }
}

fn dense_forward(x: &[f32], units: usize, weight: &[f32], bias: &[f32], y: &mut [f32]) {
    y.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wv) in y.iter_mut().zip(&weight[i * units..(i + 1) * units]) {
            *o += xi * wv;
        }
    }
}

fn dense_backward(
    x: &[f32],
    units: usize,
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    dx: Option<&mut [f32]>,
) {
    for (b, &g) in dbias.iter_mut().zip(dy) {
        *b += g;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (d, &g) in dweight[i * units..(i + 1) * units].iter_mut().zip(dy) {
            *d += xi * g;
        }
    }
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            *d = dot(&weight[i * units..(i + 1) * units], dy);
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `-sum(t * log softmax(logits))` via log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f32], target: &[f32]) -> f32 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f32>().ln();
    logits
        .iter()
        .zip(target)
        .map(|(&l, &t)| if t == 0.0 { 0.0 } else { -t * (l - lse) })
        .sum()
}

/// Gradient of cross-entropy with respect to the softmax input.
pub fn softmax_cross_entropy_grad(probs: &[f32], target: &[f32]) -> Vec<f32> {
    probs.iter().zip(target).map(|(p, t)| p - t).collect()
}

impl TrainedModel {
    fn check_batch(&self, net: &Network, batch: &Tensor) -> Result<usize, NnError> {
        let a = &self.arch;
        let expected = [a.input_size, a.input_size, a.channels];
        if batch.shape().len() != 4 || batch.shape()[1..] != expected {
            return Err(NnError::ShapeMismatch(format!(
                "batch {:?} does not match input (B,{},{},{})",
                batch.shape(),
                a.input_size,
                a.input_size,
                a.channels
            )));
        }
        debug_assert_eq!(net.input_len(), expected.iter().product::<usize>());
        Ok(batch.shape()[0])
    }

    /// Class probabilities, shape `(B, num_classes)`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let net = Network::new(&self.arch, &self.weights)?;
        let b = self.check_batch(&net, batch)?;
        let n_in = net.input_len();
        let mut acts = Vec::new();
        let mut out = Vec::with_capacity(b * net.output_len());
        for sample in batch.data().chunks(n_in) {
            net.forward_sample(sample, &mut acts);
            out.extend_from_slice(acts.last().expect("output present"));
        }
        Ok(Tensor::new(vec![b, net.output_len()], out).expect("output shape"))
    }

    /// Gradient of the batch-mean cross-entropy with respect to every weight tensor.
    pub fn backward(&self, batch: &Tensor, labels: &Tensor) -> Result<Gradients, NnError> {
        let net = Network::new(&self.arch, &self.weights)?;
        let b = self.check_batch(&net, batch)?;
        if labels.shape() != [b, self.arch.num_classes] {
            return Err(NnError::ShapeMismatch(format!(
                "labels {:?} for batch of {b} and {} classes",
                labels.shape(),
                self.arch.num_classes
            )));
        }
        let mut grads: Vec<Vec<f32>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let (loss, _) = accumulate_batch(&net, batch.data(), labels.data(), b, &mut grads);
        let tensors = grads
            .into_iter()
            .zip(&self.weights)
            .map(|(g, w)| Tensor::new(w.shape().to_vec(), g).expect("grad shape"))
            .collect();
        Ok(Gradients { loss, tensors })
    }
}

/// Accumulates mean gradients of a batch into zeroed `grads`; returns the
/// mean loss and the number of samples whose argmax matched the target.
pub(crate) fn accumulate_batch(
    net: &Network,
    inputs: &[f32],
    targets: &[f32],
    batch: usize,
    grads: &mut [Vec<f32>],
) -> (f32, usize) {
    let n_in = net.input_len();
    let n_out = net.output_len();
    let scale = 1.0 / batch as f32;
    let (mut acts, mut delta, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
    let (mut loss, mut hits) = (0.0, 0);
    for s in 0..batch {
        let target = &targets[s * n_out..(s + 1) * n_out];
        net.forward_sample(&inputs[s * n_in..(s + 1) * n_in], &mut acts);
        if argmax(acts.last().expect("output")) == argmax(target) {
            hits += 1;
        }
        loss += net.backward_sample(&acts, target, scale, grads, &mut delta, &mut scratch);
    }
    (loss * scale, hits)
}
