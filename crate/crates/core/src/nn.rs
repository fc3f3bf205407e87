//! Feed-forward network with a single sigmoid output, binary cross-entropy
//! loss and per-example backpropagation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{NoiseSource, STREAM_MISC};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Layer widths from input to the single output unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchitectureSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
}

impl ArchitectureSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if let Some(i) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArchitecture(format!("layer {i} has size 0")));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidArchitecture(
                "output layer must have exactly 1 unit".into(),
            ));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation,
        })
    }

    /// `input → hidden (one layer) → 1`.
    pub fn single_hidden(input: usize, hidden: usize, activation: Activation) -> Result<Self> {
        Self::new(alloc::vec![input, hidden, 1], activation)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One affine layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    inputs: usize,
    outputs: usize,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }
}

/// Network parameters. Flatten order is layer by layer, weights (row-major)
/// followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchitectureSpec,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &ArchitectureSpec) -> Self {
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| Layer {
                weights: alloc::vec![0.0; w[0] * w[1]],
                bias: alloc::vec![0.0; w[1]],
                inputs: w[0],
                outputs: w[1],
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(arch: &ArchitectureSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                found: flat.len(),
            });
        }
        let mut params = Self::zeros(arch);
        let mut offset = 0;
        for l in &mut params.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(params)
    }

    /// Applies `f(param, flat_index)` to each parameter in flatten order.
    pub(crate) fn update_each(&mut self, mut f: impl FnMut(&mut f64, usize)) {
        let mut idx = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                f(w, idx);
                idx += 1;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Labelled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Matrix,
    labels: Vec<u8>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<u8>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("batch features"));
        }
        if let Some(row) = labels.iter().position(|&y| y > 1) {
            return Err(Error::InvalidLabel {
                row,
                value: format!("{}", labels[row]),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weights on `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> ModelParams {
    let mut rng = NoiseSource::new(seed, STREAM_MISC);
    let mut params = ModelParams::zeros(arch);
    for l in &mut params.layers {
        let bound = libm::sqrt(6.0 / (l.inputs + l.outputs) as f64);
        for w in &mut l.weights {
            *w = rng.symmetric(bound);
        }
    }
    params
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy on an already-computed probability (clamped first).
pub fn bce(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -libm::log(p)
    } else {
        -libm::log(1.0 - p)
    }
}

/// Per-layer pre-activations and activations for one example.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ModelParams {
    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (li, l) in self.layers.iter().enumerate() {
            let input = if li == 0 { x } else { &post[li - 1][..] };
            let z: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let mut acc = l.bias[o];
                    for (w, a) in l.weight_row(o).iter().zip(input) {
                        acc += w * a;
                    }
                    acc
                })
                .collect();
            let a = if li + 1 == n {
                z.iter().map(|&v| sigmoid(v)).collect()
            } else {
                z.iter()
                    .map(|&v| self.arch.hidden_activation.apply(v))
                    .collect()
            };
            pre.push(z);
            post.push(a);
        }
        Trace { pre, post }
    }

    /// Unclamped output probability for one example.
    fn raw_prob(&self, x: &[f64]) -> f64 {
        self.trace(x).post.last().unwrap()[0]
    }

    /// Clamped probability for one example.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        Ok(clamp_prob(self.raw_prob(x)))
    }

    /// Flat gradient of the (unclamped) cross-entropy for one example, plus
    /// its clamped loss.
    fn backprop(&self, x: &[f64], y: u8) -> (Vec<f64>, f64) {
        let t = self.trace(x);
        let p = t.post.last().unwrap()[0];
        let loss = bce(p, y);

        // Gradient blocks are produced back to front, then laid out in
        // flatten order.
        let n = self.layers.len();
        let mut blocks: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
        let mut delta = alloc::vec![p - f64::from(y)];
        for li in (0..n).rev() {
            let l = &self.layers[li];
            let input = if li == 0 { x } else { &t.post[li - 1][..] };
            let mut gw = Vec::with_capacity(l.weights.len());
            for &d in &delta {
                gw.extend(input.iter().map(|a| d * a));
            }
            let gb = delta.clone();
            if li > 0 {
                let act = self.arch.hidden_activation;
                let prev_pre = &t.pre[li - 1];
                let prev_post = &t.post[li - 1];
                let mut next = alloc::vec![0.0; l.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    for (acc, w) in next.iter_mut().zip(l.weight_row(o)) {
                        *acc += w * d;
                    }
                }
                for (i, v) in next.iter_mut().enumerate() {
                    *v *= act.derivative(prev_pre[i], prev_post[i]);
                }
                delta = next;
            }
            blocks.push((gw, gb));
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in blocks.into_iter().rev() {
            flat.extend(gw);
            flat.extend(gb);
        }
        (flat, loss)
    }
}

/// Clamped output probabilities, one per row.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<Vec<f64>> {
    if features.cols() != params.arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim(),
            found: features.cols(),
        });
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("features"));
    }
    Ok(features
        .row_iter()
        .map(|x| clamp_prob(params.raw_prob(x)))
        .collect())
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[1e-7, 1-1e-7]`.
pub fn example_loss(params: &ModelParams, x: &[f64], y: u8) -> Result<f64> {
    let p = params.predict(x)?;
    if y > 1 {
        return Err(Error::InvalidLabel {
            row: 0,
            value: format!("{y}"),
        });
    }
    Ok(bce(p, y))
}

/// Mean clamped loss over a batch.
pub fn mean_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let probs = forward(params, batch.features())?;
    let total: f64 = probs
        .iter()
        .zip(batch.labels())
        .map(|(&p, &y)| bce(p, y))
        .sum();
    Ok(total / batch.len() as f64)
}

/// One flat gradient per example, in batch order.
///
/// The gradient is that of the unclamped cross-entropy; it differs from the
/// clamped loss only where `|logit| > ~16`.
pub fn per_example_gradients(params: &ModelParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    Ok(per_example_gradients_with_loss(params, batch)?.0)
}

/// Per-example gradients together with each example's loss.
pub fn per_example_gradients_with_loss(
    params: &ModelParams,
    batch: &Batch,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if batch.features().cols() != params.arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim(),
            found: batch.features().cols(),
        });
    }
    let mut grads = Vec::with_capacity(batch.len());
    let mut losses = Vec::with_capacity(batch.len());
    for (x, &y) in batch.features().row_iter().zip(batch.labels()) {
        let (g, l) = params.backprop(x, y);
        grads.push(g);
        losses.push(l);
    }
    Ok((grads, losses))
}
