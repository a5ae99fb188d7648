//! A small trainable network whose backward pass exposes, for every dense
//! layer, the per-sample input activations `x_i` and backpropagated errors
//! `δ_i` from which the batch gradient `(1/B) Σ δ_i x_iᵀ` is assembled.

mod checkpoint;
mod gradcheck;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{mix_seed, ImageShape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use checkpoint::{MODEL_MAGIC, MODEL_VERSION};
pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_EPSILON, GRADCHECK_RELATIVE, GRADCHECK_ABSOLUTE};
pub use layers::{ConvLayer, DenseLayer, Features, Layer};

/// Names accepted by [`Network::preset`].
pub const PRESETS: [&str; 2] = ["mlp-mnist", "mini-conv"];

pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: ImageShape,
    pub layers: Vec<Layer>,
    /// Fraction of units zeroed by each dropout layer in train mode.
    pub dropout_fraction: f64,
}

impl Network {
    pub fn new(input: ImageShape, layers: Vec<Layer>, dropout_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_fraction) {
            return Err(Error::Config(format!("dropout fraction {dropout_fraction} is outside [0, 1)")));
        }
        let net = Network {
            input,
            layers,
            dropout_fraction,
        };
        net.feature_chain()?;
        Ok(net)
    }

    /// Builds a named architecture with seeded weights. With `dropout`, a
    /// dropout layer at fraction 0.5 follows every hidden dense activation.
    ///
    /// * `mlp-mnist`: 784-256-128-10
    /// * `mini-conv`: conv 3→8 3x3, pool, conv 8→16 3x3, pool, 1024-64-10
    /// * `mlp:W0-W1-…-WL`: ReLU perceptron on flat `W0`-wide input
    pub fn preset(name: &str, dropout: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(spec) = name.strip_prefix("mlp:") {
            return Self::mlp(spec, dropout, &mut rng);
        }
        let hidden = |layers: &mut Vec<Layer>, dense: DenseLayer| {
            layers.push(Layer::Dense(dense));
            layers.push(Layer::Relu);
            if dropout {
                layers.push(Layer::Dropout);
            }
        };
        let (input, layers) = match name {
            "mlp-mnist" => {
                let mut layers = Vec::new();
                hidden(&mut layers, DenseLayer::init(256, 784, &mut rng));
                hidden(&mut layers, DenseLayer::init(128, 256, &mut rng));
                layers.push(Layer::Dense(DenseLayer::init(10, 128, &mut rng)));
                let input = ImageShape {
                    channels: 1,
                    height: 28,
                    width: 28,
                };
                (input, layers)
            }
            "mini-conv" => {
                let mut layers = vec![
                    Layer::Conv(ConvLayer::init(3, 8, 3, 1, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv(ConvLayer::init(8, 16, 3, 1, 1, &mut rng)),
                    Layer::Relu,
                    Layer::MaxPool2,
                ];
                hidden(&mut layers, DenseLayer::init(64, 16 * 8 * 8, &mut rng));
                layers.push(Layer::Dense(DenseLayer::init(10, 64, &mut rng)));
                let input = ImageShape {
                    channels: 3,
                    height: 32,
                    width: 32,
                };
                (input, layers)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Network::new(input, layers, if dropout { DEFAULT_DROPOUT } else { 0.0 })
    }

    fn mlp(spec: &str, dropout: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let widths = spec
            .split('-')
            .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
            .collect::<Option<Vec<_>>>()
            .filter(|w| w.len() >= 2)
            .ok_or_else(|| Error::Config(format!("bad mlp widths {spec:?} (expected e.g. mlp:784-64-10)")))?;
        let mut layers = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Dense(DenseLayer::init(pair[1], pair[0], rng)));
            if l + 2 < widths.len() {
                layers.push(Layer::Relu);
                if dropout {
                    layers.push(Layer::Dropout);
                }
            }
        }
        let input = ImageShape {
            channels: 1,
            height: 1,
            width: widths[0],
        };
        Network::new(input, layers, if dropout { DEFAULT_DROPOUT } else { 0.0 })
    }

    /// Feature layout entering each layer, followed by the output layout.
    pub fn feature_chain(&self) -> Result<Vec<Features>> {
        let mut chain = vec![Features::Image(self.input)];
        for layer in &self.layers {
            let next = layer.output_features(*chain.last().unwrap())?;
            chain.push(next);
        }
        Ok(chain)
    }

    pub fn class_count(&self) -> usize {
        self.feature_chain().map(|c| c.last().unwrap().len()).unwrap_or(0)
    }

    /// Layer positions of the dense layers, in forward order.
    pub fn dense_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Dense(_)))
            .collect()
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Conv(_)))
            .collect()
    }

    /// The `j`-th dense layer.
    pub fn dense(&self, j: usize) -> &DenseLayer {
        match &self.layers[self.dense_indices()[j]] {
            Layer::Dense(d) => d,
            _ => unreachable!(),
        }
    }

    pub fn dense_mut(&mut self, j: usize) -> &mut DenseLayer {
        let at = self.dense_indices()[j];
        match &mut self.layers[at] {
            Layer::Dense(d) => d,
            _ => unreachable!(),
        }
    }

    pub fn conv(&self, j: usize) -> &ConvLayer {
        match &self.layers[self.conv_indices()[j]] {
            Layer::Conv(c) => c,
            _ => unreachable!(),
        }
    }

    pub fn conv_mut(&mut self, j: usize) -> &mut ConvLayer {
        let at = self.conv_indices()[j];
        match &mut self.layers[at] {
            Layer::Conv(c) => c,
            _ => unreachable!(),
        }
    }

    /// `(m, n)` of every dense layer.
    pub fn dense_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.dense_indices().len())
            .map(|j| self.dense(j).weights.shape())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Inverted-dropout multipliers, per dropout layer in train mode.
    masks: Vec<Option<Vec<f64>>>,
    /// Flat input index of each pooled maximum.
    argmax: Vec<Option<Vec<usize>>>,
    logits: Matrix,
    /// Multiply-add FLOPs of the dense and convolution products.
    pub flops: u64,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

/// Runs a batch (one sample per row) through the network. Dropout masks in
/// train mode are drawn from `seed`; eval mode ignores it.
pub fn forward(net: &Network, inputs: &Matrix, mode: Mode, seed: u64) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != net.input.len() {
        return Err(Error::shape("forward", inputs.shape(), (inputs.rows(), net.input.len())));
    }
    let chain = net.feature_chain()?;
    let batch = inputs.rows();
    let count = net.layers.len();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(count),
        masks: vec![None; count],
        argmax: vec![None; count],
        logits: Matrix::zeros(0, 0),
        flops: 0,
    };
    let mut act = inputs.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        let next = match layer {
            Layer::Dense(d) => {
                let mut y = act.matmul_nt_counted(&d.weights, &mut cache.flops)?;
                for i in 0..batch {
                    for (v, b) in y.row_mut(i).iter_mut().zip(&d.bias) {
                        *v += b;
                    }
                }
                y
            }
            Layer::Conv(c) => {
                let (Features::Image(input), Features::Image(output)) = (chain[l], chain[l + 1]) else {
                    unreachable!("validated by feature_chain")
                };
                conv_forward(c, &act, input, output, &mut cache.flops)
            }
            Layer::MaxPool2 => {
                let Features::Image(shape) = chain[l] else {
                    unreachable!("validated by feature_chain")
                };
                let (out, idx) = pool_forward(&act, shape);
                cache.argmax[l] = Some(idx);
                out
            }
            Layer::Relu => {
                let mut y = act.clone();
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            Layer::Dropout => {
                if mode == Mode::Train && net.dropout_fraction > 0.0 {
                    let p = net.dropout_fraction;
                    let keep = 1.0 / (1.0 - p);
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, l as u64));
                    let mask: Vec<f64> = (0..act.len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let mut y = act.clone();
                    y.as_mut_slice().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    cache.masks[l] = Some(mask);
                    y
                } else {
                    act.clone()
                }
            }
        };
        cache.inputs.push(std::mem::replace(&mut act, next));
    }
    if !act.is_finite() {
        return Err(Error::NonFinite {
            context: "forward pass logits".into(),
        });
    }
    cache.logits = act.clone();
    Ok((act, cache))
}

fn conv_forward(c: &ConvLayer, act: &Matrix, input: ImageShape, output: ImageShape, flops: &mut u64) -> Matrix {
    let per_sample: Vec<(Vec<f64>, u64)> = (0..act.rows())
        .into_par_iter()
        .map(|i| {
            let mut f = 0;
            let cols = c.im2col(act.row(i), input, output);
            let mut y = c.kernels.matmul_counted(&cols, &mut f).expect("patch rows match kernel width");
            let positions = output.height * output.width;
            for (o, b) in c.bias.iter().enumerate() {
                y.as_mut_slice()[o * positions..(o + 1) * positions]
                    .iter_mut()
                    .for_each(|v| *v += b);
            }
            (y.into_vec(), f)
        })
        .collect();
    let mut data = Vec::with_capacity(act.rows() * output.len());
    for (y, f) in per_sample {
        data.extend_from_slice(&y);
        *flops += f;
    }
    Matrix::from_vec(act.rows(), output.len(), data).expect("conv output length")
}

fn pool_forward(act: &Matrix, s: ImageShape) -> (Matrix, Vec<usize>) {
    let (oh, ow) = (s.height / 2, s.width / 2);
    let out_len = s.channels * oh * ow;
    let mut out = Matrix::zeros(act.rows(), out_len);
    let mut idx = vec![0; act.rows() * out_len];
    for i in 0..act.rows() {
        let row = act.row(i);
        for c in 0..s.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let o = (c * oh + y) * ow + x;
                    let mut best = (c * s.height + 2 * y) * s.width + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = (c * s.height + 2 * y + dy) * s.width + 2 * x + dx;
                        if row[at] > row[best] {
                            best = at;
                        }
                    }
                    out[(i, o)] = row[best];
                    idx[i * out_len + o] = best;
                }
            }
        }
    }
    (out, idx)
}

/// Stacked per-sample activations and errors of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTape {
    /// `B x n`, the layer's input for each sample.
    pub x: Matrix,
    /// `B x m`, `∂ℓ_i/∂(W x_i + b)` for each sample (not divided by `B`).
    pub delta: Matrix,
}

impl DenseTape {
    pub fn batch_size(&self) -> usize {
        self.x.rows()
    }

    /// `(1/B) Σ δ_i x_iᵀ`
    pub fn mean_gradient(&self) -> Matrix {
        self.mean_gradient_counted(&mut 0)
    }

    pub fn mean_gradient_counted(&self, flops: &mut u64) -> Matrix {
        let mut g = self.delta.matmul_tn_counted(&self.x, flops).expect("tape rows agree");
        g.scale_in_place(1.0 / self.batch_size() as f64);
        g
    }

    /// `(1/B) Σ δ_i`
    pub fn bias_gradient(&self) -> Vec<f64> {
        let b = self.batch_size() as f64;
        let mut g = vec![0.0; self.delta.cols()];
        for i in 0..self.delta.rows() {
            for (acc, v) in g.iter_mut().zip(self.delta.row(i)) {
                *acc += v;
            }
        }
        g.iter_mut().for_each(|v| *v /= b);
        g
    }
}

/// Mean gradient of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradient {
    pub kernels: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Backward {
    /// One tape per dense layer, in forward order.
    pub tapes: Vec<DenseTape>,
    /// One gradient per convolution layer, in forward order.
    pub conv: Vec<ConvGradient>,
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Products propagating errors to earlier layers.
    pub backprop_flops: u64,
    /// Products forming the kernel gradients.
    pub conv_flops: u64,
}

/// Mean softmax cross-entropy and the per-sample logit errors
/// `softmax(z_i) − onehot(y_i)`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    let classes = logits.cols();
    let mut delta = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        total += max + sum.ln() - z[label];
        for (d, v) in delta.row_mut(i).iter_mut().zip(z) {
            *d = (v - max).exp() / sum;
        }
        delta[(i, label)] -= 1.0;
    }
    Ok((total / logits.rows().max(1) as f64, delta))
}

pub fn backward(net: &Network, cache: &ForwardCache, labels: &[usize]) -> Result<Backward> {
    if cache.inputs.len() != net.layers.len() {
        return Err(Error::Config("forward cache does not belong to this network".into()));
    }
    let chain = net.feature_chain()?;
    let (loss, mut grad) = softmax_cross_entropy(&cache.logits, labels)?;
    let batch = grad.rows();
    let mut tapes = Vec::new();
    let mut conv = Vec::new();
    let mut backprop_flops = 0;
    let mut conv_flops = 0;
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let input = &cache.inputs[l];
        let needs_input_grad = l > 0;
        match layer {
            Layer::Dense(d) => {
                tapes.push(DenseTape {
                    x: input.clone(),
                    delta: grad.clone(),
                });
                if needs_input_grad {
                    grad = grad.matmul_counted(&d.weights, &mut backprop_flops)?;
                }
            }
            Layer::Relu => {
                for (g, &x) in grad.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Layer::Dropout => {
                if let Some(mask) = &cache.masks[l] {
                    grad.as_mut_slice().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                }
            }
            Layer::MaxPool2 => {
                let idx = cache.argmax[l].as_ref().expect("pool indices cached");
                let out_len = grad.cols();
                let mut up = Matrix::zeros(batch, input.cols());
                for i in 0..batch {
                    for o in 0..out_len {
                        up[(i, idx[i * out_len + o])] += grad[(i, o)];
                    }
                }
                grad = up;
            }
            Layer::Conv(c) => {
                let (Features::Image(in_shape), Features::Image(out_shape)) = (chain[l], chain[l + 1]) else {
                    unreachable!("validated by feature_chain")
                };
                let (g, input_grad, fb, fc) = conv_backward(c, input, &grad, in_shape, out_shape, needs_input_grad);
                conv.push(g);
                backprop_flops += fb;
                conv_flops += fc;
                if let Some(next) = input_grad {
                    grad = next;
                }
            }
        }
    }
    tapes.reverse();
    conv.reverse();
    Ok(Backward {
        tapes,
        conv,
        loss,
        backprop_flops,
        conv_flops,
    })
}

type ConvBackward = (ConvGradient, Option<Matrix>, u64, u64);

fn conv_backward(
    c: &ConvLayer,
    input: &Matrix,
    grad: &Matrix,
    in_shape: ImageShape,
    out_shape: ImageShape,
    needs_input_grad: bool,
) -> ConvBackward {
    let positions = out_shape.height * out_shape.width;
    let batch = input.rows();
    let per_sample: Vec<(Matrix, Vec<f64>, Option<Vec<f64>>, u64, u64)> = (0..batch)
        .into_par_iter()
        .map(|i| {
            let (mut fb, mut fc) = (0, 0);
            let cols = c.im2col(input.row(i), in_shape, out_shape);
            let d_out = Matrix::from_vec(c.out_channels(), positions, grad.row(i).to_vec()).expect("conv grad shape");
            let dk = d_out.matmul_nt_counted(&cols, &mut fc).expect("patch shapes");
            let db = (0..c.out_channels())
                .map(|o| d_out.row(o).iter().sum())
                .collect();
            let dx = needs_input_grad.then(|| {
                let d_cols = c.kernels.matmul_tn_counted(&d_out, &mut fb).expect("kernel shapes");
                let mut image = vec![0.0; in_shape.len()];
                c.col2im(&d_cols, in_shape, out_shape, &mut image);
                image
            });
            (dk, db, dx, fb, fc)
        })
        .collect();

    let mut kernels = Matrix::zeros(c.kernels.rows(), c.kernels.cols());
    let mut bias = vec![0.0; c.bias.len()];
    let mut input_grad = needs_input_grad.then(|| Matrix::zeros(batch, in_shape.len()));
    let (mut fb, mut fc) = (0, 0);
    for (i, (dk, db, dx, b, k)) in per_sample.into_iter().enumerate() {
        kernels.axpy(1.0, &dk).expect("kernel gradient shape");
        bias.iter_mut().zip(&db).for_each(|(a, v)| *a += v);
        if let (Some(g), Some(dx)) = (input_grad.as_mut(), dx) {
            g.row_mut(i).copy_from_slice(&dx);
        }
        fb += b;
        fc += k;
    }
    let inv = 1.0 / batch as f64;
    kernels.scale_in_place(inv);
    bias.iter_mut().for_each(|v| *v *= inv);
    (ConvGradient { kernels, bias }, input_grad, fb, fc)
}

/// `W ← W − α G`, `b ← b − α g_b`.
pub fn apply_dense_update(layer: &DenseLayer, grad: &Matrix, bias_grad: &[f64], alpha: f64) -> Result<DenseLayer> {
    if grad.shape() != layer.weights.shape() || bias_grad.len() != layer.bias.len() {
        return Err(Error::shape("apply_dense_update", layer.weights.shape(), grad.shape()));
    }
    let mut weights = layer.weights.clone();
    weights.axpy(-alpha, grad)?;
    let bias = layer.bias.iter().zip(bias_grad).map(|(b, g)| b - alpha * g).collect();
    DenseLayer::new(weights, bias)
}

pub fn apply_conv_update(layer: &ConvLayer, grad: &ConvGradient, alpha: f64) -> Result<ConvLayer> {
    if grad.kernels.shape() != layer.kernels.shape() || grad.bias.len() != layer.bias.len() {
        return Err(Error::shape("apply_conv_update", layer.kernels.shape(), grad.kernels.shape()));
    }
    let mut next = layer.clone();
    next.kernels.axpy(-alpha, &grad.kernels)?;
    next.bias.iter_mut().zip(&grad.bias).for_each(|(b, g)| *b -= alpha * g);
    if !next.kernels.is_finite() || next.bias.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite {
            context: "convolution update".into(),
        });
    }
    Ok(next)
}

/// Loss and accuracy of a batch in eval mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Sum (not mean) of per-sample cross-entropy.
    pub loss_sum: f64,
    pub correct: usize,
    pub samples: usize,
    pub flops: u64,
}

pub fn evaluate(net: &Network, inputs: &Matrix, labels: &[usize]) -> Result<Evaluation> {
    let (logits, cache) = forward(net, inputs, Mode::Eval, 0)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    Ok(Evaluation {
        loss_sum: loss * labels.len() as f64,
        correct,
        samples: labels.len(),
        flops: cache.flops,
    })
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
