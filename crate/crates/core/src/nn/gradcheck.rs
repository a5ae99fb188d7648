//! Central finite-difference check of the backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, softmax_cross_entropy, Layer, Mode, Network};
use crate::error::Result;
use crate::linalg::Matrix;

pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_RELATIVE: f64 = 1e-4;
pub const GRADCHECK_ABSOLUTE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|fd − analytic| / max(|fd|, |analytic|)` among entries above
    /// the absolute floor.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

#[derive(Clone, Copy)]
enum Tensor {
    DenseWeights(usize),
    DenseBias(usize),
    ConvKernels(usize),
    ConvBias(usize),
}

fn tensor_len(net: &Network, t: Tensor) -> usize {
    match (t, &net.layers[index(t)]) {
        (Tensor::DenseWeights(_), Layer::Dense(d)) => d.weights.len(),
        (Tensor::DenseBias(_), Layer::Dense(d)) => d.bias.len(),
        (Tensor::ConvKernels(_), Layer::Conv(c)) => c.kernels.len(),
        (Tensor::ConvBias(_), Layer::Conv(c)) => c.bias.len(),
        _ => unreachable!(),
    }
}

fn index(t: Tensor) -> usize {
    match t {
        Tensor::DenseWeights(l) | Tensor::DenseBias(l) | Tensor::ConvKernels(l) | Tensor::ConvBias(l) => l,
    }
}

fn entry(net: &mut Network, t: Tensor, k: usize) -> &mut f64 {
    match (t, &mut net.layers[index(t)]) {
        (Tensor::DenseWeights(_), Layer::Dense(d)) => &mut d.weights.as_mut_slice()[k],
        (Tensor::DenseBias(_), Layer::Dense(d)) => &mut d.bias[k],
        (Tensor::ConvKernels(_), Layer::Conv(c)) => &mut c.kernels.as_mut_slice()[k],
        (Tensor::ConvBias(_), Layer::Conv(c)) => &mut c.bias[k],
        _ => unreachable!(),
    }
}

fn loss(net: &Network, inputs: &Matrix, labels: &[usize], seed: u64) -> Result<f64> {
    let (logits, _) = forward(net, inputs, Mode::Train, seed)?;
    Ok(softmax_cross_entropy(&logits, labels)?.0)
}

/// Compares the backward pass with central differences (step
/// [`GRADCHECK_EPSILON`]) on up to `per_tensor` seeded entries of every
/// parameter tensor. Dense weight gradients are taken from the tapes as
/// `(1/B) Σ δ_i x_iᵀ`. Dropout masks are fixed by `seed` so the loss is a
/// deterministic function of the parameters.
pub fn gradient_check(
    net: &Network,
    inputs: &Matrix,
    labels: &[usize],
    seed: u64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let (_, cache) = forward(net, inputs, Mode::Train, seed)?;
    let grads = backward(net, &cache, labels)?;
    let mut tensors = Vec::new();
    let (mut dense_j, mut conv_j) = (0, 0);
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Dense(_) => {
                let tape = &grads.tapes[dense_j];
                tensors.push(Tensor::DenseWeights(l));
                analytic.push(tape.mean_gradient().into_vec());
                tensors.push(Tensor::DenseBias(l));
                analytic.push(tape.bias_gradient());
                dense_j += 1;
            }
            Layer::Conv(_) => {
                let g = &grads.conv[conv_j];
                tensors.push(Tensor::ConvKernels(l));
                analytic.push(g.kernels.as_slice().to_vec());
                tensors.push(Tensor::ConvBias(l));
                analytic.push(g.bias.clone());
                conv_j += 1;
            }
            _ => {}
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    let mut probe = net.clone();
    for (t, grad) in tensors.into_iter().zip(analytic) {
        let len = tensor_len(net, t);
        let mut picks = sample(&mut rng, len, per_tensor.min(len)).into_vec();
        picks.sort_unstable();
        for k in picks {
            let original = *entry(&mut probe, t, k);
            *entry(&mut probe, t, k) = original + GRADCHECK_EPSILON;
            let up = loss(&probe, inputs, labels, seed)?;
            *entry(&mut probe, t, k) = original - GRADCHECK_EPSILON;
            let down = loss(&probe, inputs, labels, seed)?;
            *entry(&mut probe, t, k) = original;

            let fd = (up - down) / (2.0 * GRADCHECK_EPSILON);
            let diff = (fd - grad[k]).abs();
            let scale = fd.abs().max(grad[k].abs());
            report.checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(diff);
            if diff > GRADCHECK_ABSOLUTE {
                report.max_relative_error = report.max_relative_error.max(diff / scale);
                if diff > GRADCHECK_RELATIVE * scale {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}
