//! Mini-batch gradient descent and streaming low-rank training loops, the
//! epochs-to-converge measure and the closed-form cost model.
//!
//! Both loops share the forward and backward pass. MBGD forms the mean
//! gradient `(1/B) Σ δ_i x_iᵀ` of every dense layer explicitly. The
//! streaming variants split each layer's stacked `(x_i, δ_i)` rows into
//! blocks, advance that layer's [`LowRankState`], and step the weights with
//! `-α_fc · Δ̂ diag(σ) X̂ᵀ`. Convolution layers and all biases are always
//! stepped with their full mean gradient.

mod cost;
mod metrics;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{batch_indices, mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{apply_conv_update, apply_dense_update, backward, evaluate, forward, Mode, Network};
use crate::sbpca::{
    doubling_block_sizes, init_state, recompose, recompose_counted, split_blocks, update, LowRankState, SbpcaConfig,
    UpdateTrace, Variant, DEFAULT_SIGMA_FLOOR,
};

pub use cost::{cost_model, cost_model_for_blocks, CostLedger, CostModel, Ratios};
pub use metrics::{
    epochs_to_converge, epochs_to_converge_with, metrics_csv, parse_metrics_csv, MetricsRow, ETC_TOLERANCE, ETC_WINDOW,
};

/// Rows per forward pass when evaluating or forming full-dataset gradients.
pub const EVAL_CHUNK: usize = 1000;

const DROPOUT_TAG: u64 = 0xd40f;
const STATE_TAG: u64 = 0x5b9c_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Mbgd,
    Sbpca,
    Sbpcav,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mbgd => "MBGD",
            Method::Sbpca => "SBPCA",
            Method::Sbpcav => "SBPCAV",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Mbgd => None,
            Method::Sbpca => Some(Variant::Sbpca),
            Method::Sbpcav => Some(Variant::Sbpcav),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MBGD" => Ok(Method::Mbgd),
            "SBPCA" => Ok(Method::Sbpca),
            "SBPCAV" => Ok(Method::Sbpcav),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected MBGD, SBPCA or SBPCAV)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Nominal batch size `B`. SBPCA needs a power of two; SBPCAV consumes
    /// `B - 1` rows when `B` is a power of two and `B` rows when `B + 1` is.
    pub batch_size: usize,
    /// Rows per block; `B/4` when unset.
    pub block_size: Option<usize>,
    /// Rank `k`. Zero freezes the dense layers in the streaming variants.
    pub rank: usize,
    pub alpha_fc: f64,
    pub alpha_conv: f64,
    pub epochs: usize,
    pub method: Method,
    pub dropout: bool,
    pub seed: u64,
    /// Full-dataset tracking error every this many epochs (and on the final
    /// epoch); zero disables it.
    pub tracking_every: usize,
    pub sigma_floor: f64,
    /// Measure panel orthonormality after every block.
    pub check_orthonormality: bool,
    /// Record elapsed time in metrics; otherwise `wall_seconds` is zero so
    /// reruns produce identical files.
    pub wall_clock: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 128,
            block_size: None,
            rank: 10,
            alpha_fc: 0.01,
            alpha_conv: 0.01,
            epochs: 30,
            method: Method::Mbgd,
            dropout: false,
            seed: 0,
            tracking_every: 5,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            check_orthonormality: false,
            wall_clock: true,
        }
    }
}

impl Hyperparams {
    pub fn block_size(&self) -> usize {
        self.block_size.unwrap_or((self.batch_size / 4).max(1))
    }

    /// Rows consumed from the dataset per batch.
    pub fn samples_per_batch(&self) -> usize {
        match self.method {
            Method::Sbpcav if self.batch_size.is_power_of_two() => self.batch_size - 1,
            _ => self.batch_size,
        }
    }

    /// Row counts of the blocks a batch is split into.
    pub fn block_sizes(&self) -> Result<Vec<usize>> {
        match self.method {
            Method::Mbgd => Ok(vec![self.batch_size]),
            Method::Sbpca => Ok(vec![self.block_size(); self.batch_size / self.block_size()]),
            Method::Sbpcav => doubling_block_sizes(self.samples_per_batch()),
        }
    }

    fn sbpca_config(&self, layer: usize) -> Option<SbpcaConfig> {
        let variant = self.method.variant()?;
        Some(SbpcaConfig {
            rank: self.rank,
            block_size: self.block_size(),
            variant,
            sigma_floor: self.sigma_floor,
            seed: mix_seed(self.seed, STATE_TAG + layer as u64),
        })
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let config = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return config("batch size must be at least 1".into());
        }
        if !(self.alpha_fc.is_finite() && self.alpha_conv.is_finite()) {
            return config("learning rates must be finite".into());
        }
        match self.method {
            Method::Mbgd => {}
            Method::Sbpca => {
                if !self.batch_size.is_power_of_two() {
                    return config(format!("SBPCA needs a power-of-two batch size, got {}", self.batch_size));
                }
                let b = self.block_size();
                if b == 0 || !self.batch_size.is_multiple_of(b) {
                    return config(format!("block size {b} does not divide batch size {}", self.batch_size));
                }
            }
            Method::Sbpcav => {
                if self.batch_size < 2 || !(self.samples_per_batch() + 1).is_power_of_two() {
                    return config(format!(
                        "SBPCAV needs a batch size of 2^L or 2^L - 1, got {}",
                        self.batch_size
                    ));
                }
            }
        }
        if self.method != Method::Mbgd && self.rank > 0 {
            if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
                return config("sigma_floor must be positive and finite".into());
            }
            for (j, (m, n)) in net.dense_shapes().into_iter().enumerate() {
                if self.rank > m.min(n) {
                    return config(format!(
                        "rank {} exceeds min(m, n) = {} of dense layer fc{} ({m}x{n})",
                        self.rank,
                        m.min(n),
                        j + 1
                    ));
                }
            }
        }
        Ok(())
    }

    /// Modelled auxiliary memory: the stacked batch for MBGD; all states
    /// plus the largest single-layer update buffers and QR workspace for
    /// the streaming variants.
    pub fn peak_aux_floats(&self, net: &Network) -> u64 {
        let shapes = net.dense_shapes();
        let b = self.samples_per_batch() as u64;
        match self.method {
            Method::Mbgd => shapes.iter().map(|&(m, n)| b * (m + n) as u64).sum(),
            _ if self.rank == 0 => 0,
            _ => {
                let k = self.rank as u64;
                let state: u64 = shapes.iter().map(|&(m, n)| k * (m + n + 1) as u64).sum();
                let work = shapes
                    .iter()
                    .map(|&(m, n)| k * (m + n) as u64 + k * k + m.max(n) as u64 * (k + 1))
                    .max()
                    .unwrap_or(0);
                state + work
            }
        }
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub metrics: Vec<MetricsRow>,
    pub ledger: CostLedger,
    /// Final per-layer states (streaming variants with `k > 0`).
    pub states: Vec<LowRankState>,
    /// Update counters summed over layers and batches.
    pub trace: UpdateTrace,
}

pub fn train_mbgd(net: &Network, train_set: &Dataset, test_set: &Dataset, hp: &Hyperparams) -> Result<TrainOutcome> {
    if hp.method != Method::Mbgd {
        return Err(Error::Config(format!("train_mbgd called with variant {}", hp.method)));
    }
    train(net, train_set, test_set, hp)
}

pub fn train_sbpca(net: &Network, train_set: &Dataset, test_set: &Dataset, hp: &Hyperparams) -> Result<TrainOutcome> {
    if hp.method == Method::Mbgd {
        return Err(Error::Config("train_sbpca called with variant MBGD".into()));
    }
    train(net, train_set, test_set, hp)
}

fn absorb(total: &mut UpdateTrace, t: &UpdateTrace) {
    total.stream_flops += t.stream_flops;
    total.sigma_flops += t.sigma_flops;
    total.qr_flops += t.qr_flops;
    total.other_flops += t.other_flops;
    total.blocks += t.blocks;
    total.sigma_sign_flips += t.sigma_sign_flips;
    total.degenerate_qr += t.degenerate_qr;
    total.update_floats = total.update_floats.max(t.update_floats);
    total.qr_workspace_floats = total.qr_workspace_floats.max(t.qr_workspace_floats);
    total.max_orthonormality_error = total.max_orthonormality_error.max(t.max_orthonormality_error);
    total.orthonormality_violations += t.orthonormality_violations;
}

/// Runs the configured method for `hp.epochs` epochs.
pub fn train(net: &Network, train_set: &Dataset, test_set: &Dataset, hp: &Hyperparams) -> Result<TrainOutcome> {
    hp.validate(net)?;
    check_dataset(net, train_set, "training")?;
    check_dataset(net, test_set, "test")?;
    let per_batch = hp.samples_per_batch();
    if hp.epochs > 0 && per_batch > train_set.len() {
        return Err(Error::Data(format!(
            "{} training samples cannot fill a batch of {per_batch}",
            train_set.len()
        )));
    }

    let mut net = net.clone();
    let shapes = net.dense_shapes();
    let streaming = hp.method != Method::Mbgd;
    let low_rank = streaming && hp.rank > 0;
    let sizes = hp.block_sizes()?;
    let mut states = Vec::new();
    if low_rank {
        for (j, &(m, n)) in shapes.iter().enumerate() {
            states.push(init_state(m, n, &hp.sbpca_config(j).expect("streaming method"))?);
        }
    }
    let mut ledger = CostLedger {
        peak_aux_floats: hp.peak_aux_floats(&net),
        ..CostLedger::default()
    };
    let mut total_trace = UpdateTrace::default();
    let mut last_gradients: Vec<Option<Matrix>> = vec![None; shapes.len()];
    let mut metrics = Vec::with_capacity(hp.epochs);
    let start = Instant::now();

    for epoch in 1..=hp.epochs {
        let batches = batch_indices(train_set.len(), per_batch, hp.seed, epoch);
        let mut loss_sum = 0.0;
        for (bi, indices) in batches.iter().enumerate() {
            let (x, labels) = train_set.select(indices);
            let dropout_seed = mix_seed(hp.seed ^ DROPOUT_TAG, ((epoch as u64) << 32) | bi as u64);
            let (_, cache) = forward(&net, &x, Mode::Train, dropout_seed)?;
            ledger.forward += cache.flops;
            let grads = backward(&net, &cache, &labels)?;
            ledger.backward += grads.backprop_flops;
            ledger.conv += grads.conv_flops;
            if !grads.loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {}", bi + 1),
                });
            }
            loss_sum += grads.loss;

            match hp.method {
                Method::Mbgd => {
                    for (j, tape) in grads.tapes.iter().enumerate() {
                        let g = tape.mean_gradient_counted(&mut ledger.gradient);
                        let next = apply_dense_update(net.dense(j), &g, &tape.bias_gradient(), hp.alpha_fc)?;
                        *net.dense_mut(j) = next;
                        ledger.update += 2 * (g.len() + g.rows()) as u64;
                        if hp.tracking_every > 0 {
                            last_gradients[j] = Some(g);
                        }
                    }
                }
                _ if !low_rank => {}
                _ => {
                    let updated: Vec<(LowRankState, Matrix, UpdateTrace, u64)> = grads
                        .tapes
                        .par_iter()
                        .enumerate()
                        .map(|(j, tape)| {
                            let cfg = hp.sbpca_config(j).expect("streaming method");
                            let blocks = split_blocks(&tape.x, &tape.delta, &sizes)?;
                            let mut trace = UpdateTrace {
                                check_orthonormality: hp.check_orthonormality,
                                ..UpdateTrace::default()
                            };
                            let state = update(&states[j], &blocks, &cfg, &mut trace)?;
                            let mut flops = 0;
                            let g = recompose_counted(&state, &mut flops);
                            Ok((state, g, trace, flops))
                        })
                        .collect::<Result<_>>()?;
                    for (j, (state, g, trace, flops)) in updated.into_iter().enumerate() {
                        ledger.stream += trace.stream_flops;
                        ledger.sigma += trace.sigma_flops;
                        ledger.qr += trace.qr_flops;
                        ledger.sbpca_other += trace.other_flops;
                        ledger.recompose += flops;
                        absorb(&mut total_trace, &trace);
                        let bias = grads.tapes[j].bias_gradient();
                        *net.dense_mut(j) = apply_dense_update(net.dense(j), &g, &bias, hp.alpha_fc)?;
                        ledger.update += 2 * (g.len() + g.rows()) as u64;
                        states[j] = state;
                    }
                }
            }
            for (j, g) in grads.conv.iter().enumerate() {
                *net.conv_mut(j) = apply_conv_update(net.conv(j), g, hp.alpha_conv)?;
                ledger.update += 2 * (g.kernels.len() + g.bias.len()) as u64;
            }
        }

        let (test_loss, test_accuracy) = evaluate_dataset(&net, test_set, &mut ledger.eval)?;
        let instrument = hp.tracking_every > 0 && (epoch % hp.tracking_every == 0 || epoch == hp.epochs);
        let tracking_error = if instrument {
            let full = full_gradients(&net, train_set, &mut ledger.tracking)?;
            full.iter()
                .enumerate()
                .map(|(j, g)| {
                    let approx = if low_rank {
                        Some(recompose(&states[j]))
                    } else {
                        last_gradients[j].clone()
                    };
                    let err = match approx {
                        Some(a) => g.sub(&a)?.frobenius_norm(),
                        None => g.frobenius_norm(),
                    };
                    Ok(Some(err))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; shapes.len()]
        };
        metrics.push(MetricsRow {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            test_loss,
            test_accuracy,
            tracking_error,
            wall_seconds: if hp.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutcome {
        net,
        metrics,
        ledger,
        states,
        trace: total_trace,
    })
}

fn check_dataset(net: &Network, data: &Dataset, role: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data(format!("{role} dataset is empty")));
    }
    if data.images.cols() != net.input.len() {
        return Err(Error::Data(format!(
            "{role} samples have {} values, the network expects {}",
            data.images.cols(),
            net.input.len()
        )));
    }
    if data.class_count > net.class_count() {
        return Err(Error::Data(format!(
            "{role} dataset has {} classes, the network outputs {}",
            data.class_count,
            net.class_count()
        )));
    }
    Ok(())
}

/// Mean loss and accuracy over a dataset in eval mode.
pub fn evaluate_dataset(net: &Network, data: &Dataset, flops: &mut u64) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0);
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let e = evaluate(net, &data.images.row_block(start, end), &data.labels[start..end])?;
        loss += e.loss_sum;
        correct += e.correct;
        *flops += e.flops;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean dense-layer gradients over the whole dataset (eval mode, no
/// dropout).
pub fn full_gradients(net: &Network, data: &Dataset, flops: &mut u64) -> Result<Vec<Matrix>> {
    let mut sums: Vec<Matrix> = net
        .dense_shapes()
        .into_iter()
        .map(|(m, n)| Matrix::zeros(m, n))
        .collect();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (_, cache) = forward(net, &data.images.row_block(start, end), Mode::Eval, 0)?;
        let grads = backward(net, &cache, &data.labels[start..end])?;
        *flops += cache.flops + grads.backprop_flops + grads.conv_flops;
        for (sum, tape) in sums.iter_mut().zip(&grads.tapes) {
            let g = tape.delta.matmul_tn_counted(&tape.x, flops)?;
            sum.axpy(1.0, &g)?;
        }
    }
    let inv = 1.0 / data.len().max(1) as f64;
    sums.iter_mut().for_each(|g| g.scale_in_place(inv));
    Ok(sums)
}
