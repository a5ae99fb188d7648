//! Streaming batch PCA: a rank-`k` running estimate `Δ̂ · diag(σ) · X̂ᵀ` of
//! the mean outer product `(1/B) Σ δ_i x_iᵀ`, maintained with stochastic
//! bi-iteration over blocks of (activation, error) rows.
//!
//! Two schedules are provided. [`sbpca_update`] uses a fixed block size `b`
//! and mixing weight `c = 1/(i+1)` for the 1-based block index `i`, the
//! same sequence as `c = 1/(i+1)` with a 0-based index starting at the
//! prior. [`sbpcav_update`] uses `c = 1/2` with blocks of 1, 2, 4, … rows,
//! which weights every sample of a `2^L - 1` batch equally.
//!
//! Column order is never re-sorted: rank `j` keeps its identity across
//! blocks and batches. σ is kept non-negative; when an update drives `σ_j`
//! below zero the sign is carried by column `j` of Δ̂ instead, which leaves
//! both the recomposed gradient and all later iterates unchanged.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{qr_counted, qr_workspace_floats, Matrix};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Fixed block size, `c = 1/(i+1)`.
    Sbpca,
    /// Doubling block sizes, `c = 1/2`.
    Sbpcav,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbpcaConfig {
    pub rank: usize,
    pub block_size: usize,
    pub variant: Variant,
    /// Lower bound applied to each σ before it is inverted.
    pub sigma_floor: f64,
    pub seed: u64,
}

impl SbpcaConfig {
    pub fn new(rank: usize, block_size: usize, variant: Variant, seed: u64) -> Self {
        SbpcaConfig {
            rank,
            block_size,
            variant,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::Config("sigma_floor must be positive and finite".into()));
        }
        Ok(())
    }

    /// Checks that a batch of `batch_size` rows can be split under this
    /// schedule.
    pub fn validate_batch(&self, batch_size: usize) -> Result<()> {
        match self.variant {
            Variant::Sbpca if !batch_size.is_multiple_of(self.block_size) => Err(Error::Config(format!(
                "batch size {batch_size} is not divisible by block size {}",
                self.block_size
            ))),
            Variant::Sbpcav if !(batch_size + 1).is_power_of_two() || batch_size == 0 => {
                Err(Error::Config(format!(
                    "variable-block batches need 2^L - 1 rows, got {batch_size}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Rank-`k` factored gradient estimate for one `m x n` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    /// `n x k`, right singular vectors (singular activations).
    pub x_hat: Matrix,
    /// `m x k`, left singular vectors (singular backpropagated errors).
    pub delta_hat: Matrix,
    pub sigma: Vec<f64>,
}

impl LowRankState {
    /// Assembles a state from parts, checking that the shapes agree.
    pub fn from_parts(x_hat: Matrix, delta_hat: Matrix, sigma: Vec<f64>) -> Result<Self> {
        let k = sigma.len();
        if x_hat.cols() != k || delta_hat.cols() != k || k == 0 {
            return Err(Error::shape("LowRankState", x_hat.shape(), delta_hat.shape()));
        }
        Ok(LowRankState {
            x_hat,
            delta_hat,
            sigma,
        })
    }

    /// Output dimension `m`.
    pub fn m(&self) -> usize {
        self.delta_hat.rows()
    }

    /// Input dimension `n`.
    pub fn n(&self) -> usize {
        self.x_hat.rows()
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Scalars held by the state, `k(m + n + 1)`.
    pub fn storage_len(&self) -> usize {
        self.x_hat.len() + self.delta_hat.len() + self.sigma.len()
    }

    /// Worst orthonormality defect over both panels.
    pub fn orthonormality_error(&self) -> f64 {
        self.x_hat
            .orthonormality_error()
            .max(self.delta_hat.orthonormality_error())
    }

    /// `(σ_j, column j)` pairs sorted by descending σ, for reports only.
    pub fn ranked_sigma(&self) -> Vec<(f64, usize)> {
        let mut ranked: Vec<(f64, usize)> = self.sigma.iter().copied().zip(0..).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked
    }
}

/// `b` stacked rows of input activations and backpropagated errors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSample {
    /// `b x n`
    pub x_block: Matrix,
    /// `b x m`
    pub delta_block: Matrix,
}

impl BlockSample {
    pub fn new(x_block: Matrix, delta_block: Matrix) -> Result<Self> {
        if x_block.rows() != delta_block.rows() {
            return Err(Error::shape("BlockSample", x_block.shape(), delta_block.shape()));
        }
        Ok(BlockSample {
            x_block,
            delta_block,
        })
    }

    pub fn rows(&self) -> usize {
        self.x_block.rows()
    }
}

/// Splits stacked rows into consecutive blocks of the given sizes.
pub fn split_blocks(x: &Matrix, delta: &Matrix, sizes: &[usize]) -> Result<Vec<BlockSample>> {
    if x.rows() != delta.rows() || sizes.iter().sum::<usize>() != x.rows() {
        return Err(Error::shape("split_blocks", x.shape(), delta.shape()));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&size| {
            let block = BlockSample::new(x.row_block(start, start + size), delta.row_block(start, start + size));
            start += size;
            block
        })
        .collect()
}

/// Block sizes `1, 2, 4, …` for a `2^L - 1` row batch.
pub fn doubling_block_sizes(batch_rows: usize) -> Result<Vec<usize>> {
    if batch_rows == 0 || !(batch_rows + 1).is_power_of_two() {
        return Err(Error::Config(format!(
            "variable-block batches need 2^L - 1 rows, got {batch_rows}"
        )));
    }
    let levels = (batch_rows + 1).trailing_zeros();
    Ok((0..levels).map(|i| 1usize << i).collect())
}

/// Random orthonormal panels with `σ = 1`, seeded.
pub fn init_state(m: usize, n: usize, cfg: &SbpcaConfig) -> Result<LowRankState> {
    cfg.validate()?;
    let k = cfg.rank;
    if k > m.min(n) {
        return Err(Error::Config(format!(
            "rank {k} exceeds min(m, n) = {} for a {m}x{n} layer",
            m.min(n)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_hat = qr_counted(Matrix::gaussian(n, k, &mut rng), &mut 0)?.q;
    let delta_hat = qr_counted(Matrix::gaussian(m, k, &mut rng), &mut 0)?.q;
    Ok(LowRankState {
        x_hat,
        delta_hat,
        sigma: vec![1.0; k],
    })
}

/// Counters filled in by the update routines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateTrace {
    /// Products that build the singular-vector updates, `4bk(m+n)` per block.
    pub stream_flops: u64,
    /// Inner products refreshing σ.
    pub sigma_flops: u64,
    pub qr_flops: u64,
    /// Scaling and mixing arithmetic not covered above.
    pub other_flops: u64,
    pub blocks: usize,
    /// Times a σ came out negative and its sign was moved onto the
    /// matching column of Δ̂.
    pub sigma_sign_flips: usize,
    pub degenerate_qr: usize,
    /// Floats held by the update buffers, `k(m+n)`.
    pub update_floats: usize,
    /// Largest QR workspace used, `k² + max(m,n)(k+1)`.
    pub qr_workspace_floats: usize,
    /// When set, the orthonormality of both panels is measured after every
    /// block and the worst value kept in `max_orthonormality_error`.
    pub check_orthonormality: bool,
    pub max_orthonormality_error: f64,
    /// Number of block checks that exceeded `1e-8`.
    pub orthonormality_violations: usize,
}

pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;

/// Algorithm-1 update over a batch of equally sized blocks. The input state
/// is left untouched; the returned state is the carry for the next batch.
pub fn sbpca_update(state: &LowRankState, batch: &[BlockSample], cfg: &SbpcaConfig) -> Result<LowRankState> {
    sbpca_update_traced(state, batch, cfg, &mut UpdateTrace::default())
}

pub fn sbpca_update_traced(
    state: &LowRankState,
    batch: &[BlockSample],
    cfg: &SbpcaConfig,
    trace: &mut UpdateTrace,
) -> Result<LowRankState> {
    cfg.validate()?;
    for (i, block) in batch.iter().enumerate() {
        if block.rows() != cfg.block_size {
            return Err(Error::Config(format!(
                "block {i} has {} rows, expected {}",
                block.rows(),
                cfg.block_size
            )));
        }
    }
    let mut next = state.clone();
    for (i, block) in batch.iter().enumerate() {
        let c = 1.0 / (i as f64 + 2.0);
        block_step(&mut next, block, c, i, cfg.sigma_floor, trace)?;
    }
    Ok(next)
}

/// Variable-block update: blocks of `2^0, 2^1, …, 2^(L-1)` rows, `c = 1/2`.
pub fn sbpcav_update(state: &LowRankState, batch: &[BlockSample], cfg: &SbpcaConfig) -> Result<LowRankState> {
    sbpcav_update_traced(state, batch, cfg, &mut UpdateTrace::default())
}

pub fn sbpcav_update_traced(
    state: &LowRankState,
    batch: &[BlockSample],
    cfg: &SbpcaConfig,
    trace: &mut UpdateTrace,
) -> Result<LowRankState> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("variable-block batch has no blocks".into()));
    }
    for (i, block) in batch.iter().enumerate() {
        if block.rows() != 1 << i {
            return Err(Error::Config(format!(
                "block {i} has {} rows, the doubling schedule requires {}",
                block.rows(),
                1usize << i
            )));
        }
    }
    let mut next = state.clone();
    for (i, block) in batch.iter().enumerate() {
        block_step(&mut next, block, 0.5, i, cfg.sigma_floor, trace)?;
    }
    Ok(next)
}

/// Dispatches on `cfg.variant`.
pub fn update(
    state: &LowRankState,
    batch: &[BlockSample],
    cfg: &SbpcaConfig,
    trace: &mut UpdateTrace,
) -> Result<LowRankState> {
    match cfg.variant {
        Variant::Sbpca => sbpca_update_traced(state, batch, cfg, trace),
        Variant::Sbpcav => sbpcav_update_traced(state, batch, cfg, trace),
    }
}

/// One block of stochastic bi-iteration with mixing weight `c`:
///
/// ```text
/// ŷ = δ̂ Δ̂ / b            ẑ = x̂ X̂ / b
/// X̂ ← QR((1-c) X̂ + c x̂ᵀ ŷ Σ̂⁻¹)
/// Δ̂ ← QR((1-c) Δ̂ + c δ̂ᵀ ẑ Σ̂⁻¹)
/// σ ← (1-c) σ + c Σ_rows (δ̂ Δ̂) ⊙ (x̂ X̂) / b
/// ```
fn block_step(
    state: &mut LowRankState,
    block: &BlockSample,
    c: f64,
    index: usize,
    sigma_floor: f64,
    trace: &mut UpdateTrace,
) -> Result<()> {
    let (m, n, k) = (state.m(), state.n(), state.rank());
    let b = block.rows();
    if block.x_block.cols() != n || block.delta_block.cols() != m {
        return Err(Error::shape(
            "sbpca block",
            (block.delta_block.cols(), block.x_block.cols()),
            (m, n),
        ));
    }
    if b == 0 {
        return Err(Error::Config(format!("block {index} is empty")));
    }
    if !block.x_block.is_finite() || !block.delta_block.is_finite() {
        return Err(Error::NonFinite {
            context: format!("sbpca block {index}"),
        });
    }

    let inv_b = 1.0 / b as f64;
    let mut y = block.delta_block.matmul_counted(&state.delta_hat, &mut trace.stream_flops)?;
    y.scale_in_place(inv_b);
    let mut z = block.x_block.matmul_counted(&state.x_hat, &mut trace.stream_flops)?;
    z.scale_in_place(inv_b);
    let inv_sigma: Vec<f64> = state.sigma.iter().map(|&s| 1.0 / s.max(sigma_floor)).collect();

    let mut dx = block.x_block.matmul_tn_counted(&y, &mut trace.stream_flops)?;
    dx.scale_columns(&inv_sigma);
    let mut dd = block.delta_block.matmul_tn_counted(&z, &mut trace.stream_flops)?;
    dd.scale_columns(&inv_sigma);
    trace.other_flops += (2 * b * k + 2 * (m + n) * k) as u64;

    // (1-c) X̂ + c d̂, written into the update buffers
    mix_into(&mut dx, &state.x_hat, c);
    mix_into(&mut dd, &state.delta_hat, c);
    trace.other_flops += (3 * (m + n) * k) as u64;
    trace.update_floats = trace.update_floats.max((m + n) * k);

    let qx = qr_counted(dx, &mut trace.qr_flops)?;
    let qd = qr_counted(dd, &mut trace.qr_flops)?;
    trace.qr_workspace_floats = trace.qr_workspace_floats.max(qr_workspace_floats(m.max(n), k));
    trace.degenerate_qr += usize::from(qx.degenerate) + usize::from(qd.degenerate);
    state.x_hat = qx.q;
    state.delta_hat = qd.q;

    let p = block.delta_block.matmul_counted(&state.delta_hat, &mut trace.sigma_flops)?;
    let q = block.x_block.matmul_counted(&state.x_hat, &mut trace.sigma_flops)?;
    trace.sigma_flops += (2 * b * k) as u64;
    for j in 0..k {
        let mut acc = 0.0;
        for r in 0..b {
            acc += p[(r, j)] * q[(r, j)];
        }
        let updated = (1.0 - c) * state.sigma[j] + c * (acc * inv_b);
        if updated < 0.0 {
            // (Δ̂_j, -σ_j) and (-Δ̂_j, σ_j) recompose to the same gradient and
            // evolve identically, so keep σ non-negative by flipping Δ̂_j.
            trace.sigma_sign_flips += 1;
            for r in 0..m {
                state.delta_hat[(r, j)] = -state.delta_hat[(r, j)];
            }
        }
        state.sigma[j] = updated.abs();
    }
    trace.other_flops += (4 * k) as u64;
    trace.blocks += 1;

    if trace.check_orthonormality {
        let err = state.orthonormality_error();
        trace.max_orthonormality_error = trace.max_orthonormality_error.max(err);
        if err >= ORTHONORMALITY_TOLERANCE {
            trace.orthonormality_violations += 1;
        }
    }
    Ok(())
}

fn mix_into(update: &mut Matrix, prior: &Matrix, c: f64) {
    for (u, &p) in update.as_mut_slice().iter_mut().zip(prior.as_slice()) {
        *u = (1.0 - c) * p + c * *u;
    }
}

/// Expands the state into the dense `m x n` gradient `Δ̂ · diag(σ) · X̂ᵀ`.
pub fn recompose(state: &LowRankState) -> Matrix {
    recompose_counted(state, &mut 0)
}

/// As [`recompose`], adding the `2kmn` of the final product to
/// `flops`.
pub fn recompose_counted(state: &LowRankState, flops: &mut u64) -> Matrix {
    let mut scaled = state.delta_hat.clone();
    scaled.scale_columns(&state.sigma);
    scaled
        .matmul_nt_counted(&state.x_hat, flops)
        .expect("state panels share rank")
}

/// `‖full_grad − recompose(state)‖_F`.
pub fn tracking_error(full_grad: &Matrix, state: &LowRankState) -> Result<f64> {
    if full_grad.shape() != (state.m(), state.n()) {
        return Err(Error::shape("tracking_error", full_grad.shape(), (state.m(), state.n())));
    }
    Ok(full_grad.sub(&recompose(state))?.frobenius_norm())
}
