use crate::error::{Error, Result};

/// Closed-form memory and FLOP estimates for one `m x n` dense layer and
/// one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub m: u64,
    pub n: u64,
    pub batch_size: u64,
    pub block_size: u64,
    /// Blocks per batch.
    pub blocks: u64,
    pub rank: u64,
    /// `2Bmn`
    pub mbgd_flops: u64,
    /// `4Bk(m+n)`
    pub sbpca_stream_flops: u64,
    /// `blocks · 2 · 2k²(m+n)`: both panels, every block.
    pub sbpca_qr_flops: u64,
    /// `2kmn`
    pub sbpca_recompose_flops: u64,
    /// Sum of the three SBPCA terms.
    pub sbpca_flops: u64,
    /// `B(m+n)`, the stacked activations and errors.
    pub mbgd_aux_floats: u64,
    /// `mn`, the explicitly formed gradient.
    pub mbgd_gradient_floats: u64,
    /// `k(m+n+1)`
    pub state_floats: u64,
    /// `k(m+n)`
    pub update_floats: u64,
    /// `k² + max(m,n)(k+1)`
    pub qr_workspace_floats: u64,
    /// State, update buffers and QR workspace.
    pub sbpca_aux_floats: u64,
    pub ratios: Ratios,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    /// `sbpca_flops / mbgd_flops`
    pub flops: f64,
    /// `k / B`, the large-layer limit of `flops`.
    pub flops_limit: f64,
    /// `(3k+1)/B`, memory against the stacked batch.
    pub memory_streamed: f64,
    /// `[2k(m+n) + max(m,n)(k+1) + k²] / (mn)`, memory against the formed
    /// gradient.
    pub memory_expanded: f64,
}

/// Fixed blocks of `b` rows, `B/b` blocks per batch.
pub fn cost_model(m: usize, n: usize, batch_size: usize, block_size: usize, rank: usize) -> Result<CostModel> {
    if block_size == 0 {
        return Err(Error::Config("cost model needs every count to be at least 1".into()));
    }
    let mut model = cost_model_for_blocks(m, n, batch_size, batch_size / block_size, rank)?;
    model.block_size = block_size as u64;
    Ok(model)
}

/// Any block schedule with `blocks` QR steps per batch, such as the
/// doubling blocks of SBPCAV. `block_size` is reported as `B / blocks`.
pub fn cost_model_for_blocks(m: usize, n: usize, batch_size: usize, blocks: usize, rank: usize) -> Result<CostModel> {
    if m == 0 || n == 0 || batch_size == 0 || blocks == 0 || rank == 0 {
        return Err(Error::Config("cost model needs every count to be at least 1".into()));
    }
    if rank > m.min(n) {
        return Err(Error::Config(format!("rank {rank} exceeds min(m, n) = {}", m.min(n))));
    }
    let (m, n, bb, blocks, k) = (m as u64, n as u64, batch_size as u64, blocks as u64, rank as u64);
    let b = bb / blocks;
    let mbgd_flops = 2 * bb * m * n;
    let sbpca_stream_flops = 4 * bb * k * (m + n);
    let sbpca_qr_flops = blocks * 2 * 2 * k * k * (m + n);
    let sbpca_recompose_flops = 2 * k * m * n;
    let sbpca_flops = sbpca_stream_flops + sbpca_qr_flops + sbpca_recompose_flops;
    let state_floats = k * (m + n + 1);
    let update_floats = k * (m + n);
    let qr_workspace_floats = k * k + m.max(n) * (k + 1);
    let ratios = Ratios {
        flops: sbpca_flops as f64 / mbgd_flops as f64,
        flops_limit: k as f64 / bb as f64,
        memory_streamed: (3 * k + 1) as f64 / bb as f64,
        memory_expanded: (2 * k * (m + n) + m.max(n) * (k + 1) + k * k) as f64 / (m * n) as f64,
    };
    Ok(CostModel {
        m,
        n,
        batch_size: bb,
        block_size: b,
        blocks,
        rank: k,
        mbgd_flops,
        sbpca_stream_flops,
        sbpca_qr_flops,
        sbpca_recompose_flops,
        sbpca_flops,
        mbgd_aux_floats: bb * (m + n),
        mbgd_gradient_floats: m * n,
        state_floats,
        update_floats,
        qr_workspace_floats,
        sbpca_aux_floats: state_floats + update_floats + qr_workspace_floats,
        ratios,
    })
}

/// FLOPs and auxiliary memory counted during a run, by category.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub forward: u64,
    /// Error propagation through layers.
    pub backward: u64,
    /// Explicit dense batch gradients (MBGD).
    pub gradient: u64,
    /// Singular-vector update products.
    pub stream: u64,
    /// Singular-value inner products.
    pub sigma: u64,
    pub qr: u64,
    /// Scaling and mixing inside the streaming update.
    pub sbpca_other: u64,
    pub recompose: u64,
    /// Convolution kernel gradients.
    pub conv: u64,
    /// Parameter steps.
    pub update: u64,
    pub eval: u64,
    /// Full-dataset gradients for tracking error.
    pub tracking: u64,
    /// Peak training-data / gradient memory outside the model, in floats.
    pub peak_aux_floats: u64,
}

impl CostLedger {
    pub fn total(&self) -> u64 {
        self.forward
            + self.backward
            + self.gradient
            + self.stream
            + self.sigma
            + self.qr
            + self.sbpca_other
            + self.recompose
            + self.conv
            + self.update
            + self.eval
            + self.tracking
    }

    /// The categories the cost model predicts for a dense-layer update:
    /// `gradient` for MBGD, `stream + qr + recompose` for SBPCA.
    pub fn modelled_update_flops(&self) -> u64 {
        self.gradient + self.stream + self.qr + self.recompose
    }

    /// `(name, value)` pairs in a fixed order, for reports.
    pub fn categories(&self) -> [(&'static str, u64); 12] {
        [
            ("forward", self.forward),
            ("backward", self.backward),
            ("gradient", self.gradient),
            ("stream", self.stream),
            ("sigma", self.sigma),
            ("qr", self.qr),
            ("sbpca_other", self.sbpca_other),
            ("recompose", self.recompose),
            ("conv", self.conv),
            ("update", self.update),
            ("eval", self.eval),
            ("tracking", self.tracking),
        ]
    }
}
