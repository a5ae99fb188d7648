use super::Matrix;
use crate::error::{Error, Result};

/// Residual column norm below which a column is treated as linearly
/// dependent on its predecessors.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Thin QR factors with a non-negative diagonal on `r`.
#[derive(Debug, Clone)]
pub struct QrResult {
    /// `p x k`, orthonormal columns.
    pub q: Matrix,
    /// `k x k`, upper triangular.
    pub r: Matrix,
    /// Set when at least one column was rank deficient and `q` carries a
    /// completion vector in its place.
    pub degenerate: bool,
}

pub fn qr(a: &Matrix) -> Result<QrResult> {
    qr_in_place(a.clone())
}

pub fn qr_in_place(a: Matrix) -> Result<QrResult> {
    qr_counted(a, &mut 0)
}

/// Floats resident while factoring a `p x k` panel: the panel itself (which
/// becomes `Q`), the explicit `R`, and one length-`p` scratch vector.
pub fn qr_workspace_floats(p: usize, k: usize) -> usize {
    k * k + p * (k + 1)
}

/// Floating point operations [`qr_counted`] performs on a `p x k` panel.
pub fn qr_flops(p: usize, k: usize) -> u64 {
    let mut total = 0u64;
    for j in 0..k {
        let len = (p - j) as u64;
        let trailing = (k - j - 1) as u64;
        // norm + reflector scaling + trailing update, then the same trailing
        // update and column scaling again when Q is accumulated.
        total += 2 * len + len + 4 * len * trailing;
        total += 4 * len * trailing + len;
    }
    total
}

/// Householder QR of a `p x k` panel (`p >= k >= 1`), explicit `Q` and `R`.
///
/// Columns of `Q` (and the matching rows of `R`) are sign flipped so that
/// `diag(R) >= 0`, which makes the factorization unique for full-rank
/// input. A column whose residual norm falls below [`RANK_TOLERANCE`]
/// gets no reflector; its `Q` column is then the deterministic completion
/// `H_0 ⋯ H_{j-1} e_j`, orthogonal to every earlier column, with
/// `R[j][j] = 0`.
pub fn qr_counted(mut a: Matrix, flops: &mut u64) -> Result<QrResult> {
    let (p, k) = a.shape();
    if k == 0 || p < k {
        return Err(Error::shape("qr", (p, k), (k, k)));
    }
    // scratch[..k] holds the reflector coefficients
    let mut scratch = vec![0.0f64; p];
    let mut degenerate = false;
    let data = a.as_mut_slice();
    let at = |i: usize, j: usize| i * k + j;

    for j in 0..k {
        let mut sq = 0.0;
        for i in j..p {
            sq += data[at(i, j)] * data[at(i, j)];
        }
        let norm = sq.sqrt();
        if norm < RANK_TOLERANCE {
            degenerate = true;
            scratch[j] = 0.0;
            data[at(j, j)] = 0.0;
            continue;
        }
        let alpha = data[at(j, j)];
        let beta = if alpha >= 0.0 { -norm } else { norm };
        let tau = (beta - alpha) / beta;
        let inv = 1.0 / (alpha - beta);
        for i in j + 1..p {
            data[at(i, j)] *= inv;
        }
        data[at(j, j)] = beta;
        scratch[j] = tau;

        for c in j + 1..k {
            let mut s = data[at(j, c)];
            for i in j + 1..p {
                s += data[at(i, j)] * data[at(i, c)];
            }
            s *= tau;
            data[at(j, c)] -= s;
            for i in j + 1..p {
                data[at(i, c)] -= s * data[at(i, j)];
            }
        }
    }

    let mut r = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            r[(i, j)] = data[at(i, j)];
        }
    }

    // Accumulate Q = H_0 ⋯ H_{k-1} [I; 0] in place, last reflector first.
    for j in (0..k).rev() {
        let tau = scratch[j];
        if tau != 0.0 {
            for c in j + 1..k {
                let mut s = data[at(j, c)];
                for i in j + 1..p {
                    s += data[at(i, j)] * data[at(i, c)];
                }
                s *= tau;
                data[at(j, c)] -= s;
                for i in j + 1..p {
                    data[at(i, c)] -= s * data[at(i, j)];
                }
            }
        }
        for i in j + 1..p {
            data[at(i, j)] *= -tau;
        }
        data[at(j, j)] = 1.0 - tau;
        for i in 0..j {
            data[at(i, j)] = 0.0;
        }
    }

    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..p {
                data[at(i, j)] = -data[at(i, j)];
            }
        }
    }

    *flops += qr_flops(p, k);
    Ok(QrResult { q: a, r, degenerate })
}
