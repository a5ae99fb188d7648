use super::Matrix;
use crate::error::{Error, Result};

/// Largest `min(rows, cols)` the oracle accepts.
pub const ORACLE_LIMIT: usize = 512;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u · diag(s) · vᵀ` with `s` sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x r`
    pub u: Matrix,
    pub s: Vec<f64>,
    /// `n x r`
    pub v: Matrix,
}

impl SvdResult {
    /// Rank-`k` truncation `u_k · diag(s_k) · v_kᵀ`.
    pub fn truncated(&self, k: usize) -> Matrix {
        let k = k.min(self.s.len());
        Matrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            let mut acc = 0.0;
            for t in 0..k {
                acc += self.u[(i, t)] * self.s[t] * self.v[(j, t)];
            }
            acc
        })
    }
}

/// One-sided Jacobi SVD. Verification only: refuses inputs whose smaller
/// dimension exceeds [`ORACLE_LIMIT`].
pub fn svd_oracle(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m.min(n) > ORACLE_LIMIT {
        return Err(Error::OracleTooLarge {
            rows: m,
            cols: n,
            limit: ORACLE_LIMIT,
        });
    }
    if m == 0 || n == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(m, 0),
            s: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }
    if m < n {
        let t = svd_oracle(&a.transpose())?;
        return Ok(SvdResult { u: t.v, s: t.s, v: t.u });
    }

    // Rows of `w` are the columns of `a`; rows of `vt` are columns of V.
    let mut w = a.transpose();
    let mut vt = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (w.row(p), w.row(q));
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|j| (w.row(j).iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma_max = order[0].0;
    let tiny = sigma_max * (m as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (out, &(sigma, j)) in order.iter().enumerate() {
        for i in 0..n {
            v[(i, out)] = vt[(j, i)];
        }
        if sigma > tiny && sigma > 0.0 {
            for i in 0..m {
                u[(i, out)] = w[(j, i)] / sigma;
            }
            s.push(sigma);
        } else {
            missing.push(out);
            s.push(0.0);
        }
    }
    complete_columns(&mut u, &missing);
    Ok(SvdResult { u, s, v })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to every
/// other column, drawn from the canonical basis by Gram-Schmidt.
fn complete_columns(u: &mut Matrix, missing: &[usize]) {
    let (m, r) = u.shape();
    let mut candidate = 0;
    for &col in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for j in 0..r {
                    if j == col {
                        continue;
                    }
                    let d: f64 = (0..m).map(|i| u[(i, j)] * e[i]).sum();
                    for i in 0..m {
                        e[i] -= d * u[(i, j)];
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..m {
                    u[(i, col)] = e[i] / norm;
                }
                break;
            }
        }
    }
}
