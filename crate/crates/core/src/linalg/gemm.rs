//! Row-major dense product kernel.
//!
//! Every output entry is accumulated over the inner dimension in ascending
//! order starting from zero, so results are bit-identical to the textbook
//! triple loop. Speed comes from register tiling and packing, never from
//! reassociating the sum.

const MR: usize = 4;
const NR: usize = 8;

/// `c = a * b` where `a` is `m x k`, `b` is `k x n` and `c` is `m x n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);

    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    gemm_generic(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_body(a, b, c, m, k, n);
}

fn gemm_generic(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_body(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let mut panel = vec![0.0f64; k * NR];
    let full_cols = n - n % NR;

    for j0 in (0..full_cols).step_by(NR) {
        for kk in 0..k {
            panel[kk * NR..(kk + 1) * NR].copy_from_slice(&b[kk * n + j0..kk * n + j0 + NR]);
        }
        let full_rows = m - m % MR;
        for i0 in (0..full_rows).step_by(MR) {
            let mut acc = [[0.0f64; NR]; MR];
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (kk, bp) in panel.chunks_exact(NR).enumerate() {
                for r in 0..MR {
                    let av = rows[r][kk];
                    for col in 0..NR {
                        acc[r][col] += av * bp[col];
                    }
                }
            }
            for r in 0..MR {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
            }
        }
        for i in full_rows..m {
            let row = &a[i * k..(i + 1) * k];
            let mut acc = [0.0f64; NR];
            for (kk, bp) in panel.chunks_exact(NR).enumerate() {
                let av = row[kk];
                for col in 0..NR {
                    acc[col] += av * bp[col];
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
    }

    for j in full_cols..n {
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += row[kk] * b[kk * n + j];
            }
            c[i * n + j] = s;
        }
    }
}
