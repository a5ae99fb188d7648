//! Synthetic (x, δ) streams whose mean outer product is a known low-rank
//! matrix `U · diag(s) · Vᵀ`.
//!
//! Each sample is `δ = U (√s ⊙ ε h)`, `x = V (√s ⊙ ε h)` with `ε` a random
//! sign and `h` taken from a group of `P` coefficient vectors satisfying
//! `Σ h hᵀ = P I`. Groups are consumed in shuffled order, so with zero noise
//! the mean outer product over every aligned group of `P` samples is exactly
//! the target.
//!
//! * [`StreamDesign::Hadamard`]: `h` is a row of a Sylvester–Hadamard matrix
//!   restricted to columns `1..=r`, `P` the smallest power of two above `r`.
//!   Every sample excites every direction.
//! * [`StreamDesign::Axis`]: `h = √r e_j`, `P = r`. Every sample excites a
//!   single direction.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{qr, Matrix};
use crate::sbpca::{split_blocks, BlockSample};

pub const STREAM_MAGIC: &[u8; 4] = b"SBPS";
pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StreamDesign {
    #[default]
    Hadamard,
    Axis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStreamSpec {
    pub m: usize,
    pub n: usize,
    pub singular_values: Vec<f64>,
    pub samples: usize,
    /// Standard deviation of independent Gaussian noise added to x and δ.
    pub noise: f64,
    pub seed: u64,
    pub design: StreamDesign,
}

impl SyntheticStreamSpec {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Aligned group size over which the noise-free mean is exact.
    pub fn group_size(&self) -> usize {
        match self.design {
            StreamDesign::Hadamard => (self.rank() + 1).next_power_of_two(),
            StreamDesign::Axis => self.rank(),
        }
    }

    fn validate(&self) -> Result<()> {
        let r = self.rank();
        if r == 0 || r > self.m.min(self.n) {
            return Err(Error::Config(format!(
                "true rank {r} must be in 1..={}",
                self.m.min(self.n)
            )));
        }
        let s = &self.singular_values;
        if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) || s.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Config("singular values must be positive and non-increasing".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise scale must be a non-negative finite value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    /// `N x n`, one activation per row.
    pub x: Matrix,
    /// `N x m`, one error per row.
    pub delta: Matrix,
    /// `m x r`
    pub u: Matrix,
    /// `n x r`
    pub v: Matrix,
    pub s: Vec<f64>,
}

pub fn synthetic_stream(spec: &SyntheticStreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let (m, n, r) = (spec.m, spec.n, spec.rank());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = qr(&Matrix::gaussian(m, r, &mut rng))?.q;
    let v = qr(&Matrix::gaussian(n, r, &mut rng))?.q;
    let root_s: Vec<f64> = spec.singular_values.iter().map(|s| s.sqrt()).collect();

    let group = spec.group_size();
    let mut x = Matrix::zeros(spec.samples, n);
    let mut delta = Matrix::zeros(spec.samples, m);
    let mut rows: Vec<usize> = (0..group).collect();
    let mut coeff = vec![0.0; r];
    for i in 0..spec.samples {
        if i % group == 0 {
            rows.shuffle(&mut rng);
        }
        let h = rows[i % group];
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for (j, c) in coeff.iter_mut().enumerate() {
            let entry = match spec.design {
                StreamDesign::Hadamard if (h & (j + 1)).count_ones().is_multiple_of(2) => 1.0,
                StreamDesign::Hadamard => -1.0,
                StreamDesign::Axis if h == j => (r as f64).sqrt(),
                StreamDesign::Axis => 0.0,
            };
            *c = sign * entry * root_s[j];
        }
        for (t, out) in delta.row_mut(i).iter_mut().enumerate() {
            *out = (0..r).map(|j| u[(t, j)] * coeff[j]).sum();
        }
        for (t, out) in x.row_mut(i).iter_mut().enumerate() {
            *out = (0..r).map(|j| v[(t, j)] * coeff[j]).sum();
        }
        if spec.noise > 0.0 {
            for val in delta.row_mut(i).iter_mut().chain(x.row_mut(i).iter_mut()) {
                *val += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(SyntheticStream {
        x,
        delta,
        u,
        v,
        s: spec.singular_values.clone(),
    })
}

impl SyntheticStream {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// The constructed mean gradient `U · diag(s) · Vᵀ`.
    pub fn target(&self) -> Matrix {
        let mut us = self.u.clone();
        us.scale_columns(&self.s);
        us.matmul_nt(&self.v).expect("factor shapes agree")
    }

    /// `(1/N) Σ δ_i x_iᵀ` over the stream.
    pub fn empirical_mean(&self) -> Matrix {
        let mut g = self.delta.matmul_tn(&self.x).expect("stream rows agree");
        g.scale_in_place(1.0 / self.len().max(1) as f64);
        g
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        (self.x.row(i), self.delta.row(i))
    }

    /// Consecutive blocks of the given sizes starting at row `start`.
    pub fn blocks(&self, start: usize, sizes: &[usize]) -> Result<Vec<BlockSample>> {
        let end = start + sizes.iter().sum::<usize>();
        if end > self.len() {
            return Err(Error::Data(format!("stream has {} rows, blocks need {end}", self.len())));
        }
        split_blocks(&self.x.row_block(start, end), &self.delta.row_block(start, end), sizes)
    }

    /// `"SBPS" | version | m | n | N | r` (u32 LE) then `s`, `U`, `V`, `x`,
    /// `δ` as row-major LE doubles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        let header = [
            STREAM_VERSION,
            self.u.rows() as u32,
            self.v.rows() as u32,
            self.len() as u32,
            self.s.len() as u32,
        ];
        for w in header {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in self
            .s
            .iter()
            .chain(self.u.as_slice())
            .chain(self.v.as_slice())
            .chain(self.x.as_slice())
            .chain(self.delta.as_slice())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != STREAM_MAGIC {
            return Err(Error::Decode("not a synthetic stream record".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != STREAM_VERSION as usize {
            return Err(Error::Decode(format!("unsupported stream version {}", word(0))));
        }
        let (m, n, count, r) = (word(1), word(2), word(3), word(4));
        let floats = r + m * r + n * r + count * (n + m);
        if bytes.len() != 24 + 8 * floats {
            return Err(Error::Decode(format!(
                "stream record should be {} bytes, found {}",
                24 + 8 * floats,
                bytes.len()
            )));
        }
        let mut values = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |len: usize| values.by_ref().take(len).collect::<Vec<f64>>();
        let s = take(r);
        let u = Matrix::from_vec(m, r, take(m * r))?;
        let v = Matrix::from_vec(n, r, take(n * r))?;
        let x = Matrix::from_vec(count, n, take(count * n))?;
        let delta = Matrix::from_vec(count, m, take(count * m))?;
        Ok(SyntheticStream { x, delta, u, v, s })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        SyntheticStream::from_bytes(&fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd_oracle;

    fn spec(s: Vec<f64>, samples: usize, noise: f64) -> SyntheticStreamSpec {
        SyntheticStreamSpec {
            m: 20,
            n: 15,
            singular_values: s,
            samples,
            noise,
            seed: 42,
            design: StreamDesign::Hadamard,
        }
    }

    #[test]
    fn single_rank_one_pair_has_unit_singular_value() {
        let stream = synthetic_stream(&spec(vec![1.0], 1, 0.0)).unwrap();
        let (x, d) = stream.pair(0);
        let outer = Matrix::from_fn(d.len(), x.len(), |i, j| d[i] * x[j]);
        let svd = svd_oracle(&outer).unwrap();
        assert!((svd.s[0] - 1.0).abs() < 1e-12);
        assert!(svd.s[1].abs() < 1e-12);
    }

    #[test]
    fn large_stream_mean_matches_construction() {
        let stream = synthetic_stream(&spec(vec![3.0, 2.0, 1.0], 10_000, 0.0)).unwrap();
        let target = stream.target();
        let rel = stream.empirical_mean().sub(&target).unwrap().frobenius_norm() / target.frobenius_norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn every_aligned_group_has_the_exact_mean() {
        let stream = synthetic_stream(&spec(vec![3.0, 2.0, 1.0], 16, 0.0)).unwrap();
        let target = stream.target();
        for g in 0..4 {
            let part = SyntheticStream {
                x: stream.x.row_block(4 * g, 4 * g + 4),
                delta: stream.delta.row_block(4 * g, 4 * g + 4),
                ..stream.clone()
            };
            assert!(part.empirical_mean().max_abs_diff(&target).unwrap() < 1e-12);
        }
    }

    #[test]
    fn axis_design_groups_have_the_exact_mean() {
        let mut axis = spec(vec![3.0, 2.0, 1.0], 9, 0.0);
        axis.design = StreamDesign::Axis;
        assert_eq!(axis.group_size(), 3);
        let stream = synthetic_stream(&axis).unwrap();
        let target = stream.target();
        for g in 0..3 {
            let part = SyntheticStream {
                x: stream.x.row_block(3 * g, 3 * g + 3),
                delta: stream.delta.row_block(3 * g, 3 * g + 3),
                ..stream.clone()
            };
            assert!(part.empirical_mean().max_abs_diff(&target).unwrap() < 1e-12);
        }
        // each sample is a single scaled singular pair
        let (x, d) = stream.pair(0);
        let outer = Matrix::from_fn(d.len(), x.len(), |i, j| d[i] * x[j]);
        let s = svd_oracle(&outer).unwrap().s;
        assert!([9.0, 6.0, 3.0].iter().any(|v| (s[0] - v).abs() < 1e-10));
        assert!(s[1] < 1e-10);
    }

    #[test]
    fn same_seed_same_stream() {
        let a = synthetic_stream(&spec(vec![2.0, 1.0], 40, 0.1)).unwrap();
        let b = synthetic_stream(&spec(vec![2.0, 1.0], 40, 0.1)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(vec![2.0, 1.0], 40, 0.1);
        other.seed = 43;
        assert_ne!(a, synthetic_stream(&other).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synthetic_stream(&spec(vec![1.0, 2.0], 4, 0.0)).is_err());
        assert!(synthetic_stream(&spec(vec![], 4, 0.0)).is_err());
        assert!(synthetic_stream(&spec(vec![1.0; 16], 4, 0.0)).is_err());
    }

    #[test]
    fn serialized_stream_round_trips() {
        let a = synthetic_stream(&spec(vec![2.0, 1.0], 9, 0.3)).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"SBPS");
        assert_eq!(SyntheticStream::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        assert!(SyntheticStream::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
