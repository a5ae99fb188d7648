//! Flat little-endian state record:
//!
//! ```text
//! "SBPC" | version u32 | m u32 | n u32 | k u32
//! sigma      k doubles
//! x_hat      n*k doubles, row-major
//! delta_hat  m*k doubles, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::LowRankState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBPC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

impl LowRankState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, n, k) = (self.m(), self.n(), self.rank());
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.storage_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, m as u32, n as u32, k as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self
            .sigma
            .iter()
            .chain(self.x_hat.as_slice())
            .chain(self.delta_hat.as_slice())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode(format!("state record is {} bytes, header needs {HEADER_LEN}", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Decode("bad state magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("unsupported state version {version}")));
        }
        let (m, n, k) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if k == 0 {
            return Err(Error::Decode("state rank is zero".into()));
        }
        let expected = HEADER_LEN + 8 * k * (m + n + 1);
        if bytes.len() != expected {
            return Err(Error::Decode(format!(
                "state record for m={m} n={n} k={k} must be {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let sigma: Vec<f64> = values.by_ref().take(k).collect();
        let x_hat = Matrix::from_vec(n, k, values.by_ref().take(n * k).collect())?;
        let delta_hat = Matrix::from_vec(m, k, values.collect())?;
        LowRankState::from_parts(x_hat, delta_hat, sigma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        LowRankState::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}
