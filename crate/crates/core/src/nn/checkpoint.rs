//! Model checkpoints.
//!
//! ```text
//! "LRNM" | version u32 | channels, height, width u32 | dropout f64 | layers u32
//! per layer: tag u8, then
//!   0 dense   m n u32, weights (m·n f64, row-major), bias (m f64)
//!   1 conv    out in kh kw stride padding u32, kernels, bias
//!   2 pool, 3 relu, 4 dropout: no payload
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::{ConvLayer, DenseLayer, Layer, Network};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"LRNM";
pub const MODEL_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Decode(format!("model record truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Decode("oversized tensor".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Network {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION as usize);
        put_u32(&mut out, self.input.channels);
        put_u32(&mut out, self.input.height);
        put_u32(&mut out, self.input.width);
        out.extend_from_slice(&self.dropout_fraction.to_le_bytes());
        put_u32(&mut out, self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(0);
                    put_u32(&mut out, d.outputs());
                    put_u32(&mut out, d.inputs());
                    put_f64s(&mut out, d.weights.as_slice());
                    put_f64s(&mut out, &d.bias);
                }
                Layer::Conv(c) => {
                    out.push(1);
                    for v in [c.out_channels(), c.in_channels, c.kernel_h, c.kernel_w, c.stride, c.padding] {
                        put_u32(&mut out, v);
                    }
                    put_f64s(&mut out, c.kernels.as_slice());
                    put_f64s(&mut out, &c.bias);
                }
                Layer::MaxPool2 => out.push(2),
                Layer::Relu => out.push(3),
                Layer::Dropout => out.push(4),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Decode("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION as usize {
            return Err(Error::Decode(format!("unsupported model version {version}")));
        }
        let input = ImageShape {
            channels: r.u32()?,
            height: r.u32()?,
            width: r.u32()?,
        };
        let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let layer = match r.u8()? {
                0 => {
                    let (m, n) = (r.u32()?, r.u32()?);
                    let weights = Matrix::from_vec(m, n, r.f64s(m * n)?)?;
                    Layer::Dense(DenseLayer::new(weights, r.f64s(m)?)?)
                }
                1 => {
                    let (out, inp, kh, kw, stride, padding) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                    let width = inp * kh * kw;
                    let kernels = Matrix::from_vec(out, width, r.f64s(out * width)?)?;
                    Layer::Conv(ConvLayer::new(kernels, r.f64s(out)?, inp, kh, kw, stride, padding)?)
                }
                2 => Layer::MaxPool2,
                3 => Layer::Relu,
                4 => Layer::Dropout,
                tag => return Err(Error::Decode(format!("unknown layer tag {tag}"))),
            };
            layers.push(layer);
        }
        if r.at != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes after model", bytes.len() - r.at)));
        }
        Network::new(input, layers, dropout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Network::from_bytes(&fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))
    }
}
