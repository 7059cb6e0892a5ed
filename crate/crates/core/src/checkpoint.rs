//! `CMP1` binary checkpoints.
//!
//! Layout (little-endian): magic `CMP1`, `u32` layer count, then per layer
//! `u32` in_dim, `u32` out_dim, `u8` activation tag; then for every layer the
//! row-major weight matrix followed by the bias, as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{Activation, Layer, ModelParams};

const MAGIC: &[u8; 4] = b"CMP1";

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    for l in params.layers() {
        buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        buf.push(l.activation.tag());
    }
    for l in params.layers() {
        for v in l.weight.as_slice().iter().chain(&l.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Data("not a CMP1 checkpoint (bad magic)".into()));
    }
    let count = c.u32()? as usize;
    let mut dims = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let input = c.u32()? as usize;
        let output = c.u32()? as usize;
        let tag = c.take(1)?[0];
        let act = Activation::from_tag(tag)
            .ok_or_else(|| Error::Data(format!("layer {i}: unknown activation tag {tag}")))?;
        dims.push((input, output, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (input, output, activation) in dims {
        let weight = Mat::from_vec(input, output, c.f64s(input * output)?)?;
        let bias = c.f64s(output)?;
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - c.pos
        )));
    }
    ModelParams::new(layers).map_err(|e| Error::Data(format!("invalid checkpoint: {e}")))
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode(params)))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::mlp(&[4, 7, 3], Activation::Identity, &mut rng).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"CMP1");
        assert_eq!(decode(&bytes).unwrap(), p);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::mlp(&[2, 2], Activation::Relu, &mut rng).unwrap();
        let bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
