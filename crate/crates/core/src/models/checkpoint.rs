//! `KDPM` parameter checkpoints.
//!
//! Layout (little-endian): magic `KDPM`, `u32` version, `u32` layer count,
//! then per layer `u32` out, `u32` in, `out * in` binary64 weights
//! row-major, `out` binary64 biases. The init seed is not stored.

use std::io::{Read, Write};
use std::path::Path;

use super::{Layer, ModelParams};
use crate::error::FormatError;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KDPM";
const VERSION: u32 = 1;

pub fn write_params<T: Scalar>(params: &ModelParams<T>, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for layer in &params.layers {
        out.write_all(&(layer.weight.rows() as u32).to_le_bytes())?;
        out.write_all(&(layer.weight.cols() as u32).to_le_bytes())?;
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(8).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_params<T: Scalar>(input: &mut impl Read) -> Result<ModelParams<T>, FormatError> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|source| FormatError::Io {
            path: "<reader>".into(),
            source,
        })?;
    decode(&bytes)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            expected: VERSION,
            found: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| {
            FormatError::Header(format!("layer size {rows}x{cols} overflows"))
        })?;
        let weights = cur.f64s(n)?;
        let bias = cur.f64s(rows)?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite { block: "parameters" });
        }
        let weight = Matrix::new(rows, cols, weights.into_iter().map(T::of).collect())
            .expect("length checked");
        layers.push(Layer {
            weight,
            bias: bias.into_iter().map(T::of).collect(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    Ok(ModelParams { layers, seed: 0 })
}

pub fn save_params<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<(), FormatError> {
    let io = |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    write_params(params, &mut buf).map_err(io)?;
    std::fs::write(path, buf).map_err(io)
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<ModelParams<T>, FormatError> {
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, MlpSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::new(vec![5, 7, 3]).unwrap();
        let p = init_params::<f64>(&spec, 11).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"KDPM");
        let q: ModelParams<f64> = read_params(&mut buf.as_slice()).unwrap();
        assert!(p.bit_identical(&q));
        let mut again = Vec::new();
        write_params(&q, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let p = init_params::<f64>(&spec, 1).unwrap();
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            decode::<f64>(&bad),
            Err(FormatError::UnsupportedVersion { found: 2, .. })
        ));
        assert!(matches!(
            decode::<f64>(&buf[..buf.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(decode::<f64>(&bad), Err(FormatError::TrailingBytes { extra: 1 })));
    }
}
