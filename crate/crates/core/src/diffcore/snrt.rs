//! `SNRT` v1 tensor files.
//!
//! Layout: magic `SNRT`, `u8` version (1), `u8` dtype (0 = f32), `u16` rank,
//! `rank` x `u32` extents, then the row-major payload. All integers and
//! floats are little-endian.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SNRT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

const HEADER_LEN: usize = 8;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds u16".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("SNRT encode of value {v}")));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing SNRT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Rounds every value through f32, matching what a save/load cycle yields.
pub fn round_to_storage(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(
            b,
            [
                b'S', b'N', b'R', b'T', 1, 0, 2, 0, // magic, version, dtype, rank
                1, 0, 0, 0, 2, 0, 0, 0, // extents
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, // 1.0f32, -2.0f32
            ]
        );
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::zeros(&[3]);
        let mut b = encode(&t).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[5] = 7;
        assert!(decode(&b).is_err());
        assert!(decode(b"NOPE\x01\x00\x00\x00").is_err());
        assert!(encode(&Tensor::scalar(1e300)).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(
            dims in prop::collection::vec(1usize..4, 0..5),
            seed in any::<u64>(),
        ) {
            let len: usize = dims.iter().product();
            let t = Tensor::from_fn(&dims, |i| ((i as u64 ^ seed) % 1000) as f64 * 0.37 - 100.0);
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.len(), len);
            prop_assert_eq!(back, round_to_storage(&t));
        }
    }
}
