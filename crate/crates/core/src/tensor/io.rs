//! `MIPT` v1 tensor files: magic `MIPT`, `u8` version, `u8` rank, `rank`
//! little-endian `u32` extents, then the values as little-endian `f32` in
//! row-major order.

use std::fs;
use std::path::Path;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MIPT";
pub const VERSION: u8 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let bad = |reason: String| Error::Format {
        kind: "MIPT",
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing MIPT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = numel(&shape);
    if bytes.len() != header + 4 * count {
        return Err(bad(format!(
            "expected {} value bytes for shape {shape:?}, found {}",
            4 * count,
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(data, &shape).map_err(|e| bad(e.to_string()))
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_vec(vec![1.0, -2.5], &[1, 2]).unwrap();
        let bytes = encode(&t);
        let mut expect = b"MIPT".to_vec();
        expect.extend([1u8, 2]);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_version_and_length() {
        let p = Path::new("x.mipt");
        assert!(decode::<f32>(b"NOPE\x01\x00", p).is_err());
        assert!(decode::<f32>(b"MIPT\x02\x00", p).is_err());
        let mut bytes = encode(&Tensor::<f32>::ones(&[3]));
        bytes.pop();
        assert!(matches!(decode::<f32>(&bytes, p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(i as u32 + 1) & 0x7f7f_ffff)).collect();
            let t = Tensor::<f32>::from_vec(data, &shape).unwrap();
            let back: Tensor<f32> = decode(&encode(&t), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
