//! `HSNF` feature container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "HSNF" (0x48 0x53 0x4E 0x46)
//! 4       2         version, u16 LE (= 1)
//! 6       1         precision tag: 0 = f32, 1 = f64
//! 7       1         ndim, 1..=4
//! 8       4·ndim    extents, u32 LE each
//! ...     payload   row-major values, LE, product(extents) × element size
//! ```

use std::fs;
use std::path::Path;

use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HSNF";
pub const VERSION: u16 = 1;
pub const MAX_DIMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn header_len(ndim: usize) -> usize {
    4 + 2 + 1 + 1 + 4 * ndim
}

pub fn encode(tensor: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    let ndim = tensor.rank();
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(Error::invalid(format!(
            "feature files hold 1 to {MAX_DIMS} dimensions, got {ndim}"
        )));
    }
    let mut out = Vec::with_capacity(header_len(ndim) + tensor.numel() * precision.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision.tag());
    out.push(ndim as u8);
    for &e in tensor.shape() {
        let e = u32::try_from(e).map_err(|_| Error::invalid(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a complete container. Single-precision payloads are widened.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, Precision)> {
    let corrupt = |msg: String| Error::Corrupt(msg);
    if bytes.len() < 8 {
        return Err(corrupt(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt(format!("bad magic {:02x?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let precision =
        Precision::from_tag(bytes[6]).ok_or_else(|| corrupt(format!("unknown precision tag {}", bytes[6])))?;
    let ndim = bytes[7] as usize;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(corrupt(format!("dimension count {ndim} outside 1..={MAX_DIMS}")));
    }
    let header = header_len(ndim);
    if bytes.len() < header {
        return Err(corrupt("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = &bytes[header..];
    let expected = shape
        .iter()
        .try_fold(precision.size(), |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| corrupt(format!("extents {shape:?} overflow")))?;
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, extents {shape:?} need {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, precision))
}

pub fn write_feature(path: &Path, tensor: &Tensor, precision: Precision) -> Result<()> {
    let bytes = encode(tensor, precision)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
        .map(|(t, _)| t)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Tensor {
        Tensor::from_rows(&[vec![1.5, -2.25, 3.0], vec![0.1, 1e-300, f64::MAX]]).unwrap()
    }

    #[test]
    fn header_layout() {
        assert_eq!(header_len(3), 20);
        let t = Tensor::zeros(&[2, 3, 4]);
        let bytes = encode(&t, Precision::F32).unwrap();
        assert_eq!(&bytes[..4], &[0x48, 0x53, 0x4E, 0x46]);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 3);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 24 * 4);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let (back, p) = decode(&encode(&t, Precision::F64).unwrap()).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));

        let t32 = Tensor::vector(&[0.5, -3.25, 1024.0]);
        let (back, p) = decode(&encode(&t32, Precision::F32).unwrap()).unwrap();
        assert_eq!(p, Precision::F32);
        assert_eq!(back, t32);
    }

    #[test]
    fn rejects_zero_dimensional() {
        assert!(encode(&Tensor::scalar(1.0), Precision::F64).is_err());
        let mut bytes = encode(&Tensor::vector(&[1.0]), Precision::F64).unwrap();
        bytes[7] = 0;
        assert!(matches!(decode(&bytes[..8]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let good = encode(&sample(), Precision::F64).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Corrupt(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Corrupt(_))));
        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(decode(&bad), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Corrupt(_))));
        assert!(matches!(decode(&good[..10]), Err(Error::Corrupt(_))));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Corrupt(_))));
    }

    #[test]
    fn zero_extent_is_representable() {
        let t = Tensor::zeros(&[8, 0, 16]);
        let (back, _) = decode(&encode(&t, Precision::F32).unwrap()).unwrap();
        assert_eq!(back.shape(), &[8, 0, 16]);
    }

    proptest! {
        #[test]
        fn f64_round_trip(dims in prop::collection::vec(0usize..5, 1..=4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(17) & !(0x7ff << 52) | (0x3ff << 52)))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let (back, _) = decode(&encode(&t, Precision::F64).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
