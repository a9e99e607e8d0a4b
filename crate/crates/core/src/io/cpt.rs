//! `CPT1`: magic `CPT1`, one dtype byte (0 = f32, 1 = f64), one ndim byte,
//! `ndim` little-endian u64 dimensions, then the elements in row-major order,
//! little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, DenseTensor, Element};

use super::write_bytes;

const MAGIC: &[u8; 4] = b"CPT1";

pub fn encode<T: Element>(t: &DenseTensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.ndim() + T::DTYPE.size() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses a CPT1 buffer whose dtype must be `T`'s.
pub fn decode<T: Element>(bytes: &[u8]) -> std::result::Result<DenseTensor<T>, String> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err("missing CPT1 magic".into());
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| format!("unknown dtype code {}", bytes[4]))?;
    if dtype != T::DTYPE {
        return Err(format!("stored dtype is {dtype:?}, expected {:?}", T::DTYPE));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err("zero-dimensional tensor".into());
    }
    let header = 6 + 8 * ndim;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let size = dtype.size();
    if bytes.len() - header != count.saturating_mul(size) {
        return Err(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            count * size,
            bytes.len() - header
        ));
    }
    let data = bytes[header..].chunks_exact(size).map(T::read_le).collect();
    DenseTensor::from_vec(&shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor<T: Element>(path: &Path, t: &DenseTensor<T>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("CPT1 stores at most 255 dimensions"));
    }
    write_bytes(path, &encode(t))
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<DenseTensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    #[test]
    fn header_layout() {
        let t = DenseTensor::<f32>::from_vec(&[2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..6], b"CPT1\x00\x02");
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = random_tensor(&[3, 4, 2], 1);
        t.data_mut()[0] = -0.0;
        t.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back: DenseTensor = decode(&encode(&t)).unwrap();
        let bits = |x: &DenseTensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cpt");
        let t32: DenseTensor<f32> = t.cast();
        write_tensor(&p, &t32).unwrap();
        assert_eq!(read_tensor::<f32>(&p).unwrap(), t32);
        assert!(read_tensor::<f64>(&p).is_err());
    }

    #[test]
    fn malformed_buffers_rejected() {
        let good = encode(&random_tensor(&[2, 2], 2));
        assert!(decode::<f64>(&good[..good.len() - 1]).is_err());
        assert!(decode::<f64>(b"CPT2\x01\x01").is_err());
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(decode::<f64>(&bad).is_err());
        let mut nan = good;
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode::<f64>(&nan).is_err());
    }
}
