//! `PGT1` raw tensor files.
//!
//! Layout: magic `PGT1`, `u8` dtype code (0 = uint8, 1 = float32), `u8`
//! rank, `rank × u32` dims, then row-major data. All integers little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    F32 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(ArrayD<u8>),
    F32(ArrayD<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::U8(a) => a.shape(),
            TensorData::F32(a) => a.shape(),
        }
    }
}

fn header(dtype: DType, shape: &[usize]) -> Result<Vec<u8>> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Value(format!("tensor rank {} exceeds 255", shape.len())))?;
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Value(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_f32(array: &ArrayD<f32>) -> Result<Vec<u8>> {
    let mut out = header(DType::F32, array.shape())?;
    out.reserve(array.len() * 4);
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u8(array: &ArrayD<u8>) -> Result<Vec<u8>> {
    let mut out = header(DType::U8, array.shape())?;
    out.extend(array.iter().copied());
    Ok(out)
}

pub fn encode(t: &TensorData) -> Result<Vec<u8>> {
    match t {
        TensorData::U8(a) => encode_u8(a),
        TensorData::F32(a) => encode_f32(a),
    }
}

/// Decodes a `PGT1` buffer. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<TensorData> {
    let bad = |reason: &str| Error::format("PGT1 tensor", origin, reason);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing PGT1 magic"));
    }
    let dtype = match bytes[4] {
        0 => DType::U8,
        1 => DType::F32,
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    let width = match dtype {
        DType::U8 => 1,
        DType::F32 => 4,
    };
    if payload.len() != count * width {
        return Err(bad(&format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count * width
        )));
    }
    Ok(match dtype {
        DType::U8 => TensorData::U8(
            ArrayD::from_shape_vec(IxDyn(&shape), payload.to_vec()).expect("length checked"),
        ),
        DType::F32 => TensorData::F32(
            ArrayD::from_shape_vec(
                IxDyn(&shape),
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
            .expect("length checked"),
        ),
    })
}

/// Writes via a sibling temp file and rename so readers never observe a
/// partial tensor.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(bytes).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write(path: &Path, t: &TensorData) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn read(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

pub fn read_f32(path: &Path) -> Result<ArrayD<f32>> {
    match read(path)? {
        TensorData::F32(a) => Ok(a),
        TensorData::U8(_) => Err(Error::format(
            "PGT1 tensor",
            path,
            "expected float32, found uint8",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0u8, 1, 0, 1, 1, 0]).unwrap();
        let bytes = encode_u8(&a).unwrap();
        assert_eq!(
            bytes,
            vec![b'P', b'G', b'T', b'1', 0, 2, 2, 0, 0, 0, 3, 0, 0, 0, 0, 1, 0, 1, 1, 0]
        );
        let f = ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0f32]).unwrap();
        assert_eq!(
            encode_f32(&f).unwrap(),
            vec![b'P', b'G', b'T', b'1', 1, 1, 1, 0, 0, 0, 0, 0, 0x80, 0x3f]
        );
    }

    #[test]
    fn corrupt_buffers_are_rejected() {
        let p = Path::new("x.pgt");
        assert!(decode(b"NOPE", p).is_err());
        assert!(decode(&[b'P', b'G', b'T', b'1', 7, 0], p).is_err());
        let mut ok = encode_u8(&ArrayD::zeros(IxDyn(&[4]))).unwrap();
        ok.pop();
        assert!(matches!(decode(&ok, p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bitwise(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap();
            let back = decode(&encode_f32(&a).unwrap(), Path::new("t")).unwrap();
            match back {
                TensorData::F32(b) => {
                    prop_assert_eq!(b.shape(), a.shape());
                    prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                _ => prop_assert!(false),
            }
        }
    }
}
