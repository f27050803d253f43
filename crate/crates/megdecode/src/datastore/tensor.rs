//! Flat binary tensor files (`.megt`).
//!
//! Layout: magic `MEGT`, version u32, dtype code u32 (1 = f32), ndim u32 in
//! 1..=4, then ndim u64 dimensions, then the row-major f32 payload. All
//! integers little-endian. Values are stored as f32 regardless of the f64
//! in-memory pipeline; round-trips are exact for f32-representable data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MegError, Result};

pub const MAGIC: [u8; 4] = *b"MEGT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const MAX_NDIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub dtype: u32,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(MegError::Invalid(format!(
            "tensor rank must be 1..={MAX_NDIM}, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(MegError::Invalid(format!(
            "tensor dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    check_shape(shape)?;
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return Err(MegError::Shape(format!(
            "tensor payload has {} values but shape {shape:?} needs {expect}",
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tensor_f64(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    write_tensor(path, shape, &narrowed)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| MegError::Format(format!("tensor file truncated reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| MegError::Format(format!("tensor file truncated reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_header_from<R: Read>(r: &mut R) -> Result<TensorHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| MegError::Format("tensor file truncated reading magic".into()))?;
    if magic != MAGIC {
        return Err(MegError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(MegError::Format(format!(
            "unsupported tensor version {version}, expected {VERSION}"
        )));
    }
    let dtype = read_u32(r, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(MegError::Format(format!(
            "unsupported dtype code {dtype}, expected {DTYPE_F32} (f32)"
        )));
    }
    let ndim = read_u32(r, "ndim")? as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(MegError::Format(format!(
            "tensor rank must be 1..={MAX_NDIM}, got {ndim}"
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = read_u64(r, &format!("dimension {i}"))? as usize;
        if d == 0 {
            return Err(MegError::Format(format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    Ok(TensorHeader { version, dtype, shape })
}

pub fn read_header(path: &Path) -> Result<TensorHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    let n = header.len();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| {
        MegError::Format(format!(
            "tensor payload truncated: shape {:?} needs {n} values",
            header.shape
        ))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(MegError::Format(
            "trailing bytes after tensor payload".into(),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, data))
}

pub fn read_tensor_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let (shape, data) = read_tensor(path)?;
    Ok((shape, data.iter().map(|&v| v as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_3d() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        let shape = vec![2, 3, 4];
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        write_tensor(&path, &shape, &data).unwrap();
        let (rs, rd) = read_tensor(&path).unwrap();
        assert_eq!(rs, shape);
        assert_eq!(rd, data);
    }

    #[test]
    fn header_matches_written_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        write_tensor(&path, &[5, 7], &vec![0.0; 35]).unwrap();
        let h = read_header(&path).unwrap();
        assert_eq!(h.version, VERSION);
        assert_eq!(h.dtype, DTYPE_F32);
        assert_eq!(h.shape, vec![5, 7]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.megt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_tensor(&path) {
            Err(MegError::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        write_tensor(&path, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_tensor(&path), Err(MegError::Format(_))));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        write_tensor(&path, &[2], &[1.0, 2.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(MegError::Format(_))));
    }

    #[test]
    fn rejects_rank_5_and_zero_dims() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        assert!(matches!(
            write_tensor(&path, &[1, 1, 1, 1, 1], &[0.0]),
            Err(MegError::Invalid(_))
        ));
        assert!(matches!(
            write_tensor(&path, &[3, 0], &[]),
            Err(MegError::Invalid(_))
        ));
    }

    #[test]
    fn rejects_payload_shape_disagreement() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.megt");
        assert!(matches!(
            write_tensor(&path, &[3, 3], &[0.0; 8]),
            Err(MegError::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(values in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("p.megt");
            let shape = vec![values.len()];
            write_tensor(&path, &shape, &values).unwrap();
            let (rs, rd) = read_tensor(&path).unwrap();
            prop_assert_eq!(rs, shape);
            prop_assert_eq!(rd, values);
        }

        #[test]
        fn file_bytes_round_trip(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..32)) {
            // read → write reproduces the original file byte for byte
            let dir = tempdir().unwrap();
            let a = dir.path().join("a.megt");
            let b = dir.path().join("b.megt");
            write_tensor(&a, &[values.len()], &values).unwrap();
            let (shape, data) = read_tensor(&a).unwrap();
            write_tensor(&b, &shape, &data).unwrap();
            prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }
}
