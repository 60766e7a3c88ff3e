//! Named-tensor binary format, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "FBGCKPT\0"
//! version  u32      FORMAT_VERSION
//! header   u64 length, then UTF-8 text (JSON for model checkpoints)
//! count    u32
//! tensor*  u32 name length, name bytes, u32 ndim, u64 dims[ndim],
//!          f64 data[product(dims)]
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"FBGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SerialError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("malformed tensor file: {0}")]
    Malformed(String),
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    header: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn u32_le<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_le<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// Guards against absurd allocations from corrupt length fields.
const MAX_ELEMS: u64 = 1 << 32;

fn bytes<R: Read>(r: &mut R, n: u64, what: &str) -> Result<Vec<u8>, SerialError> {
    if n > MAX_ELEMS {
        return Err(SerialError::Malformed(format!("{what} length {n}")));
    }
    let mut b = vec![0; n as usize];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<(String, Vec<(String, Tensor)>), SerialError> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SerialError::BadMagic);
    }
    let version = u32_le(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(SerialError::Version(version));
    }
    let n = u64_le(&mut r)?;
    let header = String::from_utf8(bytes(&mut r, n, "header")?)
        .map_err(|_| SerialError::Malformed("header is not UTF-8".into()))?;
    let count = u32_le(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let n = u32_le(&mut r)?;
        let name = String::from_utf8(bytes(&mut r, n as u64, "name")?)
            .map_err(|_| SerialError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = u32_le(&mut r)?;
        if ndim > 8 {
            return Err(SerialError::Malformed(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| u64_le(&mut r)).collect::<io::Result<Vec<u64>>>()?;
        let elems = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).filter(|&e| e <= MAX_ELEMS);
        let elems = elems.ok_or_else(|| SerialError::Malformed(format!("{name}: shape {shape:?}")))?;
        let raw = bytes(&mut r, elems * 8, "tensor")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let shape = shape.into_iter().map(|d| d as usize).collect();
        let t = Tensor::new(shape, data).map_err(|e| SerialError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::matrix(2, 3, vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, -0.0, 3.0]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, "{\"k\":1}", [("a", &a), ("b.w", &b)]).unwrap();
        let (h, ts) = read_tensors(&buf[..]).unwrap();
        assert_eq!(h, "{\"k\":1}");
        assert_eq!(ts[0].0, "a");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ts[0].1), bits(&a));
        assert_eq!(ts[1].1, b);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(matches!(read_tensors(&b"NOTCKPT\0\x01\0\0\0"[..]), Err(SerialError::BadMagic)));
        let mut buf = Vec::new();
        write_tensors(&mut buf, "", [("a", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(&buf[..]), Err(SerialError::Io(_))));
        let mut v2 = Vec::new();
        v2.extend_from_slice(MAGIC);
        v2.extend_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_tensors(&v2[..]), Err(SerialError::Version(2))));
    }
}
