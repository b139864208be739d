//! Tensor container format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "MMF1" | version u32 | tensor count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64)
//!             | rank u8 | extents u64 × rank | data offset u64 (absolute)
//! meta_len u32 | meta (UTF-8 key=value text)
//! zero padding to a 64-byte boundary, then the payload section;
//! every tensor's data starts on a 64-byte boundary.
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MMF1";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn elem_size(dtype: u8) -> Result<usize> {
    match dtype {
        0 => Ok(4),
        1 => Ok(8),
        other => Err(Error::Checkpoint(format!("unsupported dtype code {other}"))),
    }
}

pub fn encode_container<F: Scalar>(tensors: &[(&str, &Tensor<F>)], meta: &str) -> Result<Vec<u8>> {
    let esize = elem_size(F::DTYPE_CODE)?;
    let mut header = 12usize;
    for (name, t) in tensors {
        if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor {name:?} cannot be encoded")));
        }
        header += 2 + name.len() + 2 + 8 * t.rank() + 8;
    }
    header += 4 + meta.len();
    let mut offsets = Vec::with_capacity(tensors.len());
    let mut cursor = align(header);
    for (_, t) in tensors {
        offsets.push(cursor);
        cursor = align(cursor + t.numel() * esize);
    }
    let mut out = Vec::with_capacity(cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, t), &off) in tensors.iter().zip(&offsets) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE_CODE);
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&(off as u64).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for ((_, t), &off) in tensors.iter().zip(&offsets) {
        out.resize(off, 0);
        for v in t.data() {
            match F::DTYPE_CODE {
                0 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out.resize(align(out.len()), 0);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a container; stored values are converted to `F`.
pub fn decode_container<F: Scalar>(buf: &[u8]) -> Result<(Vec<(String, Tensor<F>)>, String)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        entries.push((name, dtype, shape, offset));
    }
    let meta_len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("meta block is not UTF-8".into()))?
        .to_string();
    let payload_start = align(r.pos);
    let mut tensors = Vec::with_capacity(count);
    for (name, dtype, shape, offset) in entries {
        let esize = elem_size(dtype)?;
        let n: usize = shape.iter().product();
        if offset % ALIGN != 0 || offset < payload_start {
            return Err(Error::Checkpoint(format!("tensor {name:?} has a misplaced offset")));
        }
        let bytes = buf
            .get(offset..offset + n * esize)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} data out of range")))?;
        let data: Vec<F> = match dtype {
            0 => bytes
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            _ => bytes
                .chunks_exact(8)
                .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((tensors, meta))
}

pub fn write_container<F: Scalar>(
    path: &Path,
    tensors: &[(&str, &Tensor<F>)],
    meta: &str,
) -> Result<()> {
    let bytes = encode_container(tensors, meta)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_container<F: Scalar>(path: &Path) -> Result<(Vec<(String, Tensor<F>)>, String)> {
    decode_container(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_aligned_and_roundtrips() {
        let a = Tensor::<f32>::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f32>::scalar(-0.5);
        let bytes = encode_container(&[("a", &a), ("bee", &b)], "k=v\n").unwrap();
        assert_eq!(&bytes[..4], b"MMF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first entry: name len 1, "a", dtype 0, rank 2
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
        let off = u64::from_le_bytes(bytes[33..41].try_into().unwrap()) as usize;
        assert_eq!(off % 64, 0);
        assert_eq!(&bytes[off..off + 4], &1.0f32.to_le_bytes());
        let (tensors, meta) = decode_container::<f32>(&bytes).unwrap();
        assert_eq!(meta, "k=v\n");
        assert_eq!(tensors[0].0, "a");
        assert!(tensors[0].1.bit_eq(&a));
        assert!(tensors[1].1.bit_eq(&b));
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let a = Tensor::<f32>::ones(&[4]);
        let bytes = encode_container(&[("a", &a)], "").unwrap();
        assert!(decode_container::<f32>(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container::<f32>(&bad).is_err());
        assert!(decode_container::<f32>(&bytes[..bytes.len() - 64]).is_err());
    }
}
