//! Binary tensor container shared by checkpoints and sidecar files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   ("LPAE", "LPSR", "LPTN", ...)
//! version    u32
//! count      u32
//! count x {
//!   name_len u16, name (UTF-8)
//!   rank     u8, dims (u32 each)
//!   payload  prod(dims) x f32
//! }
//! crc32      u32       IEEE CRC-32 of every preceding byte
//! ```
//!
//! Values are stored as `f32`; anything already representable in `f32`
//! round-trips exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const VERSION: u32 = 1;

pub const MAGIC_LPAE: [u8; 4] = *b"LPAE";
pub const MAGIC_LPSR: [u8; 4] = *b"LPSR";
pub const MAGIC_TENSOR: [u8; 4] = *b"LPTN";
pub const MAGIC_OPTIM: [u8; 4] = *b"LPOS";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            values,
        }
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor4) -> Self {
        NamedTensor::new(name, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Result<Tensor4> {
        let dims: [usize; 4] = self.dims.as_slice().try_into().map_err(|_| {
            Error::Checkpoint(format!("{}: rank {} is not 4", self.name, self.dims.len()))
        })?;
        Tensor4::from_vec(dims, self.values.clone())
    }
}

pub fn encode(magic: [u8; 4], tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| Error::Checkpoint(format!("{}: rank too large", t.name)))?;
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(Error::Checkpoint(format!(
                "{}: dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{}: dim too large", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
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
}

pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated".into()));
    }
    if bytes[..4] != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        let payload = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(NamedTensor { name, dims, values });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(tensors)
}

/// Writes through a temporary file and a rename so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, magic: [u8; 4], tensors: &[NamedTensor]) -> Result<()> {
    write_atomic(path, &encode(magic, tensors)?)
}

pub fn load(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path)?, magic)
}

/// Single-tensor sidecar file (magic `LPTN`).
pub fn save_tensor(path: impl AsRef<Path>, name: &str, t: &Tensor4) -> Result<()> {
    save(path, MAGIC_TENSOR, &[NamedTensor::from_tensor(name, t)])
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<(String, Tensor4)> {
    let mut tensors = load(path, MAGIC_TENSOR)?;
    if tensors.len() != 1 {
        return Err(Error::Checkpoint(format!(
            "sidecar holds {} tensors, expected 1",
            tensors.len()
        )));
    }
    let t = tensors.pop().unwrap();
    let tensor = t.to_tensor()?;
    Ok((t.name, tensor))
}
