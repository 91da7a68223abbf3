//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic "CCAM" | version u32 (=1) | flags u32 | tensor count u32 |
//!   per tensor: name length u32, UTF-8 name, rank u32, dims u32 each,
//!               raw f32 data
//! ```
//!
//! Flag bit 0 marks a checkpoint written by test-time adaptation. The tensor
//! list carries every learnable parameter plus batch-norm running statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CCAM";
pub const VERSION: u32 = 1;
pub const FLAG_ADAPTED: u32 = 1;

pub struct Checkpoint {
    pub flags: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn is_adapted(&self) -> bool {
        self.flags & FLAG_ADAPTED != 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)], flags: u32) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() - *pos < n {
            return Err(Error::Checkpoint(format!(
                "{}: truncated checkpoint",
                path.display()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let s = take(pos, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    };

    let magic = take(&mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut pos)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let flags = read_u32(&mut pos)?;
    let count = read_u32(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF8 tensor name", path.display())))?;
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        tensors.push((name, tensor));
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint { flags, tensors })
}
