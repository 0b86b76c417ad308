//! Parameter checkpoints: a versioned binary blob holding the layout
//! header and raw doubles, guarded by a config fingerprint so a file
//! never loads into a mismatched network.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learner::{LearnerMode, NetDims};
use crate::nnkernel::{Layout, ParamVector};

const MAGIC: &[u8; 8] = b"SHCKPT01";

fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100000001b3);
    }
}

/// Fingerprint of everything the parameter layout depends on.
pub fn fingerprint(dims: &NetDims, mode: LearnerMode, layout: &Layout) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    fnv1a(&mut h, &(dims.n_agents as u64).to_le_bytes());
    fnv1a(&mut h, &(dims.obs_len as u64).to_le_bytes());
    fnv1a(&mut h, &(dims.state_len as u64).to_le_bytes());
    fnv1a(&mut h, if mode == LearnerMode::Qmix { b"qmix" } else { b"iql" });
    for (name, shape) in layout {
        fnv1a(&mut h, name.as_bytes());
        for &d in shape {
            fnv1a(&mut h, &(d as u64).to_le_bytes());
        }
    }
    h
}

pub fn save(path: impl AsRef<Path>, params: &ParamVector, fp: u64) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + params.values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&fp.to_le_bytes());
    buf.extend_from_slice(&(params.layout.len() as u32).to_le_bytes());
    for (name, shape) in &params.layout {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>, expected_fp: u64) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let fp = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    if fp != expected_fp {
        return Err(Error::Checkpoint(format!(
            "{}: config fingerprint mismatch (file {fp:#x}, expected {expected_fp:#x})",
            path.display()
        )));
    }
    let n_entries = cur.take_u32()? as usize;
    let mut layout = Layout::with_capacity(n_entries);
    let mut total = 0usize;
    for _ in 0..n_entries {
        let name_len = cur.take_u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: bad layout name", path.display())))?;
        let ndims = cur.take_u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.take_u32()? as usize);
        }
        total += shape.iter().product::<usize>();
        layout.push((name, shape));
    }
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after parameter data",
            path.display()
        )));
    }
    Ok(ParamVector { layout, values })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
