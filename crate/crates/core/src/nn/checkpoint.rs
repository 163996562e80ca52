//! Binary tensor container:
//!
//! ```text
//! "BINCKPT1" | u32 version = 1 | u32 count |
//!   count × ( u16 name_len | name (UTF-8) | u8 rank | rank × u32 dim | f64 payload )
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BINCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        body.extend_from_slice(&len.to_le_bytes());
        body.extend_from_slice(bytes);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        body.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large for {name}")))?;
            body.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let mut out = Vec::with_capacity(16 + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);

    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic { what: "checkpoint", expected: "BINCKPT1" });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload =
            r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?, "payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    write_tensors(path, store.iter())
}

/// Loads values into `store`. Names and shapes must match exactly; on any
/// error the store is left untouched.
pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = read_tensors(path)?;
    let mut seen = HashSet::new();
    for (name, t) in &tensors {
        let Some(existing) = store.by_name(name) else {
            return Err(Error::UnexpectedTensor(name.clone()));
        };
        if existing.shape() != t.shape() {
            return Err(Error::TensorShape {
                name: name.clone(),
                stored: t.shape().to_vec(),
                expected: existing.shape().to_vec(),
            });
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    if let Some(missing) = store.names().into_iter().find(|n| !seen.contains(n)) {
        return Err(Error::MissingTensor(missing.to_string()));
    }
    for (name, t) in tensors {
        let id = store.id(&name).unwrap();
        let target = store.get_mut(id);
        target.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
