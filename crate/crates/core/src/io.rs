//! Binary tensor files and named-tensor checkpoints.
//!
//! Tensor record ("CFT1"): magic, u8 rank, rank u32 little-endian dims,
//! row-major f64 little-endian payload. Checkpoints ("CFC1") hold a
//! count followed by (u16 name length, name bytes, tensor record)
//! entries sorted by name, so identical state produces identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"CFT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"CFC1";

fn encode_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    let dims = t.dims();
    assert!(dims.len() <= u8::MAX as usize, "rank too large");
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    t.with_data(|data| {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!("truncated: need {n} more bytes"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        if self.take(4)? != TENSOR_MAGIC {
            return self.fail("bad tensor magic, expected CFT1");
        }
        let rank = self.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u32()? as usize;
            if d == 0 {
                return self.fail("zero extent in tensor dims");
            }
            dims.push(d);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(8 * n)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(&dims, data))
    }
}

/// Write a single tensor record.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(&mut bytes, t);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a single tensor record.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after tensor record");
    }
    Ok(t)
}

/// Write a name-keyed checkpoint; entries are sorted by name.
pub fn write_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        assert!(name.len() <= u16::MAX as usize, "name too long");
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        encode_tensor(&mut bytes, t);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint into a name-keyed map.
pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return r.fail("bad checkpoint magic, expected CFC1");
    }
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: r.pos as u64,
                msg: "non-UTF8 entry name".into(),
            })?
            .to_string();
        let t = r.tensor()?;
        if map.insert(name.clone(), t).is_some() {
            return r.fail(format!("duplicate entry '{name}'"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after checkpoint entries");
    }
    Ok(map)
}

/// Copy checkpoint values into a parameter list, requiring an exact
/// name match (extra map entries outside the parameter namespace are
/// listed as unexpected by the caller's filter).
pub fn load_params(params: &[Parameter], entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut missing = Vec::new();
    for p in params {
        match entries.get(&p.name) {
            Some(t) => {
                if t.dims() != p.tensor.dims() {
                    return Err(Error::data(format!(
                        "parameter '{}' has dims {:?} in checkpoint, model expects {:?}",
                        p.name,
                        t.dims(),
                        p.tensor.dims()
                    )));
                }
            }
            None => missing.push(p.name.clone()),
        }
    }
    let names: std::collections::BTreeSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
    let unexpected: Vec<String> = entries
        .keys()
        .filter(|k| !names.contains(k.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::CheckpointMismatch {
            missing,
            unexpected,
        });
    }
    for p in params {
        p.tensor.set_data(entries[&p.name].to_vec());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("io_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(1);
        let t = Tensor::new(&[2, 3, 4], (0..24).map(|_| rng.normal()).collect());
        let path = tmp("t.cft");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        let (a, b) = (t.to_vec(), back.to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tensor_header_layout_is_pinned() {
        let t = Tensor::new(&[1, 2], vec![1.0, -1.0]);
        let path = tmp("hdr.cft");
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CFT1");
        assert_eq!(bytes[4], 2); // rank
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 16);
    }

    #[test]
    fn checkpoint_roundtrip_and_determinism() {
        let mut rng = Rng::new(2);
        let mut entries = BTreeMap::new();
        entries.insert("b.w".to_string(), Tensor::new(&[3], (0..3).map(|_| rng.normal()).collect()));
        entries.insert("a.w".to_string(), Tensor::new(&[2], (0..2).map(|_| rng.normal()).collect()));
        let p1 = tmp("c1.ckpt");
        let p2 = tmp("c2.ckpt");
        write_checkpoint(&p1, &entries).unwrap();
        write_checkpoint(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_checkpoint(&p1).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a.w"].to_vec(), entries["a.w"].to_vec());
    }

    #[test]
    fn load_params_reports_missing_and_unexpected() {
        let p = Parameter::new("layer.w", &[2], vec![0.0; 2]);
        let mut entries = BTreeMap::new();
        entries.insert("other.w".to_string(), Tensor::new(&[2], vec![1.0; 2]));
        match load_params(&[p], &entries) {
            Err(Error::CheckpointMismatch { missing, unexpected }) => {
                assert_eq!(missing, vec!["layer.w".to_string()]);
                assert_eq!(unexpected, vec!["other.w".to_string()]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn load_params_rejects_dim_change() {
        let p = Parameter::new("layer.w", &[2], vec![0.0; 2]);
        let mut entries = BTreeMap::new();
        entries.insert("layer.w".to_string(), Tensor::new(&[3], vec![1.0; 3]));
        assert!(load_params(&[p], &entries).is_err());
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let path = tmp("trunc.ckpt");
        std::fs::write(&path, b"CFC1\x02\x00\x00\x00").unwrap();
        match read_checkpoint(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset >= 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
