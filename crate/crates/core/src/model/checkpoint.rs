//! Checkpoints: `"PCXDCKPT"`, `u32` version, `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name and a tensor dump.

use std::io::{Read, Write};

use super::{GroundingModel, ModelError, Result};
use crate::tensor::{read_dump_from, write_dump_to, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCXDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_dump_to(w, t)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(ModelError::Checkpoint(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("name is not UTF-8".into()))?;
        out.push((name, read_dump_from(r)?));
    }
    Ok(out)
}

impl GroundingModel {
    /// Overwrites parameters from named entries. Every parameter must be
    /// present with its shape; entries the model does not own are returned.
    pub fn load_entries(
        &mut self,
        entries: Vec<(String, Tensor)>,
    ) -> Result<Vec<(String, Tensor)>> {
        let mut extra = Vec::new();
        let mut seen = vec![false; self.store.len()];
        for (name, t) in entries {
            match self.store.id(&name) {
                Ok(id) => {
                    if self.store.get(id).shape() != t.shape() {
                        return Err(ModelError::Checkpoint(format!(
                            "{name}: shape {:?}, expected {:?}",
                            t.shape(),
                            self.store.get(id).shape()
                        )));
                    }
                    self.store.set(id, t)?;
                    seen[id.index()] = true;
                }
                Err(_) => extra.push((name, t)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::Checkpoint(format!(
                "missing {}",
                self.store.entries()[i].name
            )));
        }
        Ok(extra)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_cfg;
    use super::*;

    #[test]
    fn roundtrip_restores_parameters() {
        let a = GroundingModel::new(tiny_cfg(), 1).unwrap();
        let mut b = GroundingModel::new(tiny_cfg(), 2).unwrap();
        let mut entries: Vec<(String, Tensor)> = a
            .store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        entries.push(("loss.v".into(), Tensor::zeros([5])));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        assert_eq!(&buf[..8], b"PCXDCKPT");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, entries);
        let extra = b.load_entries(back).unwrap();
        assert_eq!(extra.len(), 1);
        assert_eq!(
            a.store
                .entries()
                .iter()
                .map(|e| &e.value)
                .collect::<Vec<_>>(),
            b.store
                .entries()
                .iter()
                .map(|e| &e.value)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(read_checkpoint(&mut &b"PCXDCKPX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut m = GroundingModel::new(tiny_cfg(), 1).unwrap();
        assert!(m.load_entries(vec![]).is_err());
    }
}
