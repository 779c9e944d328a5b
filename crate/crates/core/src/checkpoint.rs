//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MFCV"  u32 version
//! u32 config length, config bytes (UTF-8 "key=value" lines)
//! u32 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank x u64 extents, f64 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MfcVae, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MFCV";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &MfcVae) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config: String = model
        .config()
        .to_pairs()
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<MfcVae> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let text = r.utf8(len)?;
    let pairs = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad config line '{l}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = MfcVae::new(ModelConfig::from_pairs(&pairs)?)?;
    let count = r.u32()? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, model expects {}",
            slots.len()
        )));
    }
    let mut seen = vec![false; slots.len()];
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.utf8(n)?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let idx = slots
            .iter()
            .position(|(s, _)| *s == name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}'")))?;
        if seen[idx] {
            return Err(Error::Format(format!("tensor '{name}' appears twice")));
        }
        seen[idx] = true;
        let target = &mut slots[idx].1;
        if target.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        let bytes = r.take(target.len() * 8)?;
        for (v, chunk) in target.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    drop(slots);
    Ok(model)
}

pub fn save(model: &MfcVae, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MfcVae> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> MfcVae {
        let mut cfg = ModelConfig::mnist();
        cfg.input_dim = 9;
        cfg.widths = vec![4, 3];
        cfg.clusters = vec![2, 3];
        cfg.z_dims = vec![2, 1];
        cfg.architecture = Architecture::Ladder;
        let mut m = MfcVae::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (_, t) in m.named_tensors_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random::<f64>() * 1e3 - 1.7e-300);
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((na, a), (nb, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(na, &nb);
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }
}
