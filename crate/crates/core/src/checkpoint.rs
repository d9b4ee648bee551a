//! Binary checkpoint: `MSAW`, version, tensor count, then per tensor the
//! name, rank, extents and little-endian `f32` values, closed by a CRC32 of
//! everything before it.

use std::fs;
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::model::MetaLearner;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSAW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    /// Trainable head parameters followed by the frozen backbone tensors.
    pub fn from_parts(model: &MetaLearner<f32>, backbone: &Backbone<f32>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.params().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        tensors.extend(backbone.named_tensors().into_iter().map(|(n, t)| (n, t.clone())));
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrite `model` and `backbone` weights. Every parameter must be
    /// present with the same shape.
    pub fn apply(&self, model: &mut MetaLearner<f32>, backbone: &mut Backbone<f32>) -> Result<()> {
        for p in model.params_mut().iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} but the configured model expects {:?}; \
                     check the width settings against the run that wrote the checkpoint",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        backbone.load_tensors(|name| self.get(name))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not an MSAW checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// CRC32 of the encoded checkpoint body, as stored in its trailer.
    pub fn crc(&self) -> Result<u32> {
        let bytes = self.encode()?;
        let t = &bytes[bytes.len() - 4..];
        Ok(u32::from_le_bytes([t[0], t[1], t[2], t[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * -0.37)),
                ("a.bias".into(), Tensor::from_vec(&[2], vec![f32::MIN_POSITIVE, 1e30]).unwrap()),
                ("s".into(), Tensor::scalar(0.5)),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn layout_matches_format() {
        let ck = Checkpoint {
            tensors: vec![("ab".into(), Tensor::from_vec(&[1], vec![1.0]).unwrap())],
        };
        let b = ck.encode().unwrap();
        let mut expect = b"MSAW".to_vec();
        for v in [1u32, 1, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(b"ab");
        for v in [1u32, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(&b[..b.len() - 4], &expect[..]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().encode().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("CRC"));
        assert!(Checkpoint::decode(b"NOPE0000000000000000").is_err());
    }
}
