//! Binary checkpoint container.
//!
//! Layout (little endian): `NTRD`, `u32` version, `u64`-prefixed JSON
//! metadata, `u32` tensor count, then per tensor a `u32`-prefixed name,
//! `u32` rank, `u64` dims and `f64` values. An optional optimizer section
//! follows: `u8` flag, `u64` step, then first and second moments for every
//! tensor in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::corpus::{Catalog, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::recommender::KnowledgeGraph;

pub const MAGIC: &[u8; 4] = b"NTRD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    config_hash: String,
    vocab: Vocabulary,
    catalog: Catalog,
    kg: KnowledgeGraph,
    dialogue_items: Vec<usize>,
    state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub kg: KnowledgeGraph,
    pub dialogue_items: Vec<usize>,
    pub state: TrainState,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            vocab: self.vocab.clone(),
            catalog: self.catalog.clone(),
            kg: self.kg.clone(),
            dialogue_items: self.dialogue_items.clone(),
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                if o.first.len() != self.params.len() || o.second.len() != self.params.len() {
                    return Err(Error::contract("optimizer moments do not match the tensor list"));
                }
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for (m, v) in o.first.iter().zip(&o.second) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("missing NTRD magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let json_len = r.len_u64()?;
        let meta: Meta =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
            let data = r.f64s(numel)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut first = Vec::with_capacity(params.len());
                let mut second = Vec::with_capacity(params.len());
                for (_, t) in &params {
                    first.push(r.f64s(t.numel())?);
                    second.push(r.f64s(t.numel())?);
                }
                Some(OptimizerSnapshot { step, first, second })
            }
            f => return Err(Error::Corrupt(format!("unknown optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: meta.config,
            config_hash: meta.config_hash,
            vocab: meta.vocab,
            catalog: meta.catalog,
            kg: meta.kg.restored(),
            dialogue_items: meta.dialogue_items,
            state: meta.state,
            params,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("length overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corrupt("tensor too large".into()))?,
        )?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt("non-finite value in tensor data".into()));
        }
        Ok(out)
    }
}
