//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FDWI" | version u32 | header_len u32 | header (TOML)
//! count u32 | count × tensor | crc32 u32
//! tensor = name_len u32 | name | rank u32 | rank × dim u32 | f32 data
//! ```
//!
//! The TOML header holds the model configuration, the pretrained prefixes
//! and the names of frozen tensors. Tensor kinds follow from the
//! configuration. The CRC covers every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamStore, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDWI";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    pretrained: Vec<String>,
    #[serde(default)]
    frozen: Vec<String>,
    model: ModelConfig,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let header = toml::to_string(&Header {
        pretrained: model.pretrained.clone(),
        frozen: model
            .store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect(),
        model: model.config.clone(),
    })
    .expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, header.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header: Header =
        toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflows".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(Parameter::new(name, Tensor::new(&shape, data)?))?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    let mut model = Model::from_store(header.model, store)?;
    for name in &header.frozen {
        model
            .store
            .by_name_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("frozen tensor `{name}` does not exist")))?
            .frozen = true;
    }
    model.pretrained = header.pretrained;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
