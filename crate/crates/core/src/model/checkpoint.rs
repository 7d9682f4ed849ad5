//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CRASHCHAT-CKPT\n"   version u32   section count u32
//! section: name_len u32, name, payload_len u64, payload
//! ```
//!
//! Sections are `meta` (JSON), `base`, `lc` and `pc`. Tensor payloads are a
//! count u32 followed by `name_len u32, name, ndim u32, dims u64…, f64 data`.
//! Each adapter block can be decoded without touching the others.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::weights::{AdapterSet, BaseWeights, TensorReader};
use super::{CrashChat, ModelError};
use crate::schema::{TaskGroup, TaskId};

const MAGIC: &[u8] = b"CRASHCHAT-CKPT\n";
const VERSION: u32 = 1;

/// Which training produced an adapter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum BlockRole {
    Init,
    Independent { task: TaskId },
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub lc_role: BlockRole,
    pub pc_role: BlockRole,
    /// Hash of the experiment config that produced this file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CheckpointMeta {
    pub fn role(&self, group: TaskGroup) -> BlockRole {
        match group {
            TaskGroup::Lc => self.lc_role,
            TaskGroup::Pc => self.pc_role,
        }
    }

    pub fn set_role(&mut self, group: TaskGroup, role: BlockRole) {
        match group {
            TaskGroup::Lc => self.lc_role = role,
            TaskGroup::Pc => self.pc_role = role,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: CrashChat,
}

type Records = Vec<(String, Vec<usize>, Vec<f64>)>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn encode_tensors(tensors: &[(String, Vec<usize>, &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, tensors.len() as u32);
    for (name, shape, data) in tensors {
        put_str(&mut out, name);
        put_u32(&mut out, shape.len() as u32);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("unexpected end of archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

fn decode_tensors(buf: &[u8]) -> Result<Records, ModelError> {
    let mut c = Cursor { buf, pos: 0 };
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = c.take(n * 8)?;
        let data = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, shape, data));
    }
    Ok(out)
}

fn sections(buf: &[u8]) -> Result<Vec<(String, &[u8])>, ModelError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint archive".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = c.string()?;
        let len = c.u64()? as usize;
        out.push((name, c.take(len)?));
    }
    Ok(out)
}

fn section<'a>(secs: &[(String, &'a [u8])], name: &str) -> Result<&'a [u8], ModelError> {
    secs.iter()
        .find(|(n, _)| n == name)
        .map(|(_, b)| *b)
        .ok_or_else(|| ModelError::Checkpoint(format!("missing section `{name}`")))
}

fn meta_of(secs: &[(String, &[u8])]) -> Result<CheckpointMeta, ModelError> {
    serde_json::from_slice(section(secs, "meta")?).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn new(model: CrashChat) -> Self {
        let meta = CheckpointMeta {
            backbone: model.config().clone(),
            lc_role: BlockRole::Init,
            pc_role: BlockRole::Init,
            config_hash: None,
        };
        Self { meta, model }
    }

    /// Serialized frozen weights, exactly as stored in the archive.
    pub fn base_bytes(&self) -> Vec<u8> {
        encode_tensors(&self.model.base().named_tensors())
    }

    /// Serialized projector and adapter of one group, exactly as stored.
    pub fn block_bytes(&self, group: TaskGroup) -> Vec<u8> {
        encode_tensors(&self.model.adapter(group).named_tensors())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let secs: [(&str, Vec<u8>); 4] = [
            ("meta", meta),
            ("base", self.base_bytes()),
            ("lc", self.block_bytes(TaskGroup::Lc)),
            ("pc", self.block_bytes(TaskGroup::Pc)),
        ];
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u32(&mut out, secs.len() as u32);
        for (name, payload) in &secs {
            put_str(&mut out, name);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let secs = sections(buf)?;
        let meta = meta_of(&secs)?;
        let cfg = &meta.backbone;
        let base = BaseWeights::from_tensors(cfg, TensorReader::new(decode_tensors(section(&secs, "base")?)?))?;
        let lc =
            AdapterSet::from_tensors(cfg, TaskGroup::Lc, TensorReader::new(decode_tensors(section(&secs, "lc")?)?))?;
        let pc =
            AdapterSet::from_tensors(cfg, TaskGroup::Pc, TensorReader::new(decode_tensors(section(&secs, "pc")?)?))?;
        let model = CrashChat::from_parts(cfg.clone(), base, lc, pc)?;
        Ok(Self { meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // Write then rename, so an interrupted save never leaves a truncated file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn read_meta(path: &Path) -> Result<CheckpointMeta, ModelError> {
        meta_of(&sections(&fs::read(path)?)?)
    }

    /// Decodes a single adapter block, leaving the base and the other block alone.
    pub fn load_block(path: &Path, group: TaskGroup) -> Result<(CheckpointMeta, AdapterSet), ModelError> {
        let buf = fs::read(path)?;
        let secs = sections(&buf)?;
        let meta = meta_of(&secs)?;
        let records = decode_tensors(section(&secs, group.as_str())?)?;
        let set = AdapterSet::from_tensors(&meta.backbone, group, TensorReader::new(records))?;
        Ok((meta, set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_and_block_swap() {
        let dir = tempfile::tempdir().unwrap();
        let model = CrashChat::new(BackboneConfig::default()).unwrap();
        let mut ck = Checkpoint::new(model.clone());
        ck.meta.pc_role = BlockRole::Homogeneous;
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());

        let (meta, pc) = Checkpoint::load_block(&path, TaskGroup::Pc).unwrap();
        assert_eq!(meta.pc_role, BlockRole::Homogeneous);
        assert_eq!(&pc, model.adapter(TaskGroup::Pc));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let model = CrashChat::new(BackboneConfig::default()).unwrap();
        let bytes = Checkpoint::new(model).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
