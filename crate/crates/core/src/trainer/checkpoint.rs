//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `SFCK`, version u32, tensor count u32, then
//! per tensor a u16 name length, the UTF-8 name, component tag u8, trainable
//! u8, rank u8, u64 extents and f64 values. The optimizer block repeats the
//! tensor encoding (u32 count, `m/<name>` and `v/<name>` entries). A u32
//! length and UTF-8 `key=value` lines close the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Component, ModelConfig, ParameterStore};
use crate::nn::{Parameter, Tensor};
use crate::trainer::Adam;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

/// Model parameters plus everything needed to resume or audit a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub optimizer: Option<Adam>,
    /// 1-based checkpoint index within its run; 0 for a fresh model.
    pub index: usize,
    pub dev_ppl: f64,
    pub rng_state: String,
    /// Free-form `key=value` entries (codec, data hashes, run settings).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, store: ParameterStore) -> Self {
        Checkpoint {
            config,
            store,
            optimizer: None,
            index: 0,
            dev_ppl: f64::INFINITY,
            rng_state: String::new(),
            meta: BTreeMap::new(),
        }
    }

    /// SHA-256 over the model configuration and the `codec.*` entries.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_kv().as_bytes());
        for (k, v) in self.meta.range("codec.".to_string()..) {
            if !k.starts_with("codec.") {
                break;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex(&h.finalize())
    }

    fn meta_text(&self) -> Result<String> {
        let mut all: BTreeMap<String, String> = self.meta.clone();
        for line in self.config.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                all.insert(k.to_string(), v.to_string());
            }
        }
        all.insert("checkpoint".into(), self.index.to_string());
        all.insert("dev_ppl".into(), self.dev_ppl.to_string());
        all.insert("rng".into(), self.rng_state.clone());
        all.insert("config_hash".into(), self.config_hash());
        if let Some(a) = &self.optimizer {
            all.insert("adam.step".into(), a.step.to_string());
        }
        let mut s = String::new();
        for (k, v) in &all {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Invalid(format!("metadata entry {k:?} cannot be stored")));
            }
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            write_tensor(&mut out, &p.name, p.component, p.trainable, &p.value)?;
        }
        match &self.optimizer {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(adam) => {
                adam.check_layout(&self.store)?;
                out.extend_from_slice(&(2 * self.store.len() as u32).to_le_bytes());
                for (id, p) in self.store.iter() {
                    write_tensor(&mut out, &format!("m/{}", p.name), p.component, p.trainable, &adam.m[id.0])?;
                    write_tensor(&mut out, &format!("v/{}", p.name), p.component, p.trainable, &adam.v[id.0])?;
                }
            }
        }
        let meta = self.meta_text()?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..n {
            let t = r.tensor()?;
            let mut p = Parameter::new(t.name, t.component, t.value);
            p.trainable = t.trainable;
            store.insert(p)?;
        }
        let n_opt = r.u32()? as usize;
        let mut moments = BTreeMap::new();
        for _ in 0..n_opt {
            let t = r.tensor()?;
            moments.insert(t.name, t.value);
        }
        let meta_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after metadata".into()));
        }
        let mut meta = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let take = |meta: &mut BTreeMap<String, String>, k: &str| {
            meta.remove(k).ok_or_else(|| Error::Format(format!("metadata lacks {k}")))
        };
        let config = ModelConfig::from_kv(|k| meta.get(k).cloned())?;
        meta.retain(|k, _| !k.starts_with("model."));
        let index = take(&mut meta, "checkpoint")?
            .parse()
            .map_err(|_| Error::Format("bad checkpoint index".into()))?;
        let dev_ppl = take(&mut meta, "dev_ppl")?
            .parse()
            .map_err(|_| Error::Format("bad dev_ppl".into()))?;
        let rng_state = take(&mut meta, "rng")?;
        let stored_hash = take(&mut meta, "config_hash")?;
        let step = meta.remove("adam.step");

        let optimizer = if n_opt == 0 {
            None
        } else {
            if n_opt != 2 * n {
                return Err(Error::Format("optimizer block does not cover every tensor".into()));
            }
            let mut adam = Adam::new(&store);
            for (id, p) in store.iter() {
                let mut get = |prefix: &str| {
                    moments
                        .remove(&format!("{prefix}/{}", p.name))
                        .ok_or_else(|| Error::Format(format!("missing moment for {}", p.name)))
                };
                adam.m[id.0] = get("m")?;
                adam.v[id.0] = get("v")?;
            }
            adam.step = step
                .ok_or_else(|| Error::Format("metadata lacks adam.step".into()))?
                .parse()
                .map_err(|_| Error::Format("bad adam.step".into()))?;
            adam.check_layout(&store)?;
            Some(adam)
        };
        let ckpt = Checkpoint {
            config,
            store,
            optimizer,
            index,
            dev_ppl,
            rng_state,
            meta,
        };
        if ckpt.config_hash() != stored_hash {
            return Err(Error::Format("config hash does not match checkpoint contents".into()));
        }
        crate::model::Seq2Seq::new(&ckpt.config, &ckpt.store)?;
        Ok(ckpt)
    }

    /// Writes the checkpoint, creating missing parent directories.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, c: Component, trainable: bool, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(c.tag());
    out.push(u8::from(trainable));
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct RawTensor {
    name: String,
    component: Component,
    trainable: bool,
    value: Tensor,
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
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<RawTensor> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = self.u8()?;
        let component =
            Component::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown component tag {tag}")))?;
        let trainable = match self.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad trainable flag {b}"))),
        };
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Format(format!("tensor {name} is truncated")))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        Ok(RawTensor {
            name,
            component,
            trainable,
            value,
        })
    }
}
