//! Single-file checkpoint archive: JSON metadata followed by named f64
//! arrays, sorted by name so identical states produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::ParamStore;

use super::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: &str = "p2p-ckpt-v1";
const MAGIC: &[u8; 8] = b"P2PCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub model: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    /// SHA-256 of the dataset manifest the model was trained on.
    pub manifest_hash: Option<String>,
    /// Hash of the producing run configuration.
    pub config_hash: Option<String>,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: u64,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            model,
            step: 0,
            epoch: 0,
            manifest_hash: None,
            config_hash: None,
            optimizer: None,
            optimizer_step: 0,
        }
    }
}

fn write_array(out: &mut Vec<u8>, name: &str, arr: &ArrayD<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(arr.ndim() as u8);
    for &d in arr.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_array(r: &mut Reader) -> Result<(String, ArrayD<f64>)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("invalid array name".into()))?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let len: usize = shape.iter().product();
    let bytes = r.take(len * 8)?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))?;
    Ok((name, arr))
}

/// Serialize model (and optionally optimizer) state to bytes.
pub fn to_bytes(model: &Model, meta: &CheckpointMeta, opt: Option<&AdamW>) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.version = CHECKPOINT_VERSION.to_string();
    meta.model = model.cfg.clone();
    if let Some(o) = opt {
        meta.optimizer = Some(o.cfg.clone());
        meta.optimizer_step = o.step;
    }
    let meta_json = serde_json::to_vec(&meta)?;

    let mut entries: Vec<(String, &ArrayD<f64>)> = Vec::new();
    for id in model.params.ids() {
        entries.push((format!("p/{}", model.params.name(id)), model.params.value(id)));
    }
    if let Some(o) = opt {
        for id in model.params.ids() {
            entries.push((format!("m/{}", model.params.name(id)), &o.m[id.0]));
            entries.push((format!("v/{}", model.params.name(id)), &o.v[id.0]));
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, arr) in entries {
        write_array(&mut out, &name, arr);
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model, meta: &CheckpointMeta, opt: Option<&AdamW>) -> Result<()> {
    let bytes = to_bytes(model, meta, opt)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Load a checkpoint; reconstructs the model and, when present, the
/// optimizer state.
pub fn load(path: &Path) -> Result<(Model, CheckpointMeta, Option<AdamW>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta, Option<AdamW>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version '{}' (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let n_arrays = r.u64()? as usize;
    let mut arrays: std::collections::BTreeMap<String, ArrayD<f64>> = Default::default();
    for _ in 0..n_arrays {
        let (name, arr) = read_array(&mut r)?;
        arrays.insert(name, arr);
    }

    let mut model = Model::new(meta.model.clone(), 0)?;
    fill_store(&mut model.params, &arrays, "p/")?;

    let opt = if let Some(cfg) = &meta.optimizer {
        let mut o = AdamW::new(&model.params, cfg.clone());
        o.step = meta.optimizer_step;
        for id in model.params.ids() {
            let name = model.params.name(id).to_string();
            o.m[id.0] = arrays
                .get(&format!("m/{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array m/{name}")))?;
            o.v[id.0] = arrays
                .get(&format!("v/{name}"))
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array v/{name}")))?;
        }
        Some(o)
    } else {
        None
    };
    Ok((model, meta, opt))
}

fn fill_store(
    store: &mut ParamStore,
    arrays: &std::collections::BTreeMap<String, ArrayD<f64>>,
    prefix: &str,
) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let key = format!("{prefix}{}", store.name(id));
        let arr = arrays
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))?;
        if arr.shape() != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {key}: {:?} vs {:?}",
                arr.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = arr.clone();
    }
    Ok(())
}
