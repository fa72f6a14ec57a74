//! Binary checkpoint archive: a JSON metadata block followed by named `f32`
//! tensors (`<layer>.<param>`), optionally with Adam moment estimates under
//! `optim.m.<name>` / `optim.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{build_embedder, Arch, DenseEmbedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::trainer::{EpochStats, TrainState};

const MAGIC: &[u8; 8] = b"DVECKPT1";

/// One stage of the training history that produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceStep {
    pub stage: String,
    pub dataset_id: String,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Arch,
    /// Embedding dimension `C`.
    pub embed_dim: usize,
    pub input_size: usize,
    pub width_mult: f64,
    pub init_seed: u64,
    /// Epochs completed in the current stage.
    pub train_epochs: usize,
    pub dataset_id: String,
    #[serde(default)]
    pub provenance: Vec<ProvenanceStep>,
    #[serde(default)]
    pub history: Vec<EpochStats>,
    #[serde(default)]
    pub adam: Option<AdamState>,
    /// Free-form copy of the configuration the run used.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
}

impl CheckpointMeta {
    pub fn for_model(model: &DenseEmbedder, dataset_id: impl Into<String>) -> Self {
        Self {
            arch: model.spec.arch,
            embed_dim: model.spec.out_dim,
            input_size: model.spec.input_size,
            width_mult: model.spec.width_mult,
            init_seed: model.seed,
            train_epochs: 0,
            dataset_id: dataset_id.into(),
            provenance: Vec::new(),
            history: Vec::new(),
            adam: None,
            config: None,
        }
    }

    pub fn spec(&self) -> EmbedderSpec {
        EmbedderSpec { input_size: self.input_size, width_mult: self.width_mult, ..EmbedderSpec::new(self.arch, self.embed_dim) }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DenseEmbedder,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    /// Training state to resume from; the optimizer is fresh when none was
    /// stored.
    pub fn into_state(self, adam: AdamConfig) -> TrainState {
        TrainState {
            model: self.model,
            optimizer: self.optimizer.unwrap_or_else(|| Adam::new(adam)),
            epochs_done: self.meta.train_epochs,
            history: self.meta.history,
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(out, name);
    out.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend((*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

/// Write `model` (and optionally the optimizer moments) to `path`. The file
/// is written next to its destination and renamed into place.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &DenseEmbedder, optimizer: Option<&Adam>) -> Result<()> {
    let mut meta = meta.clone();
    meta.adam = optimizer.filter(|o| !o.first.is_empty()).map(|o| AdamState { config: o.config, step: o.step });
    let json = serde_json::to_vec(&meta)?;
    let params = model.params();
    let mut entries: Vec<(String, Vec<usize>, &[f32])> =
        params.iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.as_slice())).collect();
    if let (Some(opt), true) = (optimizer, meta.adam.is_some()) {
        let trainable: Vec<_> = params.iter().filter(|p| p.trainable).collect();
        if trainable.len() != opt.first.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for (p, (m, v)) in trainable.iter().zip(opt.first.iter().zip(&opt.second)) {
            entries.push((format!("optim.m.{}", p.name), p.shape.clone(), m));
            entries.push((format!("optim.v.{}", p.name), p.shape.clone(), v));
        }
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, shape, data) in &entries {
        put_tensor(&mut out, name, shape, data);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
}

type Entries = HashMap<String, (Vec<usize>, Vec<f32>)>;

fn read_entries(r: &mut Reader) -> Result<Entries> {
    let count = r.u32()? as usize;
    let mut entries = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if entries.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    Ok(entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let meta_len = r.usize()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let mut entries = read_entries(&mut r)?;
    let mut model = build_embedder(&meta.spec(), meta.init_seed)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for p in model.params_mut() {
        let (shape, data) =
            entries.remove(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
        if shape != p.shape {
            return Err(Error::Checkpoint(format!("`{}` has shape {:?}, expected {:?}", p.name, shape, p.shape)));
        }
        p.value = data;
        if p.trainable && meta.adam.is_some() {
            for (prefix, dst) in [("optim.m.", &mut first), ("optim.v.", &mut second)] {
                let key = format!("{prefix}{}", p.name);
                let (s, d) = entries.remove(&key).ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if s != p.shape {
                    return Err(Error::Checkpoint(format!("`{key}` has the wrong shape")));
                }
                dst.push(d);
            }
        }
    }
    if let Some(extra) = entries.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected entry `{extra}`")));
    }
    let optimizer = meta.adam.map(|s| Adam { config: s.config, step: s.step, first, second });
    Ok(Checkpoint { meta, model, optimizer })
}
