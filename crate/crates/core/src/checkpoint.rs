//! Checkpoint files.
//!
//! One file holds a little-endian `u64` manifest length, the JSON manifest,
//! then a blob of little-endian f32 values. The manifest lists every tensor
//! with its shape and byte offset into the blob, in blob order, plus free-form
//! metadata (model configs, the adapter plan, provenance of a fold).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::model::{AdapterSet, AdapterSpec, Model};
use crate::tensor::Tensor;

pub const FORMAT: &str = "moe-peft-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length in the blob.
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_le_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                bytes: bytes.len(),
            });
            blob.extend(bytes);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("checkpoint shorter than its header".into()))?;
        let len = u64::from_le_bytes(head) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::Format("checkpoint manifest is truncated".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format `{}`", manifest.format)));
        }
        let blob = &bytes[8 + len..];
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.bytes != numel * 4 {
                return Err(Error::Format(format!("tensor `{}` byte length disagrees with shape", e.name)));
            }
            let raw = blob
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the blob", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const BACKBONE_PREFIX: &str = "backbone/";
const ADAPTER_PREFIX: &str = "adapter/";

/// Packs a model; `extra` is merged into the metadata.
pub fn model_checkpoint(model: &Model, extra: serde_json::Value) -> Result<Checkpoint> {
    let mut meta = serde_json::Map::new();
    meta.insert("backbone".into(), to_json(model.backbone.config())?);
    if let Some(a) = &model.adapters {
        meta.insert("plan".into(), to_json(a.spec())?);
    }
    if let serde_json::Value::Object(m) = extra {
        meta.extend(m);
    }
    let mut tensors = BTreeMap::new();
    for (k, v) in model.backbone.weights() {
        tensors.insert(format!("{BACKBONE_PREFIX}{k}"), v.clone());
    }
    if let Some(a) = &model.adapters {
        for (k, v) in a.params() {
            tensors.insert(format!("{ADAPTER_PREFIX}{k}"), v.clone());
        }
    }
    Ok(Checkpoint {
        meta: serde_json::Value::Object(meta),
        tensors,
    })
}

/// Rebuilds a model from a checkpoint written by [`model_checkpoint`].
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let cfg: BackboneConfig = from_json(
        ckpt.meta
            .get("backbone")
            .ok_or_else(|| Error::Format("checkpoint has no backbone config".into()))?,
    )?;
    let mut bb = BTreeMap::new();
    let mut ad = BTreeMap::new();
    for (k, v) in &ckpt.tensors {
        if let Some(n) = k.strip_prefix(BACKBONE_PREFIX) {
            bb.insert(n.to_string(), v.clone());
        } else if let Some(n) = k.strip_prefix(ADAPTER_PREFIX) {
            ad.insert(n.to_string(), v.clone());
        } else {
            return Err(Error::Format(format!("unexpected tensor `{k}` in checkpoint")));
        }
    }
    let backbone = Backbone::from_weights(cfg.clone(), bb)?;
    let adapters = match ckpt.meta.get("plan") {
        Some(p) => {
            let spec: AdapterSpec = from_json(p)?;
            Some(AdapterSet::from_params(spec, &cfg, ad)?)
        }
        None if ad.is_empty() => None,
        None => return Err(Error::Format("adapter tensors without a plan".into())),
    };
    Ok(Model::new(backbone, adapters))
}

fn to_json<S: Serialize>(v: &S) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

fn from_json<D: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<D> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(e.to_string()))
}
