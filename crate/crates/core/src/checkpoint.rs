//! Versioned checkpoint container.
//!
//! Layout:
//!
//! ```text
//! SETRISK-CKPT 1\n
//! {"meta": {...}, "tensors": [{"name": "...", "shape": [..]}, ...]}\n
//! <f64 little-endian payload, tensors concatenated in header order>
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read round trip is
//! bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, SetClassifier};
use crate::tensor::Tensor;

const MAGIC: &str = "SETRISK-CKPT 1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header)
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 2 + payload);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(Error::Data("not a setrisk checkpoint (bad magic)".into()));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("checkpoint header missing".into()))?;
        let header: Header = serde_json::from_slice(header)
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let payload = lines.next().unwrap_or_default();
        let needed: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 8)
            .sum();
        if payload.len() != needed {
            return Err(Error::Data(format!(
                "checkpoint payload is {} bytes, header describes {}",
                payload.len(),
                needed
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset += 8 * n;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }

    /// Removes and returns every tensor whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let (hit, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.tensors)
            .into_iter()
            .partition(|(n, _)| n.starts_with(prefix));
        self.tensors = keep;
        hit.into_iter()
            .map(|(n, t)| (n[prefix.len()..].to_string(), t))
            .collect()
    }
}

pub(crate) fn prefixed(prefix: &str, params: &ModelParams) -> Vec<(String, Tensor)> {
    params
        .named()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

pub fn model_container(model: &SetClassifier) -> Result<Container> {
    let config = serde_json::to_value(&model.config)
        .map_err(|e| Error::Data(format!("model config: {e}")))?;
    Ok(Container {
        meta: serde_json::json!({ "kind": "model", "config": config }),
        tensors: prefixed("param/", &model.params),
    })
}

pub fn model_from_container(mut c: Container) -> Result<SetClassifier> {
    let config: ModelConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Data("checkpoint has no model config".into()))?,
    )
    .map_err(|e| Error::Data(format!("model config: {e}")))?;
    config.validate()?;
    let params = ModelParams::from_named(&config, c.take_prefixed("param/"))?;
    Ok(SetClassifier::new(config, params))
}

pub fn save_model(path: &Path, model: &SetClassifier) -> Result<()> {
    model_container(model)?.write(path)
}

pub fn load_model(path: &Path) -> Result<SetClassifier> {
    model_from_container(Container::read(path)?)
}
