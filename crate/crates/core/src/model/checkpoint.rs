//! Checkpoint file format.
//!
//! ```text
//! offset 0   8 bytes   magic "KSWPCKPT"
//! offset 8   u64 LE    manifest length N in bytes
//! offset 16  N bytes   UTF-8 JSON manifest
//! offset 16+N          blob: f32 LE values, tensors back to back
//! ```
//!
//! Each manifest entry gives a tensor's name, shape and byte offset within
//! the blob. Adapter factors live under the `lora.` prefix.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerClassifier};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, ADAPTER_PREFIX};
use crate::model::FfnLayer;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KSWPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    stage_label: String,
    seed: u64,
    config: ModelConfig,
    lora: Option<LoraMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraMeta {
    rank: usize,
    seed: u64,
    enabled: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A model, its optional adapters and the stage that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransformerClassifier,
    pub adapters: Option<AdapterSet>,
    pub stage_label: String,
    pub seed: u64,
}

pub fn encode_checkpoint(
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    stage_label: &str,
) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor)> = model
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t))
        .collect();
    if let Some(set) = adapters {
        named.extend(set.named_tensors());
    }
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 4;
            entry
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        stage_label: stage_label.to_string(),
        seed: model.config().seed,
        config: *model.config(),
        lora: adapters.map(|s| LoraMeta {
            rank: s.rank,
            seed: s.seed(),
            enabled: s.adapters.iter().map(|a| a.enabled).collect(),
        }),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(n))
        .ok_or_else(|| fail("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| fail(format!("bad manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {} (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let config = manifest.config;
    config.validate().map_err(|e| fail(e.to_string()))?;
    let blob = &bytes[16 + n..];

    // expected shapes for every name this config can carry
    let mut expected: Vec<(String, Vec<usize>)> = config.layout();
    if let Some(meta) = &manifest.lora {
        for layer in FfnLayer::all(&config) {
            let (i, o) = layer.dims(&config);
            let w = layer.weight_name();
            expected.push((format!("{ADAPTER_PREFIX}{w}.a"), vec![i, meta.rank]));
            expected.push((format!("{ADAPTER_PREFIX}{w}.b"), vec![meta.rank, o]));
        }
    }
    if manifest.tensors.len() != expected.len() {
        return Err(fail(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut loaded = Vec::with_capacity(expected.len());
    for entry in &manifest.tensors {
        let Some((_, shape)) = expected.iter().find(|(n, _)| *n == entry.name) else {
            return Err(fail(format!("unknown tensor {}", entry.name)));
        };
        if entry.shape != *shape {
            return Err(fail(format!(
                "tensor {} has shape {:?}, config implies {shape:?}",
                entry.name, entry.shape
            )));
        }
        let len = shape.iter().product::<usize>() * 4;
        let end = entry.offset + len;
        if end > blob.len() {
            return Err(fail(format!("blob truncated inside tensor {}", entry.name)));
        }
        spans.push((entry.offset, end, &entry.name));
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        loaded.push((entry.name.clone(), Tensor::new(shape.clone(), data)?));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(fail(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    let total: usize = spans.iter().map(|(s, e, _)| e - s).sum();
    if total != blob.len() {
        return Err(fail(format!(
            "blob has {} bytes, manifest accounts for {total}",
            blob.len()
        )));
    }

    let (lora, base): (Vec<_>, Vec<_>) = loaded
        .into_iter()
        .partition(|(n, _)| n.starts_with(ADAPTER_PREFIX));
    let model =
        TransformerClassifier::from_tensors(config, base).map_err(|e| fail(e.to_string()))?;
    let adapters = match manifest.lora {
        Some(meta) => {
            let mut lora = lora;
            let mut adapters = Vec::new();
            for (i, target) in FfnLayer::all(&config).into_iter().enumerate() {
                let w = target.weight_name();
                let mut take = |suffix: &str| {
                    let name = format!("{ADAPTER_PREFIX}{w}.{suffix}");
                    let pos = lora.iter().position(|(n, _)| *n == name).expect("validated");
                    lora.swap_remove(pos).1
                };
                let a = take("a");
                let b = take("b");
                adapters.push(LoraAdapter {
                    target,
                    a,
                    b,
                    enabled: meta.enabled.get(i).copied().unwrap_or(true),
                });
            }
            Some(AdapterSet::from_adapters(adapters, meta.seed).map_err(|e| fail(e.to_string()))?)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        adapters,
        stage_label: manifest.stage_label,
        seed: manifest.seed,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    stage_label: &str,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adapters, stage_label)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
