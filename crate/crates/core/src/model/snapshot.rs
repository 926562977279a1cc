use super::TransformerClassifier;
use crate::error::Result;
use crate::lora::{effective_weight, AdapterSet};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub depth: usize,
    pub weights: Tensor,
}

/// Effective weights of every layer tensor at the end of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSnapshot {
    pub label: String,
    pub entries: Vec<SnapshotEntry>,
}

impl StageSnapshot {
    pub fn entry(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Deep copy of the model's effective weights (base plus adapter delta).
pub fn snapshot_weights(
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    label: &str,
) -> Result<StageSnapshot> {
    let entries = model
        .named_tensors()
        .enumerate()
        .map(|(depth, (name, t))| {
            let weights = match adapters.and_then(|s| s.adapter_for_weight(name)) {
                Some(a) => effective_weight(a, t)?,
                None => t.clone(),
            };
            Ok(SnapshotEntry {
                name: name.to_string(),
                depth,
                weights,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StageSnapshot {
        label: label.to_string(),
        entries,
    })
}
