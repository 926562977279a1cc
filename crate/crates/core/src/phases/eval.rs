use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::StageRecord;
use crate::data::{DatasetSplit, SwapTaskSpec};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::{Trainable, TransformerClassifier};
use crate::numerics::{Graph, Reduction};

const EVAL_BATCH: usize = 256;

pub const METRICS_HEADER: &str = "stage,acc_r,acc_l,acc_f,loss_retain,loss_learn,loss_forget,loss_re";

/// Held-out accuracies (percent) and mean cross-entropies per set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_retain: f64,
    pub acc_learn: f64,
    pub acc_forget: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub loss_retain: f64,
    pub loss_learn: f64,
    pub loss_forget: f64,
    /// Group regularizer of the adapters; 0 without adapters.
    pub loss_re: f64,
}

/// Percentage of positions where `predictions` matches `labels`.
pub fn accuracy(labels: &[usize], predictions: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    100.0 * correct as f64 / labels.len() as f64
}

struct SplitEval {
    labels: Vec<usize>,
    predictions: Vec<usize>,
    mean_loss: f64,
}

fn eval_split(
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    split: &DatasetSplit,
) -> Result<SplitEval> {
    if split.is_empty() {
        return Err(Error::contract(format!("{:?} test split is empty", split.role)));
    }
    let mut labels = Vec::with_capacity(split.len());
    let mut predictions = Vec::with_capacity(split.len());
    let mut loss = 0.0;
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let batch = split.batch(idx);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, adapters, Trainable::Nothing)?;
        let logits = bound.forward(&mut g, &batch.inputs)?;
        predictions.extend(argmax_rows(g.value(logits).data(), model.config().num_classes));
        let ce = g.softmax_cross_entropy(logits, &batch.labels, Reduction::Sum)?;
        loss += g.value(ce).item();
        labels.extend(batch.labels);
    }
    Ok(SplitEval {
        mean_loss: loss / labels.len() as f64,
        labels,
        predictions,
    })
}

fn argmax_rows(data: &[f64], width: usize) -> Vec<usize> {
    data.chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Top-1 predictions over the full head for every example of `split`.
pub fn predict(
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    split: &DatasetSplit,
) -> Result<Vec<usize>> {
    Ok(eval_split(model, adapters, split)?.predictions)
}

/// Accuracy and loss on the three test splits.
pub fn evaluate(
    model: &TransformerClassifier,
    adapters: Option<&AdapterSet>,
    task: &SwapTaskSpec,
) -> Result<MetricsReport> {
    let r = eval_split(model, adapters, &task.retain.test)?;
    let l = eval_split(model, adapters, &task.learn.test)?;
    let f = eval_split(model, adapters, &task.forget.test)?;
    let mut per_class = BTreeMap::new();
    for s in [&r, &l, &f] {
        let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (y, p) in s.labels.iter().zip(&s.predictions) {
            let e = hits.entry(*y).or_default();
            e.0 += usize::from(y == p);
            e.1 += 1;
        }
        per_class.extend(
            hits.into_iter()
                .map(|(c, (ok, n))| (c, 100.0 * ok as f64 / n as f64)),
        );
    }
    Ok(MetricsReport {
        acc_retain: accuracy(&r.labels, &r.predictions),
        acc_learn: accuracy(&l.labels, &l.predictions),
        acc_forget: accuracy(&f.labels, &f.predictions),
        per_class,
        loss_retain: r.mean_loss,
        loss_learn: l.mean_loss,
        loss_forget: f.mean_loss,
        loss_re: match adapters {
            Some(set) => set.group_regularizer()?,
            None => 0.0,
        },
    })
}

/// One metrics CSV line (no trailing newline).
pub fn metrics_row(stage: &str, m: &MetricsReport) -> String {
    format!(
        "{stage},{},{},{},{},{},{},{}",
        m.acc_retain, m.acc_learn, m.acc_forget, m.loss_retain, m.loss_learn, m.loss_forget, m.loss_re
    )
}

/// Header plus one row per record.
pub fn metrics_csv(records: &[StageRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{METRICS_HEADER}");
    for r in records {
        let _ = writeln!(out, "{}", metrics_row(&r.label, &r.metrics));
    }
    out
}
