use std::collections::VecDeque;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{
    evaluate, forgetting_loss, learning_loss, LearnInForget, LossTerms, MetricsReport,
    PhaseConfig, PhaseConfigs, SequencePlan, StageKind,
};
use crate::data::{batch_order, Batch, DatasetSplit, SwapTaskSpec};
use crate::diagnostics::{file_label, GradientAccumulator};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::{save_checkpoint, snapshot_weights, StageSnapshot, Trainable, TransformerClassifier};
use crate::numerics::{AdamWConfig, Graph, OptimizerState, Reduction, Tensor};

/// Mixes `parts` into `base` (splitmix64), giving independent seeds for
/// stages, epochs and samplers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Minimum Start accuracy (percent) on both retain and forget sets.
    pub accuracy_gate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            accuracy_gate: 90.0,
        }
    }
}

/// Full-parameter training on the retain and forget training data.
///
/// Logits of classes outside the pretraining set are masked out of the
/// softmax, so their head rows receive no gradient and keep their initial
/// values.
pub fn pretrain(
    mut model: TransformerClassifier,
    task: &SwapTaskSpec,
    cfg: &PretrainConfig,
    epoch_seed: u64,
) -> Result<TransformerClassifier> {
    if cfg.batch_size == 0 {
        return Err(Error::config("pretrain batch_size must be at least 1"));
    }
    let c = model.config().num_classes;
    if task.class_universe > c {
        return Err(Error::config(format!(
            "task spans {} classes but the head has {c}",
            task.class_universe
        )));
    }
    let data = task.pretrain_train()?;
    let seen = data.class_ids();
    let mask = Tensor::new(
        vec![c],
        (0..c).map(|k| if seen.contains(&k) { 0.0 } else { -1e30 }).collect(),
    )?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    for epoch in 0..cfg.epochs {
        for idx in batch_order(data.len(), cfg.batch_size, derive_seed(epoch_seed, &[epoch as u64])) {
            let batch = data.batch(&idx);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, None, Trainable::All)?;
            let logits = bound.forward(&mut g, &batch.inputs)?;
            let m = g.constant(mask.clone());
            let masked = g.add_broadcast(logits, m)?;
            let loss = g.softmax_cross_entropy(masked, &batch.labels, Reduction::Mean)?;
            let grads = g.backward(loss)?;
            opt.step(model.tensors_mut(), &grads)?;
        }
    }
    Ok(model)
}

/// Cycles through a split in reshuffled batches, independent of the epoch
/// loop that drives a stage.
struct Sampler<'a> {
    split: &'a DatasetSplit,
    batch_size: usize,
    seed: u64,
    pass: u64,
    queue: VecDeque<Vec<usize>>,
}

impl<'a> Sampler<'a> {
    fn new(split: &'a DatasetSplit, batch_size: usize, seed: u64) -> Self {
        Self {
            split,
            batch_size,
            seed,
            pass: 0,
            queue: VecDeque::new(),
        }
    }

    fn next_batch(&mut self) -> Batch {
        if self.queue.is_empty() {
            self.queue = batch_order(self.split.len(), self.batch_size, derive_seed(self.seed, &[self.pass])).into();
            self.pass += 1;
        }
        let idx = self.queue.pop_front().expect("split is non-empty");
        self.split.batch(&idx)
    }
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms,
}

/// Everything recorded at the end of a stage (or at the start of a run).
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub label: String,
    /// `None` for the Start record.
    pub kind: Option<StageKind>,
    pub checkpoint: Option<PathBuf>,
    pub snapshot: StageSnapshot,
    pub metrics: MetricsReport,
    /// Per-layer sums of |∂loss/∂W_eff| over the stage's steps.
    pub gradients: Option<GradientAccumulator>,
    pub trace: Vec<StepTrace>,
}

/// Per-stage settings supplied by the orchestrator.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub label: String,
    /// Whether a learning stage ran earlier in the sequence.
    pub learned_before: bool,
    pub seed: u64,
}

fn evaluate_stored(
    model: &TransformerClassifier,
    adapters: &AdapterSet,
    task: &SwapTaskSpec,
) -> Result<MetricsReport> {
    // Metrics are taken on the values a checkpoint would hold, so that
    // evaluating a saved stage reproduces its row exactly.
    evaluate(&model.to_f32_precision(), Some(&adapters.to_f32_precision()), task)
}

/// Trains the adapters (and FFN biases when enabled) for one stage.
///
/// An epoch is one pass over the retain training split; learn and forget
/// batches are drawn alongside from their own reshuffled cycles. The base
/// weights are never modified.
pub fn run_stage(
    model: &mut TransformerClassifier,
    adapters: &mut AdapterSet,
    task: &SwapTaskSpec,
    kind: StageKind,
    cfg: &PhaseConfig,
    ctx: &StageContext,
) -> Result<StageRecord> {
    cfg.validate()?;
    let include_learn = match kind {
        StageKind::Learn => true,
        StageKind::Forget => match cfg.include_learn_in_forget {
            LearnInForget::Auto => ctx.learned_before,
            LearnInForget::Always => true,
            LearnInForget::Never => false,
        },
    };
    let mut opt = OptimizerState::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut grads_acc = GradientAccumulator::new(model.named_tensors().map(|(n, t)| (n, t.len())));
    let mut learn = Sampler::new(&task.learn.train, cfg.batch_size, derive_seed(ctx.seed, &[1]));
    let mut forget = Sampler::new(&task.forget.train, cfg.batch_size, derive_seed(ctx.seed, &[2]));
    let bias_names: Vec<String> = if adapters.train_biases {
        adapters.adapters.iter().map(|a| a.target.bias_name()).collect()
    } else {
        Vec::new()
    };
    let trainable = Trainable::Adapters {
        biases: adapters.train_biases,
        observe: true,
    };
    for (name, split, needed) in [
        ("retain", &task.retain.train, true),
        ("learn", &task.learn.train, include_learn),
        ("forget", &task.forget.train, kind == StageKind::Forget),
    ] {
        if needed && split.is_empty() {
            return Err(Error::contract(format!("{name} training split is empty")));
        }
    }
    let mut trace = Vec::new();
    let retain = &task.retain.train;
    for epoch in 0..cfg.epochs {
        let order = batch_order(retain.len(), cfg.batch_size, derive_seed(ctx.seed, &[0, epoch as u64]));
        for idx in order {
            let rb = retain.batch(&idx);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, Some(adapters), trainable)?;
            let loss = match kind {
                StageKind::Learn => {
                    let lb = learn.next_batch();
                    learning_loss(&mut g, &bound, adapters.norm, &rb, &lb, cfg)?
                }
                StageKind::Forget => {
                    let lb = include_learn.then(|| learn.next_batch());
                    let fb = forget.next_batch();
                    forgetting_loss(&mut g, &bound, adapters.norm, &rb, lb.as_ref(), &fb, cfg)?
                }
            };
            let grads = g.backward(loss.total)?;
            grads_acc.record(bound.layers().iter().map(|(_, v)| grads.raw(*v)))?;
            let mut params = adapters.named_tensors_mut();
            let mut biases: Vec<(String, &mut Tensor)> = model
                .tensors_mut()
                .filter(|(n, _)| bias_names.iter().any(|b| b == n))
                .map(|(n, t)| (n.to_string(), t))
                .collect();
            params.append(&mut biases);
            opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)), &grads)?;
            trace.push(StepTrace {
                epoch,
                step: trace.len(),
                terms: loss.terms,
            });
        }
    }
    Ok(StageRecord {
        label: ctx.label.clone(),
        kind: Some(kind),
        checkpoint: None,
        snapshot: snapshot_weights(model, Some(adapters), &ctx.label)?,
        metrics: evaluate_stored(model, adapters, task)?,
        gradients: Some(grads_acc),
        trace,
    })
}

/// What happens to the adapters between stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageBoundary {
    /// The same adapters continue training in the next stage.
    #[default]
    Carry,
    /// The adapters are folded into the base weights and restarted fresh.
    Merge,
}

#[derive(Debug, Clone, Default)]
pub struct SequenceOptions {
    pub epoch_seed: u64,
    pub boundary: StageBoundary,
    /// Where to write one checkpoint per record, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct SequenceOutcome {
    pub records: Vec<StageRecord>,
    pub model: TransformerClassifier,
    pub adapters: AdapterSet,
}

/// File name of the checkpoint for the `index`-th record.
pub fn checkpoint_file_name(index: usize, label: &str) -> String {
    format!("stage_{index}_{}.ckpt", file_label(label))
}

/// Runs every stage of `plan` in order on one carried model and adapter
/// set, starting with a Start record for `m0`.
pub fn run_sequence(
    m0: &TransformerClassifier,
    adapters: AdapterSet,
    plan: &SequencePlan,
    task: &SwapTaskSpec,
    cfgs: &PhaseConfigs,
    opts: &SequenceOptions,
) -> Result<SequenceOutcome> {
    plan.validate()?;
    let labels = plan.labels();
    let mut model = m0.clone();
    let mut adapters = adapters;
    let save = |index: usize, label: &str, model: &TransformerClassifier, adapters: &AdapterSet| {
        opts.checkpoint_dir
            .as_ref()
            .map(|dir| -> Result<PathBuf> {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(checkpoint_file_name(index, label));
                save_checkpoint(&path, model, Some(adapters), label)?;
                Ok(path)
            })
            .transpose()
    };
    let mut records = vec![StageRecord {
        label: labels[0].clone(),
        kind: None,
        checkpoint: save(0, &labels[0], &model, &adapters)?,
        snapshot: snapshot_weights(&model, Some(&adapters), &labels[0])?,
        metrics: evaluate_stored(&model, &adapters, task)?,
        gradients: None,
        trace: Vec::new(),
    }];
    let mut learned_before = false;
    for (i, stage) in plan.stages.iter().enumerate() {
        let cfg = stage.config.unwrap_or(*cfgs.for_kind(stage.kind));
        let ctx = StageContext {
            label: labels[i + 1].clone(),
            learned_before,
            seed: derive_seed(opts.epoch_seed, &[i as u64 + 1]),
        };
        let mut record = run_stage(&mut model, &mut adapters, task, stage.kind, &cfg, &ctx)?;
        record.checkpoint = save(i + 1, &ctx.label, &model, &adapters)?;
        if opts.boundary == StageBoundary::Merge {
            adapters.merge(&mut model)?;
        }
        learned_before |= stage.kind == StageKind::Learn;
        records.push(record);
    }
    Ok(SequenceOutcome {
        records,
        model,
        adapters,
    })
}
