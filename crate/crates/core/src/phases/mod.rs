//! Learning and forgetting stages.
//!
//! ```text
//! learning    total = CE(retain) + β·CE(learn) + α·R
//! forgetting  total = CE(retain) [+ CE(learn)] + β·max(0, BND − CE(forget)) + α·R
//! ```
//!
//! `R` is the adapters' group regularizer. Whether the learn term enters a
//! forgetting stage is set by [`LearnInForget`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::lora::{group_regularizer, RegularizerNorm};
use crate::model::BoundModel;
use crate::numerics::{Graph, Reduction, Var};

mod eval;
mod run;

pub use eval::{accuracy, evaluate, metrics_csv, metrics_row, predict, MetricsReport, METRICS_HEADER};
pub use run::{
    checkpoint_file_name, derive_seed, pretrain, run_sequence, run_stage, PretrainConfig, SequenceOptions,
    SequenceOutcome, StageBoundary, StageContext, StageRecord, StepTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "L")]
    Learn,
    #[serde(rename = "F")]
    Forget,
}

impl StageKind {
    pub fn symbol(self) -> char {
        match self {
            StageKind::Learn => 'L',
            StageKind::Forget => 'F',
        }
    }
}

/// Whether a forgetting stage also trains on the learn set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnInForget {
    /// Only when a learning stage ran earlier in the sequence.
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Forgetting boundary; `None` selects [`PhaseConfig::boundary`]'s default.
    #[serde(default)]
    pub bnd: Option<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub include_learn_in_forget: LearnInForget,
}

impl PhaseConfig {
    pub fn learning() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.2,
            bnd: None,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 32,
            reduction: Reduction::Mean,
            include_learn_in_forget: LearnInForget::Auto,
        }
    }

    pub fn forgetting() -> Self {
        Self {
            learning_rate: 4e-3,
            epochs: 10,
            ..Self::learning()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) || !finite_nonneg(self.beta) {
            return Err(Error::config(format!(
                "alpha and beta must be non-negative (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if let Some(b) = self.bnd {
            if !finite_nonneg(b) {
                return Err(Error::config(format!("bnd must be non-negative (got {b})")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !finite_nonneg(self.weight_decay) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }

    /// The boundary in effect for a head with `num_classes` outputs and a
    /// forget batch of `batch_len` examples. Unless set explicitly it is
    /// `2·ln C` per example: once under mean reduction, `batch_len` times
    /// under sum reduction.
    pub fn boundary(&self, num_classes: usize, batch_len: usize) -> f64 {
        self.bnd.unwrap_or_else(|| {
            let per_example = 2.0 * (num_classes as f64).ln();
            match self.reduction {
                Reduction::Mean => per_example,
                Reduction::Sum => per_example * batch_len as f64,
            }
        })
    }
}

/// Defaults for each stage kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfigs {
    pub learn: PhaseConfig,
    pub forget: PhaseConfig,
}

impl Default for PhaseConfigs {
    fn default() -> Self {
        Self {
            learn: PhaseConfig::learning(),
            forget: PhaseConfig::forgetting(),
        }
    }
}

impl PhaseConfigs {
    pub fn for_kind(&self, kind: StageKind) -> &PhaseConfig {
        match kind {
            StageKind::Learn => &self.learn,
            StageKind::Forget => &self.forget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanStage {
    pub kind: StageKind,
    /// Replaces the kind's default configuration for this stage only.
    #[serde(default)]
    pub config: Option<PhaseConfig>,
}

/// An ordered, non-empty list of stages such as `L->F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub stages: Vec<PlanStage>,
}

impl SequencePlan {
    /// Parses `"F->L->F"`; `→` is accepted in place of `->`.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::config("sequence plan is empty"));
        }
        let stages = text
            .replace('→', "->")
            .split("->")
            .map(|s| match s.trim() {
                "L" => Ok(StageKind::Learn),
                "F" => Ok(StageKind::Forget),
                other => Err(Error::config(format!(
                    "unknown stage symbol {other:?} in plan {text:?} (expected L or F)"
                ))),
            })
            .map(|k| k.map(|kind| PlanStage { kind, config: None }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("sequence plan is empty"));
        }
        self.stages
            .iter()
            .filter_map(|s| s.config.as_ref())
            .try_for_each(PhaseConfig::validate)
    }

    /// Record labels: `Start`, then each prefix of the plan joined by `→`.
    pub fn labels(&self) -> Vec<String> {
        let mut labels = vec!["Start".to_string()];
        let mut prefix = String::new();
        for s in &self.stages {
            if !prefix.is_empty() {
                prefix.push('→');
            }
            prefix.push(s.kind.symbol());
            labels.push(prefix.clone());
        }
        labels
    }
}

impl fmt::Display for SequencePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let symbols: Vec<String> = self.stages.iter().map(|s| s.kind.symbol().to_string()).collect();
        f.write_str(&symbols.join("->"))
    }
}

/// Scalar values of every term of a phase loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub retain: f64,
    pub learn: Option<f64>,
    /// Cross-entropy on the forget batch, before the boundary is applied.
    pub forget_ce: Option<f64>,
    /// `max(0, BND − forget_ce)`.
    pub forget: Option<f64>,
    pub regularizer: f64,
    pub total: f64,
}

/// `retain + β·learn + α·re` on plain values.
pub fn learning_objective(retain: f64, learn: f64, re: f64, cfg: &PhaseConfig) -> f64 {
    retain + cfg.beta * learn + cfg.alpha * re
}

/// `max(0, bnd − forget_ce)`.
pub fn forget_term(bnd: f64, forget_ce: f64) -> f64 {
    (bnd - forget_ce).max(0.0)
}

/// `retain [+ learn] + β·max(0, bnd − forget_ce) + α·re` on plain values.
pub fn forgetting_objective(
    retain: f64,
    learn: Option<f64>,
    forget_ce: f64,
    re: f64,
    bnd: f64,
    cfg: &PhaseConfig,
) -> f64 {
    retain + learn.unwrap_or(0.0) + cfg.beta * forget_term(bnd, forget_ce) + cfg.alpha * re
}

pub struct PhaseLoss {
    pub total: Var,
    pub terms: LossTerms,
}

fn batch_ce(g: &mut Graph, model: &BoundModel, batch: &Batch, reduction: Reduction) -> Result<Var> {
    if batch.labels.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let logits = model.forward(g, &batch.inputs)?;
    g.softmax_cross_entropy(logits, &batch.labels, reduction)
}

/// `CE(retain) + β·CE(learn) + α·R`.
pub fn learning_loss(
    g: &mut Graph,
    model: &BoundModel,
    norm: RegularizerNorm,
    retain: &Batch,
    learn: &Batch,
    cfg: &PhaseConfig,
) -> Result<PhaseLoss> {
    cfg.validate()?;
    let r = batch_ce(g, model, retain, cfg.reduction)?;
    let l = batch_ce(g, model, learn, cfg.reduction)?;
    let re = group_regularizer(g, model.adapter_vars(), norm)?;
    let terms = [r, g.scale(l, cfg.beta), g.scale(re, cfg.alpha)];
    let total = g.add_all(&terms)?;
    Ok(PhaseLoss {
        total,
        terms: LossTerms {
            retain: g.value(r).item(),
            learn: Some(g.value(l).item()),
            forget_ce: None,
            forget: None,
            regularizer: g.value(re).item(),
            total: g.value(total).item(),
        },
    })
}

/// `CE(retain) [+ CE(learn)] + β·max(0, BND − CE(forget)) + α·R`; the learn
/// term is present exactly when `learn` is given.
pub fn forgetting_loss(
    g: &mut Graph,
    model: &BoundModel,
    norm: RegularizerNorm,
    retain: &Batch,
    learn: Option<&Batch>,
    forget: &Batch,
    cfg: &PhaseConfig,
) -> Result<PhaseLoss> {
    cfg.validate()?;
    let bnd = cfg.boundary(model.config().num_classes, forget.labels.len());
    let r = batch_ce(g, model, retain, cfg.reduction)?;
    let mut terms = vec![r];
    let l = match learn {
        Some(batch) => {
            let l = batch_ce(g, model, batch, cfg.reduction)?;
            terms.push(l);
            Some(l)
        }
        None => None,
    };
    let f = batch_ce(g, model, forget, cfg.reduction)?;
    let neg = g.scale(f, -1.0);
    let gap = g.add_scalar(neg, bnd);
    let forget_term = g.relu(gap);
    terms.push(g.scale(forget_term, cfg.beta));
    let re = group_regularizer(g, model.adapter_vars(), norm)?;
    terms.push(g.scale(re, cfg.alpha));
    let total = g.add_all(&terms)?;
    Ok(PhaseLoss {
        total,
        terms: LossTerms {
            retain: g.value(r).item(),
            learn: l.map(|l| g.value(l).item()),
            forget_ce: Some(g.value(f).item()),
            forget: Some(g.value(forget_term).item()),
            regularizer: g.value(re).item(),
            total: g.value(total).item(),
        },
    })
}
