//! The experiment document.
//!
//! A config file is merged over [`ExperimentConfig::default`] key by key, so
//! it only needs the fields it changes. Unknown keys are rejected and every
//! error names the offending field path.

use std::fs;
use std::path::{Path, PathBuf};

use kswap::lora::RegularizerNorm;
use kswap::model::ModelConfig;
use kswap::numerics::Reduction;
use kswap::phases::{PhaseConfig, PhaseConfigs, PretrainConfig, SequencePlan, StageBoundary};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `model.seed` is taken from `seeds.model`.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub phases: PhaseConfigs,
    pub plan: PlanList,
    pub boundary: StageBoundary,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    /// Base model for `run`; defaults to the one `pretrain` writes.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Option<GeneratorConfig>,
    /// Directory of dataset files as written by `gen-data`; takes precedence
    /// over the generator.
    pub files: Option<PathBuf>,
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
    pub learn: Vec<usize>,
}

/// Pretraining classes are `0..pretrain_classes`; the new classes follow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub pretrain_classes: usize,
    pub new_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub train_biases: bool,
    pub norm: RegularizerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub lora: u64,
    pub epochs: u64,
}

/// One plan string or a list of them, run from the same base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanList {
    One(String),
    Many(Vec<String>),
}

impl PlanList {
    pub fn strings(&self) -> Vec<&str> {
        match self {
            PlanList::One(s) => vec![s.as_str()],
            PlanList::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let generator = GeneratorConfig {
            pretrain_classes: 20,
            new_classes: 5,
            per_class_train: 40,
            per_class_test: 20,
            seq_len: 16,
            input_dim: 16,
            noise_std: 0.5,
        };
        let learn = PhaseConfig {
            reduction: Reduction::Sum,
            ..PhaseConfig::learning()
        };
        let forget = PhaseConfig {
            reduction: Reduction::Sum,
            alpha: 0.01,
            beta: 1.0,
            learning_rate: 2e-3,
            weight_decay: 0.0,
            ..PhaseConfig::forgetting()
        };
        Self {
            model: ModelConfig {
                seq_len: generator.seq_len,
                input_dim: generator.input_dim,
                num_classes: generator.pretrain_classes + generator.new_classes,
                ..ModelConfig::default()
            },
            data: DataConfig {
                generator: Some(generator),
                files: None,
                retain: (0..15).collect(),
                forget: (15..20).collect(),
                learn: (20..25).collect(),
            },
            pretrain: PretrainConfig {
                epochs: 20,
                ..PretrainConfig::default()
            },
            lora: LoraConfig {
                rank: 4,
                train_biases: false,
                norm: RegularizerNorm::default(),
            },
            phases: PhaseConfigs { learn, forget },
            plan: PlanList::One("L->F".into()),
            boundary: StageBoundary::default(),
            seeds: Seeds {
                model: 0,
                data: 0,
                lora: 0,
                epochs: 0,
            },
            output_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    /// Parses a config document merged over the defaults.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, Failure> {
        let patch: Value = serde_json::from_str(text).map_err(|e| {
            Failure::config(format!("{}:{}: {e}", origin.display(), e.line()))
        })?;
        if !patch.is_object() {
            return Err(Failure::config(format!(
                "{}: the config must be a JSON object",
                origin.display()
            )));
        }
        if patch.pointer("/model/seed").is_some() {
            return Err(Failure::config(format!(
                "{}: model.seed: set seeds.model instead",
                origin.display()
            )));
        }
        let mut doc = serde_json::to_value(Self::default()).expect("default config serializes");
        merge(&mut doc, patch);
        let mut cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            Failure::config(format!("{}: {}: {}", origin.display(), e.path(), e.inner()))
        })?;
        cfg.model.seed = cfg.seeds.model;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    /// Applies a `key=value` seed override; `all` sets every seed.
    pub fn override_seed(&mut self, spec: &str) -> Result<(), Failure> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("--seed-override {spec:?}: expected key=value")))?;
        let value: u64 = value.trim().parse().map_err(|_| {
            Failure::config(format!("--seed-override {spec:?}: value is not an unsigned integer"))
        })?;
        let s = &mut self.seeds;
        match key.trim() {
            "model" => s.model = value,
            "data" => s.data = value,
            "lora" => s.lora = value,
            "epochs" => s.epochs = value,
            "all" => *s = Seeds { model: value, data: value, lora: value, epochs: value },
            other => {
                return Err(Failure::config(format!(
                    "--seed-override: unknown seed {other:?} (expected model, data, lora, epochs or all)"
                )))
            }
        }
        self.model.seed = self.seeds.model;
        Ok(())
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<(), Failure> {
        self.model
            .validate()
            .map_err(|e| Failure::config(e.to_string()))?;
        for (path, cfg) in [("phases.learn", &self.phases.learn), ("phases.forget", &self.phases.forget)] {
            cfg.validate()
                .map_err(|e| Failure::config(format!("{path}: {e}")))?;
        }
        self.plans()?;
        if self.data.files.is_none() && self.data.generator.is_none() {
            return Err(Failure::config("data: neither files nor generator is set"));
        }
        if let (None, Some(g)) = (&self.data.files, &self.data.generator) {
            if (g.seq_len, g.input_dim) != (self.model.seq_len, self.model.input_dim) {
                return Err(Failure::config(format!(
                    "data.generator: token grid {}x{} does not match model {}x{}",
                    g.seq_len, g.input_dim, self.model.seq_len, self.model.input_dim
                )));
            }
        }
        Ok(())
    }

    pub fn plans(&self) -> Result<Vec<SequencePlan>, Failure> {
        let strings = self.plan.strings();
        if strings.is_empty() {
            return Err(Failure::config("plan: no plans given"));
        }
        strings
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                SequencePlan::parse(s).map_err(|e| {
                    let path = match self.plan {
                        PlanList::One(_) => "plan".to_string(),
                        PlanList::Many(_) => format!("plan[{i}]"),
                    };
                    Failure::config(format!("{path}: {e}"))
                })
            })
            .collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("m0.ckpt"))
    }
}
