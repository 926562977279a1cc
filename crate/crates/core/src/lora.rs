//! Low-rank adapters on the feed-forward linear layers.
//!
//! Each adapted weight is used as `W = W0 + A·B` with `A: in×r` and
//! `B: r×out`. `A` starts Gaussian and `B` starts at zero, so a freshly
//! attached set leaves the model's function unchanged. There is no extra
//! scaling factor on `A·B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FfnLayer, ModelConfig, TransformerClassifier};
use crate::numerics::{Graph, Tensor, Var};

/// Name prefix reserved for adapter tensors inside checkpoints.
pub const ADAPTER_PREFIX: &str = "lora.";

const A_INIT_STD: f64 = 0.02;

/// Norm applied to each factor in the group regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerNorm {
    /// `Σ ‖A‖²_F + ‖B‖²_F`
    #[default]
    SquaredFrobenius,
    /// `Σ ‖A‖_F + ‖B‖_F`, the group-lasso form.
    Frobenius,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: FfnLayer,
    pub a: Tensor,
    pub b: Tensor,
    pub enabled: bool,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn a_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.a", self.target.weight_name())
    }

    pub fn b_name(&self) -> String {
        format!("{ADAPTER_PREFIX}{}.b", self.target.weight_name())
    }

    /// `A·B`, shaped like the target weight.
    pub fn delta(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(self.a.clone()), g.constant(self.b.clone()));
        let d = g.matmul(a, b)?;
        Ok(g.value(d).clone())
    }
}

/// `W0 + A·B`, or `W0` itself when the adapter is disabled.
pub fn effective_weight(adapter: &LoraAdapter, w0: &Tensor) -> Result<Tensor> {
    let (in_dim, out_dim) = (adapter.a.shape()[0], adapter.b.shape()[1]);
    if w0.shape() != [in_dim, out_dim] || adapter.a.shape()[1] != adapter.b.shape()[0] {
        return Err(Error::shape(
            "effective_weight",
            w0.shape(),
            &[in_dim, adapter.a.shape()[1], out_dim],
        ));
    }
    if !adapter.enabled {
        return Ok(w0.clone());
    }
    let delta = adapter.delta()?;
    let data = w0
        .data()
        .iter()
        .zip(delta.data())
        .map(|(w, d)| w + d)
        .collect();
    Tensor::new(w0.shape().to_vec(), data)
}

/// One adapter per feed-forward linear layer, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub adapters: Vec<LoraAdapter>,
    pub train_biases: bool,
    pub norm: RegularizerNorm,
    seed: u64,
    generation: u64,
}

impl AdapterSet {
    /// Attaches fresh adapters to every FFN layer of `model`.
    pub fn attach(model: &TransformerClassifier, rank: usize, seed: u64) -> Result<Self> {
        let config = model.config();
        let min_dim = config.embed_dim.min(config.ffn_hidden);
        if rank == 0 || rank > min_dim {
            return Err(Error::config(format!(
                "lora rank {rank} must be in 1..={min_dim} for this model"
            )));
        }
        let mut set = Self {
            rank,
            adapters: Vec::new(),
            train_biases: false,
            norm: RegularizerNorm::default(),
            seed,
            generation: 0,
        };
        set.adapters = set.fresh_adapters(config);
        Ok(set)
    }

    /// Rebuilds a set from stored factors.
    pub fn from_adapters(adapters: Vec<LoraAdapter>, seed: u64) -> Result<Self> {
        let rank = adapters
            .first()
            .map(LoraAdapter::rank)
            .ok_or_else(|| Error::Validation("adapter set is empty".into()))?;
        if adapters.iter().any(|a| a.rank() != rank) {
            return Err(Error::Validation("adapters disagree on rank".into()));
        }
        Ok(Self {
            rank,
            adapters,
            train_biases: false,
            norm: RegularizerNorm::default(),
            seed,
            generation: 0,
        })
    }

    fn fresh_adapters(&self, config: &ModelConfig) -> Vec<LoraAdapter> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.generation);
        FfnLayer::all(config)
            .into_iter()
            .map(|target| {
                let (in_dim, out_dim) = target.dims(config);
                LoraAdapter {
                    target,
                    a: Tensor::randn(&[in_dim, self.rank], A_INIT_STD, &mut rng),
                    b: Tensor::zeros(&[self.rank, out_dim]),
                    enabled: true,
                }
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapter_for_weight(&self, weight_name: &str) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.target.weight_name() == weight_name)
    }

    pub(crate) fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let expected = FfnLayer::all(config);
        if self.adapters.len() != expected.len() {
            return Err(Error::Validation(format!(
                "{} adapters for a model with {} FFN layers",
                self.adapters.len(),
                expected.len()
            )));
        }
        for (a, target) in self.adapters.iter().zip(expected) {
            let (i, o) = target.dims(config);
            if a.target != target || a.a.shape() != [i, self.rank] || a.b.shape() != [self.rank, o]
            {
                return Err(Error::Validation(format!(
                    "adapter {} does not fit the model",
                    a.a_name()
                )));
            }
        }
        Ok(())
    }

    /// Number of trainable adapter values.
    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// Adapter factors under their checkpoint names, in block order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.adapters
            .iter()
            .flat_map(|a| [(a.a_name(), &a.a), (a.b_name(), &a.b)])
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.adapters
            .iter_mut()
            .flat_map(|a| {
                let (an, bn) = (a.a_name(), a.b_name());
                [(an, &mut a.a), (bn, &mut a.b)]
            })
            .collect()
    }

    /// Value of the group regularizer.
    pub fn group_regularizer(&self) -> Result<f64> {
        let mut g = Graph::new();
        let pairs: Vec<_> = self
            .adapters
            .iter()
            .map(|a| (g.constant(a.a.clone()), g.constant(a.b.clone())))
            .collect();
        let r = group_regularizer(&mut g, &pairs, self.norm)?;
        Ok(g.value(r).item())
    }

    /// Folds every `A·B` into the base weights, then re-seeds `A` and zeroes
    /// `B`. The model's function is unchanged.
    pub fn merge(&mut self, model: &mut TransformerClassifier) -> Result<()> {
        self.check_compatible(model.config())?;
        for adapter in &self.adapters {
            let name = adapter.target.weight_name();
            let w0 = model
                .tensor(&name)
                .ok_or_else(|| Error::contract(format!("model has no {name}")))?;
            let merged = effective_weight(adapter, w0)?;
            *model.tensor_mut(&name).expect("checked above") = merged;
        }
        self.generation += 1;
        let enabled: Vec<bool> = self.adapters.iter().map(|a| a.enabled).collect();
        self.adapters = self.fresh_adapters(model.config());
        for (a, e) in self.adapters.iter_mut().zip(enabled) {
            a.enabled = e;
        }
        Ok(())
    }

    /// Replaces every adapter with a freshly initialized one.
    pub fn reset(&mut self, config: &ModelConfig) {
        self.generation += 1;
        self.adapters = self.fresh_adapters(config);
    }

    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for a in &mut out.adapters {
            a.a = a.a.to_f32_precision();
            a.b = a.b.to_f32_precision();
        }
        out
    }
}

/// Group regularizer over `(A, B)` pairs registered on `g`.
pub fn group_regularizer(g: &mut Graph, pairs: &[(Var, Var)], norm: RegularizerNorm) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in pairs {
        for f in [a, b] {
            let sq = g.frobenius_norm_sq(f);
            terms.push(match norm {
                RegularizerNorm::SquaredFrobenius => sq,
                RegularizerNorm::Frobenius => g.sqrt(sq)?,
            });
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.add_all(&terms)
}

#[cfg(test)]
mod tests;
