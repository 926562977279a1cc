//! Pre-norm transformer classifier over token grids.
//!
//! ```text
//! tokens [B, T, input_dim] ─ embed ─ + pos ─┬─ K × block ─ norm ─ mean over T ─ head → [B, C]
//! block:  h ← h + Wo·Attn(LN(h)·Wq, LN(h)·Wk, LN(h)·Wv)
//!         h ← h + FFN(LN(h)),  FFN(X) = ReLU(X·W1 + b1)·W2 + b2
//! ```
//!
//! Parameters are addressed by canonical names (`blocks.2.ffn.w1`, ...) and
//! enumerated in forward order; that order is the depth axis used by the
//! diagnostics.

mod checkpoint;
mod snapshot;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::numerics::{Graph, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use snapshot::{snapshot_weights, SnapshotEntry, StageSnapshot};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            num_heads: 4,
            ffn_hidden: 128,
            seq_len: 16,
            input_dim: 16,
            num_classes: 25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("seq_len", self.seq_len),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "model.embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let (d, h, k) = (self.embed_dim, self.ffn_hidden, self.num_blocks);
        let block = 4 * d * d + 4 * d + (d * h + h) + (h * d + d);
        self.input_dim * d + self.seq_len * d + k * block + 2 * d + d * self.num_classes + self.num_classes
    }

    /// Canonical `(name, shape)` listing in forward order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.embed_dim, self.ffn_hidden);
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.input_dim, d]),
            ("embed.pos".to_string(), vec![self.seq_len, d]),
        ];
        for k in 0..self.num_blocks {
            let p = |s: &str| format!("blocks.{k}.{s}");
            out.extend([
                (p("attn_norm.gamma"), vec![d]),
                (p("attn_norm.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ffn_norm.gamma"), vec![d]),
                (p("ffn_norm.beta"), vec![d]),
                (p("ffn.w1"), vec![d, h]),
                (p("ffn.b1"), vec![h]),
                (p("ffn.w2"), vec![h, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        out
    }
}

/// One of the two linear layers of a block's feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FfnLayer {
    pub block: usize,
    /// 1 for the expanding layer, 2 for the projecting layer.
    pub position: u8,
}

impl FfnLayer {
    pub fn weight_name(&self) -> String {
        format!("blocks.{}.ffn.w{}", self.block, self.position)
    }

    pub fn bias_name(&self) -> String {
        format!("blocks.{}.ffn.b{}", self.block, self.position)
    }

    /// `(in, out)` dimensions of the weight.
    pub fn dims(&self, config: &ModelConfig) -> (usize, usize) {
        match self.position {
            1 => (config.embed_dim, config.ffn_hidden),
            _ => (config.ffn_hidden, config.embed_dim),
        }
    }

    pub fn all(config: &ModelConfig) -> Vec<FfnLayer> {
        (0..config.num_blocks)
            .flat_map(|block| [1, 2].map(|position| FfnLayer { block, position }))
            .collect()
    }
}

/// Which tensors receive gradient when the model is bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Every model parameter; adapters, if any, stay fixed.
    All,
    /// Adapter factors only, plus the adapted layers' biases when `biases`.
    /// With `observe`, frozen tensors are still registered under their own
    /// names so their gradients can be inspected; nothing updates them.
    Adapters { biases: bool, observe: bool },
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerClassifier {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl TransformerClassifier {
    /// Seeded Gaussian initialization; layer-norm scales start at 1 and
    /// shifts at 0.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("norm.gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with("norm.beta") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, INIT_STD, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Assembles a model from named tensors, checking names and shapes
    /// against the configuration's layout.
    pub fn from_tensors(config: ModelConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push((name, t));
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Validation(format!("unknown tensor {extra}")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy with every value rounded through `f32`, as stored on disk.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.to_f32_precision()))
                .collect(),
        }
    }

    /// Registers the model (and adapters) on `g`.
    pub fn bind(
        &self,
        g: &mut Graph,
        adapters: Option<&AdapterSet>,
        trainable: Trainable,
    ) -> Result<BoundModel> {
        if let Some(set) = adapters {
            set.check_compatible(&self.config)?;
        }
        let mut layers = Vec::with_capacity(self.tensors.len());
        let mut adapter_vars = Vec::new();
        let mut vars = std::collections::HashMap::new();
        for (name, t) in &self.tensors {
            let is_ffn_bias = name.contains(".ffn.b");
            let train = match trainable {
                Trainable::All => true,
                Trainable::Adapters { biases, observe } => observe || (biases && is_ffn_bias),
                Trainable::Nothing => false,
            };
            let base = if train {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            let adapter = adapters.and_then(|set| set.adapter_for_weight(name));
            let value = match adapter.filter(|a| a.enabled) {
                Some(a) => {
                    let factors_train = matches!(trainable, Trainable::Adapters { .. });
                    let (av, bv) = if factors_train {
                        (
                            g.param(&a.a_name(), a.a.clone())?,
                            g.param(&a.b_name(), a.b.clone())?,
                        )
                    } else {
                        (g.constant(a.a.clone()), g.constant(a.b.clone()))
                    };
                    adapter_vars.push((av, bv));
                    let delta = g.matmul(av, bv)?;
                    g.add(base, delta)?
                }
                None => base,
            };
            vars.insert(name.clone(), value);
            layers.push((name.clone(), value));
        }
        let v = |n: &str| vars[n];
        let blocks = (0..self.config.num_blocks)
            .map(|k| {
                let p = |s: &str| v(&format!("blocks.{k}.{s}"));
                BoundBlock {
                    attn_norm: (p("attn_norm.gamma"), p("attn_norm.beta")),
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    ffn_norm: (p("ffn_norm.gamma"), p("ffn_norm.beta")),
                    w1: p("ffn.w1"),
                    b1: p("ffn.b1"),
                    w2: p("ffn.w2"),
                    b2: p("ffn.b2"),
                }
            })
            .collect();
        Ok(BoundModel {
            config: self.config,
            embed: v("embed.weight"),
            pos: v("embed.pos"),
            blocks,
            norm: (v("norm.gamma"), v("norm.beta")),
            head: (v("head.weight"), v("head.bias")),
            adapter_vars,
            layers,
        })
    }

    /// Logits for a `[B, T, input_dim]` batch.
    pub fn forward(&self, adapters: Option<&AdapterSet>, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, adapters, Trainable::Nothing)?;
        let logits = bound.forward(&mut g, batch)?;
        Ok(g.value(logits).clone())
    }

    /// Feed-forward network of block `block` applied to `x: [.., d]`, using
    /// effective weights when adapters are given.
    pub fn ffn_forward(
        &self,
        adapters: Option<&AdapterSet>,
        x: &Tensor,
        block: usize,
    ) -> Result<Tensor> {
        if block >= self.config.num_blocks {
            return Err(Error::contract(format!("block {block} out of range")));
        }
        let d = self.config.embed_dim;
        if x.shape().last() != Some(&d) {
            return Err(Error::shape("ffn_forward", x.shape(), &[d]));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, adapters, Trainable::Nothing)?;
        let flat = g.constant(x.clone().reshape(&[x.len() / d, d])?);
        let out = bound.ffn(&mut g, flat, block)?;
        g.value(out).clone().reshape(x.shape())
    }
}

struct BoundBlock {
    attn_norm: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// A model registered on a particular [`Graph`], ready for forward passes.
pub struct BoundModel {
    config: ModelConfig,
    embed: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
    norm: (Var, Var),
    head: (Var, Var),
    adapter_vars: Vec<(Var, Var)>,
    layers: Vec<(String, Var)>,
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Effective value of every canonical layer tensor, in forward order.
    pub fn layers(&self) -> &[(String, Var)] {
        &self.layers
    }

    /// `(A, B)` handles of the enabled adapters.
    pub fn adapter_vars(&self) -> &[(Var, Var)] {
        &self.adapter_vars
    }

    pub fn ffn(&self, g: &mut Graph, x: Var, block: usize) -> Result<Var> {
        let b = &self.blocks[block];
        let h = g.matmul(x, b.w1)?;
        let h = g.add_broadcast(h, b.b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, b.w2)?;
        g.add_broadcast(o, b.b2)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Tensor) -> Result<Var> {
        let c = &self.config;
        let s = batch.shape();
        if s.len() != 3 || s[1] != c.seq_len || s[2] != c.input_dim {
            return Err(Error::shape(
                "forward",
                s,
                &[0, c.seq_len, c.input_dim],
            ));
        }
        let rows = s[0] * c.seq_len;
        let x = g.constant(batch.clone().reshape(&[rows, c.input_dim])?);
        let h = g.matmul(x, self.embed)?;
        let mut h = g.add_broadcast(h, self.pos)?;
        for (k, b) in self.blocks.iter().enumerate() {
            let n = g.layer_norm(h, b.attn_norm.0, b.attn_norm.1)?;
            let q = g.matmul(n, b.wq)?;
            let kk = g.matmul(n, b.wk)?;
            let v = g.matmul(n, b.wv)?;
            let a = g.attention(q, kk, v, c.seq_len, c.num_heads)?;
            let o = g.matmul(a, b.wo)?;
            h = g.add(h, o)?;
            let n = g.layer_norm(h, b.ffn_norm.0, b.ffn_norm.1)?;
            let f = self.ffn(g, n, k)?;
            h = g.add(h, f)?;
        }
        let n = g.layer_norm(h, self.norm.0, self.norm.1)?;
        let pooled = g.mean_pool(n, c.seq_len)?;
        let logits = g.matmul(pooled, self.head.0)?;
        g.add_broadcast(logits, self.head.1)
    }
}
