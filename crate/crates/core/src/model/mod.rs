//! Shared-trunk networks with K regression heads, plus the softmax
//! classifier used as a comparison point.
//!
//! The trunk is a ReLU MLP. Every head is `FC → ReLU → FC → FC` on top of the
//! trunk output; the softmax variant has a single head of the same shape
//! whose output is the class logits.

mod ensemble;
mod loss;
mod train;

pub use ensemble::{train_ensemble, Ensemble};
pub use loss::{batch_embedding_loss, embedding_loss_terms, multi_embedding_loss};
pub(crate) use train::argmax;
pub use train::{train, EpochStats, LrSchedule, TrainConfig, TrainLog};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Checkpoint, Graph, Tensor, Var};
use crate::decoder::DecodeError;

pub const INIT_SCHEME: &str = "uniform_fan_in";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has length {found}, model expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("head {head} produced a zero vector; cosine distance is undefined")]
    ZeroOutput { head: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("ensemble seeds must be distinct, {0} appears twice")]
    DuplicateSeed(u64),
    #[error("operation needs a {expected} model")]
    WrongVariant { expected: &'static str },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    MultiEmbed,
    Softmax { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the shared trunk; empty means the heads read the
    /// input directly.
    pub trunk: Vec<usize>,
    /// Output length of each embedding head. Ignored by the softmax variant.
    pub head_dims: Vec<usize>,
    pub head_hidden: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn multi_embed(input_dim: usize, trunk: Vec<usize>, head_dims: Vec<usize>, head_hidden: usize) -> Self {
        ModelConfig {
            input_dim,
            trunk,
            head_dims,
            head_hidden,
            variant: Variant::MultiEmbed,
        }
    }

    pub fn softmax(input_dim: usize, trunk: Vec<usize>, classes: usize, head_hidden: usize) -> Self {
        ModelConfig {
            input_dim,
            trunk,
            head_dims: Vec::new(),
            head_hidden,
            variant: Variant::Softmax { classes },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.head_hidden == 0 || self.trunk.contains(&0) {
            return bad("all widths must be at least 1".into());
        }
        match self.variant {
            Variant::MultiEmbed => {
                if self.head_dims.is_empty() {
                    return bad("a multi-embedding model needs at least one head".into());
                }
                if self.head_dims.contains(&0) {
                    return bad("head dimensions must be at least 1".into());
                }
            }
            Variant::Softmax { classes } => {
                if classes < 2 {
                    return bad(format!("softmax model needs at least 2 classes, got {classes}"));
                }
            }
        }
        Ok(())
    }

    /// Output length of every head.
    pub fn output_dims(&self) -> Vec<usize> {
        match self.variant {
            Variant::MultiEmbed => self.head_dims.clone(),
            Variant::Softmax { classes } => vec![classes],
        }
    }

    pub fn is_softmax(&self) -> bool {
        matches!(self.variant, Variant::Softmax { .. })
    }

    /// Compact single-line form stored in checkpoint manifests.
    pub fn to_manifest(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let variant = match self.variant {
            Variant::MultiEmbed => "multi_embed".to_string(),
            Variant::Softmax { classes } => format!("softmax:{classes}"),
        };
        format!(
            "input_dim={};trunk={};head_dims={};head_hidden={};variant={}",
            self.input_dim,
            list(&self.trunk),
            list(&self.head_dims),
            self.head_hidden,
            variant
        )
    }

    pub fn from_manifest(s: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::Config(format!("unreadable config '{s}'"));
        let list = |v: &str| -> Result<Vec<usize>, ModelError> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.parse().map_err(|_| bad())).collect()
        };
        let (mut input_dim, mut trunk, mut head_dims, mut head_hidden, mut variant) =
            (None, None, None, None, None);
        for field in s.split(';') {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "input_dim" => input_dim = Some(v.parse().map_err(|_| bad())?),
                "trunk" => trunk = Some(list(v)?),
                "head_dims" => head_dims = Some(list(v)?),
                "head_hidden" => head_hidden = Some(v.parse().map_err(|_| bad())?),
                "variant" => {
                    variant = Some(if v == "multi_embed" {
                        Variant::MultiEmbed
                    } else if let Some(c) = v.strip_prefix("softmax:") {
                        Variant::Softmax {
                            classes: c.parse().map_err(|_| bad())?,
                        }
                    } else {
                        return Err(bad());
                    })
                }
                _ => return Err(bad()),
            }
        }
        let cfg = ModelConfig {
            input_dim: input_dim.ok_or_else(bad)?,
            trunk: trunk.ok_or_else(bad)?,
            head_dims: head_dims.ok_or_else(bad)?,
            head_hidden: head_hidden.ok_or_else(bad)?,
            variant: variant.ok_or_else(bad)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network parameters with their configuration.
///
/// Parameters are stored trunk first (`weight`, `bias` per layer), then
/// `fc1`, `fc2`, `fc3` of every head. Weights are `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadModel {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn layer_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut layers = Vec::new();
    let mut width = cfg.input_dim;
    for (i, &h) in cfg.trunk.iter().enumerate() {
        layers.push((format!("trunk.{i}"), width, h));
        width = h;
    }
    for (k, &d) in cfg.output_dims().iter().enumerate() {
        layers.push((format!("head.{k}.fc1"), width, cfg.head_hidden));
        layers.push((format!("head.{k}.fc2"), cfg.head_hidden, cfg.head_hidden));
        layers.push((format!("head.{k}.fc3"), cfg.head_hidden, d));
    }
    layers
}

impl MultiHeadModel {
    /// Fresh model; weights and biases are uniform in `±1/√fan_in`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in layer_shapes(&config) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            names.push(format!("{name}.weight"));
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            names.push(format!("{name}.bias"));
            params.push(Tensor::vector(b));
        }
        Ok(MultiHeadModel {
            config,
            seed,
            epoch: 0,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn num_heads(&self) -> usize {
        self.config.output_dims().len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub(crate) fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn trunk_param_count(&self) -> usize {
        2 * self.config.trunk.len()
    }

    /// Parameter indices owned by head `k`.
    pub fn head_param_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.trunk_param_count() + 6 * k;
        start..start + 6
    }

    /// Parameter indices of the shared trunk.
    pub fn trunk_param_range(&self) -> std::ops::Range<usize> {
        0..self.trunk_param_count()
    }

    /// Puts every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass for a batch `x` of shape `[B, input_dim]`; returns one
    /// `[B, D_k]` node per head.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Vec<Var>, ModelError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(ModelError::InputLength {
                expected: self.config.input_dim,
                found: *shape.last().unwrap_or(&0),
            });
        }
        let linear = |g: &mut Graph, h: Var, i: usize| -> Result<Var, AutodiffError> {
            let z = g.matmul(h, params[2 * i])?;
            g.add_bias(z, params[2 * i + 1])
        };
        let mut h = x;
        for i in 0..self.config.trunk.len() {
            let z = linear(g, h, i)?;
            h = g.relu(z)?;
        }
        let base = self.config.trunk.len();
        let mut outputs = Vec::with_capacity(self.num_heads());
        for k in 0..self.num_heads() {
            let l = base + 3 * k;
            let z1 = linear(g, h, l)?;
            let a1 = g.relu(z1)?;
            let z2 = linear(g, a1, l + 1)?;
            outputs.push(linear(g, z2, l + 2)?);
        }
        Ok(outputs)
    }

    /// Head outputs for a batch of rows; `result[k]` is `[B, D_k]`.
    pub fn forward_batch(&self, rows: &[f64]) -> Result<Vec<Tensor>, ModelError> {
        let p = self.config.input_dim;
        if rows.is_empty() || !rows.len().is_multiple_of(p) {
            return Err(ModelError::InputLength {
                expected: p,
                found: rows.len(),
            });
        }
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(rows.len() / p, p, rows.to_vec())?);
        let outs = self.forward_graph(&mut g, &params, x)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Head outputs for a single feature vector (logits for the softmax
    /// variant, as a single head).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        if x.len() != self.config.input_dim {
            return Err(ModelError::InputLength {
                expected: self.config.input_dim,
                found: x.len(),
            });
        }
        Ok(self
            .forward_batch(x)?
            .into_iter()
            .map(Tensor::into_data)
            .collect())
    }

    /// Per-example head outputs for many rows, evaluated in chunks.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let p = self.config.input_dim;
        let mut result = Vec::with_capacity(rows.len() / p.max(1));
        for chunk in rows.chunks(256 * p) {
            let outs = self.forward_batch(chunk)?;
            let b = chunk.len() / p;
            for i in 0..b {
                result.push(outs.iter().map(|t| t.row(i).to_vec()).collect());
            }
        }
        Ok(result)
    }

    /// Class logits of a softmax model for each row.
    pub fn logits_rows(&self, rows: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        if !self.config.is_softmax() {
            return Err(ModelError::WrongVariant { expected: "softmax" });
        }
        Ok(self
            .predict_rows(rows)?
            .into_iter()
            .map(|mut heads| heads.swap_remove(0))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, ModelError> {
        let mut ck = Checkpoint::new(self.seed);
        ck.set_meta("config", self.config.to_manifest())?;
        ck.set_meta("epoch", self.epoch)?;
        ck.set_meta("init", INIT_SCHEME)?;
        for (n, t) in self.names.iter().zip(&self.params) {
            ck.push(n, t.clone())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let config = ModelConfig::from_manifest(
            ck.meta("config")
                .ok_or_else(|| ModelError::Config("checkpoint lacks a config".into()))?,
        )?;
        let epoch = ck
            .meta("epoch")
            .and_then(|e| e.parse().ok())
            .ok_or_else(|| ModelError::Config("checkpoint lacks an epoch".into()))?;
        let mut model = MultiHeadModel::new(config, ck.seed())?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = ck
                .get(name)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(ModelError::Config(format!("'{name}' has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        model.epoch = epoch;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
