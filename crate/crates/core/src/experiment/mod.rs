//! End-to-end experiment runner: config parsing, synthetic data and
//! codebooks, training, and the evaluation stages that write CSV artifacts.

use std::path::PathBuf;

use thiserror::Error;

use crate::adversarial::AdversarialError;
use crate::autodiff::AutodiffError;
use crate::dataset::DatasetError;
use crate::decoder::DecodeError;
use crate::embedding::EmbeddingError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::semantic::SemanticError;

mod config;
mod pipeline;
mod synth;

pub use config::*;
pub use pipeline::*;
pub use synth::*;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("component {0} is in both the in- and out-of-distribution sets")]
    OverlappingSplit(usize),
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Adversarial(#[from] AdversarialError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// What a run produced and how to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "version {}\nconfig_hash {}\nwall_clock_seconds {:.3}\n",
            self.version, self.config_hash, self.wall_clock_seconds
        );
        for (name, seed) in &self.seeds {
            s.push_str(&format!("seed {name} {seed}\n"));
        }
        for a in &self.artifacts {
            s.push_str(&format!("artifact {}\n", a.display()));
        }
        s
    }
}
