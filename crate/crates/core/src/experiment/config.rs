use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::UpdateRule;
use crate::embedding::EmbeddingFormat;
use crate::metrics::{DEFAULT_ODIN_EPSILONS, DEFAULT_ODIN_TEMPERATURES};
use crate::model::{LrSchedule, TrainConfig};

use super::ExperimentError;

/// Every recognised key with its default. `None` means "no default, unset
/// unless given".
const SCHEMA: &[(&str, Option<&str>)] = &[
    ("seed", Some("7")),
    ("data.generator", Some("gaussian_mixture")),
    ("data.in_classes", Some("8")),
    ("data.out_classes", Some("4")),
    ("data.in_components", None),
    ("data.out_components", None),
    ("data.dim", Some("16")),
    ("data.samples_per_class", Some("500")),
    ("data.separation", Some("4.0")),
    ("data.noise", Some("1.0")),
    ("data.clip", Some("8.0")),
    ("data.test_fraction", Some("0.2")),
    ("data.val_fraction", Some("0.2")),
    ("data.out_val_fraction", Some("0.5")),
    ("data.seed", None),
    ("codebook.source", Some("synthetic")),
    ("codebook.spaces", Some("5")),
    ("codebook.dims", Some("16")),
    ("codebook.diversity", Some("0.5")),
    ("codebook.seed", None),
    ("codebook.files", None),
    ("codebook.format", Some("headerless")),
    ("codebook.aliases", None),
    ("model.trunk", Some("64")),
    ("model.head_hidden", Some("32")),
    ("train.epochs", Some("30")),
    ("train.batch_size", Some("64")),
    ("train.optimizer", Some("sgd")),
    ("train.lr", Some("0.05")),
    ("train.momentum", Some("0.9")),
    ("train.weight_decay", Some("0.0005")),
    ("train.milestones", Some("")),
    ("train.lr_factor", Some("0.1")),
    ("train.seed", None),
    ("eval.models", Some("baseline,odin,ensemble,embed1,embed3,embed5")),
    ("eval.ensemble_size", Some("5")),
    ("eval.odin_temperatures", None),
    ("eval.odin_epsilons", None),
    ("eval.tpr", Some("0.95")),
    ("eval.histogram_bins", Some("30")),
    ("eval.adversarial", Some("true")),
    ("eval.fgsm_epsilon", Some("0.5")),
    ("eval.surrogate_trunk", Some("48")),
    ("eval.surrogate_seed", None),
    ("eval.target_frr", Some("0.03")),
    ("eval.semantic", Some("true")),
    ("semantic.taxonomy", None),
    ("semantic.label_map", None),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub generator: String,
    /// Mixture components used as in-distribution classes.
    pub in_components: Vec<usize>,
    /// Held-out components used as out-of-distribution data.
    pub out_components: Vec<usize>,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere the component means lie on.
    pub separation: f64,
    pub noise: f64,
    /// Features are clipped to `[-clip, clip]`.
    pub clip: f64,
    pub test_fraction: f64,
    /// Share of the non-test in-distribution samples held out for
    /// validation (threshold and ODIN calibration).
    pub val_fraction: f64,
    pub out_val_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodebookSource {
    Synthetic { diversity: f64, seed: u64 },
    Files {
        paths: Vec<PathBuf>,
        format: EmbeddingFormat,
        aliases: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSpec {
    pub source: CodebookSource,
    pub dims: Vec<usize>,
}

impl CodebookSpec {
    pub fn spaces(&self) -> usize {
        self.dims.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Baseline,
    Odin,
    Ensemble,
    Embed(usize),
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::Baseline => "baseline".into(),
            ModelKind::Odin => "odin".into(),
            ModelKind::Ensemble => "ensemble".into(),
            ModelKind::Embed(k) => format!("embed{k}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "odin" => Ok(ModelKind::Odin),
            "ensemble" => Ok(ModelKind::Ensemble),
            _ => s
                .strip_prefix("embed")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(ModelKind::Embed)
                .ok_or_else(|| format!("unknown model '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub models: Vec<ModelKind>,
    pub ensemble_size: usize,
    pub odin_temperatures: Vec<f64>,
    pub odin_epsilons: Vec<f64>,
    pub tpr: f64,
    pub histogram_bins: usize,
    pub adversarial: bool,
    pub fgsm_epsilon: f64,
    pub surrogate_trunk: Vec<usize>,
    pub surrogate_seed: u64,
    pub target_frr: f64,
    pub semantic: bool,
    pub taxonomy: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
}

impl EvalSpec {
    pub fn has(&self, kind: ModelKind) -> bool {
        self.models.contains(&kind)
    }

    /// Embedding-model sizes, ascending.
    pub fn embed_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .models
            .iter()
            .filter_map(|m| match m {
                ModelKind::Embed(k) => Some(*k),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn needs_softmax_baseline(&self) -> bool {
        self.has(ModelKind::Baseline) || self.has(ModelKind::Odin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub codebook: CodebookSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    resolved: BTreeMap<String, String>,
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ExperimentError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.trim().parse().map_err(|_| ExperimentError::Config {
                key: key.to_string(),
                message: format!("cannot parse list item '{x}'"),
            })
        })
        .collect()
}

struct Values<'a>(&'a BTreeMap<String, String>);

impl Values<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, ExperimentError>
    where
        T::Err: Display,
    {
        let v = self.raw(key).ok_or_else(|| ExperimentError::Config {
            key: key.into(),
            message: "missing".into(),
        })?;
        v.parse().map_err(|e: T::Err| ExperimentError::Config {
            key: key.into(),
            message: format!("'{v}': {e}"),
        })
    }

    fn seed(&self, key: &str, master: u64, offset: u64) -> Result<u64, ExperimentError> {
        match self.raw(key) {
            Some(_) => self.get(key),
            None => Ok(master.wrapping_add(offset)),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines. `#` starts a comment; `[section]` lines
    /// prefix following keys with `section.`.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut given = BTreeMap::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(&format!("line {}", i + 1), "expected 'key = value'"))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if given.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(invalid(&key, "given twice"));
            }
        }
        Self::from_map(given)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ExperimentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Replaces the master seed, re-deriving any component seed that was not
    /// set explicitly.
    pub fn with_seed(self, seed: u64) -> Result<Self, ExperimentError> {
        let mut given = self.given_keys();
        given.insert("seed".into(), seed.to_string());
        Self::from_map(given)
    }

    fn given_keys(&self) -> BTreeMap<String, String> {
        self.resolved
            .iter()
            .filter(|(k, v)| {
                let default = SCHEMA.iter().find(|(s, _)| s == k).and_then(|(_, d)| *d);
                default != Some(v.as_str()) && !k.starts_with("derived.")
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn from_map(given: BTreeMap<String, String>) -> Result<Self, ExperimentError> {
        for k in given.keys() {
            if !SCHEMA.iter().any(|(s, _)| s == k) {
                return Err(invalid(k, "unknown key"));
            }
        }
        let mut all = given.clone();
        for (k, d) in SCHEMA {
            if let Some(d) = d {
                all.entry(k.to_string()).or_insert_with(|| d.to_string());
            }
        }
        let v = Values(&all);
        let seed: u64 = v.get("seed")?;

        let in_count: usize = v.get("data.in_classes")?;
        let out_count: usize = v.get("data.out_classes")?;
        let in_components = match v.raw("data.in_components") {
            Some(s) => list("data.in_components", s)?,
            None => (0..in_count).collect(),
        };
        let out_components = match v.raw("data.out_components") {
            Some(s) => list("data.out_components", s)?,
            None => (in_components.len()..in_components.len() + out_count).collect(),
        };
        let data = DataSpec {
            generator: v.get("data.generator")?,
            in_components,
            out_components,
            dim: v.get("data.dim")?,
            samples_per_class: v.get("data.samples_per_class")?,
            separation: v.get("data.separation")?,
            noise: v.get("data.noise")?,
            clip: v.get("data.clip")?,
            test_fraction: v.get("data.test_fraction")?,
            val_fraction: v.get("data.val_fraction")?,
            out_val_fraction: v.get("data.out_val_fraction")?,
            seed: v.seed("data.seed", seed, 1)?,
        };
        if data.generator != "gaussian_mixture" {
            return Err(invalid("data.generator", "only 'gaussian_mixture' is available"));
        }

        let spaces: usize = v.get("codebook.spaces")?;
        let mut dims: Vec<usize> = list("codebook.dims", v.raw("codebook.dims").unwrap_or(""))?;
        if dims.len() == 1 {
            dims = vec![dims[0]; spaces];
        }
        if dims.len() != spaces {
            return Err(invalid("codebook.dims", format!("need 1 or {spaces} values")));
        }
        let source = match v.raw("codebook.source").unwrap_or("") {
            "synthetic" => CodebookSource::Synthetic {
                diversity: v.get("codebook.diversity")?,
                seed: v.seed("codebook.seed", seed, 2)?,
            },
            "files" => {
                let paths: Vec<PathBuf> =
                    list("codebook.files", v.raw("codebook.files").unwrap_or(""))?;
                if paths.len() != spaces {
                    return Err(invalid("codebook.files", format!("need {spaces} paths")));
                }
                let format = match v.raw("codebook.format").unwrap_or("") {
                    "headered" => EmbeddingFormat::Headered,
                    "headerless" => EmbeddingFormat::Headerless,
                    other => return Err(invalid("codebook.format", format!("unknown format '{other}'"))),
                };
                CodebookSource::Files {
                    paths,
                    format,
                    aliases: v.raw("codebook.aliases").map(PathBuf::from),
                }
            }
            other => return Err(invalid("codebook.source", format!("unknown source '{other}'"))),
        };

        let model = ModelSpec {
            trunk: list("model.trunk", v.raw("model.trunk").unwrap_or(""))?,
            head_hidden: v.get("model.head_hidden")?,
        };

        let lr: f64 = v.get("train.lr")?;
        let rule = match v.raw("train.optimizer").unwrap_or("") {
            "sgd" => UpdateRule::SgdMomentum {
                lr,
                momentum: v.get("train.momentum")?,
                weight_decay: v.get("train.weight_decay")?,
            },
            "adam" => UpdateRule::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            other => return Err(invalid("train.optimizer", format!("unknown optimizer '{other}'"))),
        };
        let milestones: Vec<usize> = list("train.milestones", v.raw("train.milestones").unwrap_or(""))?;
        let train = TrainConfig {
            epochs: v.get("train.epochs")?,
            batch_size: v.get("train.batch_size")?,
            rule,
            schedule: if milestones.is_empty() {
                LrSchedule::Constant
            } else {
                LrSchedule::Step {
                    milestones,
                    factor: v.get("train.lr_factor")?,
                }
            },
            seed: v.seed("train.seed", seed, 3)?,
        };

        let models: Vec<ModelKind> = v
            .raw("eval.models")
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: String| invalid("eval.models", e)))
            .collect::<Result<_, _>>()?;
        let eval = EvalSpec {
            models,
            ensemble_size: v.get("eval.ensemble_size")?,
            odin_temperatures: match v.raw("eval.odin_temperatures") {
                Some(s) => list("eval.odin_temperatures", s)?,
                None => DEFAULT_ODIN_TEMPERATURES.to_vec(),
            },
            odin_epsilons: match v.raw("eval.odin_epsilons") {
                Some(s) => list("eval.odin_epsilons", s)?,
                None => DEFAULT_ODIN_EPSILONS.to_vec(),
            },
            tpr: v.get("eval.tpr")?,
            histogram_bins: v.get("eval.histogram_bins")?,
            adversarial: v.get("eval.adversarial")?,
            fgsm_epsilon: v.get("eval.fgsm_epsilon")?,
            surrogate_trunk: list("eval.surrogate_trunk", v.raw("eval.surrogate_trunk").unwrap_or(""))?,
            surrogate_seed: v.seed("eval.surrogate_seed", seed, 4)?,
            target_frr: v.get("eval.target_frr")?,
            semantic: v.get("eval.semantic")?,
            taxonomy: v.raw("semantic.taxonomy").map(PathBuf::from),
            label_map: v.raw("semantic.label_map").map(PathBuf::from),
        };

        let mut resolved = all;
        resolved.insert("derived.data_seed".into(), data.seed.to_string());
        if let CodebookSource::Synthetic { seed, .. } = &source {
            resolved.insert("derived.codebook_seed".into(), seed.to_string());
        }
        resolved.insert("derived.train_seed".into(), train.seed.to_string());
        resolved.insert("derived.surrogate_seed".into(), eval.surrogate_seed.to_string());

        let cfg = ExperimentConfig {
            seed,
            data,
            codebook: CodebookSpec { source, dims },
            model,
            train,
            eval,
            resolved,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let d = &self.data;
        if d.in_components.len() < 2 {
            return Err(invalid("data.in_classes", "need at least 2 in-distribution classes"));
        }
        if d.out_components.is_empty() {
            return Err(invalid("data.out_classes", "need at least 1 out-of-distribution class"));
        }
        if let Some(c) = d.in_components.iter().find(|c| d.out_components.contains(c)) {
            return Err(ExperimentError::OverlappingSplit(*c));
        }
        let mut all: Vec<usize> = d.in_components.iter().chain(&d.out_components).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("data.in_components", "component listed twice"));
        }
        if d.dim == 0 || d.samples_per_class < 4 {
            return Err(invalid("data.samples_per_class", "need dim >= 1 and at least 4 samples per class"));
        }
        for (key, f) in [
            ("data.test_fraction", d.test_fraction),
            ("data.val_fraction", d.val_fraction),
            ("data.out_val_fraction", d.out_val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(invalid(key, "must lie strictly between 0 and 1"));
            }
        }
        if !(d.clip > 0.0) || !(d.noise >= 0.0) || !(d.separation >= 0.0) {
            return Err(invalid("data.clip", "clip must be positive, noise and separation non-negative"));
        }
        if self.codebook.dims.iter().any(|&x| x < 2) {
            return Err(invalid("codebook.dims", "dimensions must be at least 2"));
        }
        for k in self.eval.embed_sizes() {
            if k > self.codebook.spaces() {
                return Err(invalid("eval.models", format!("embed{k} needs {k} codebook spaces")));
            }
        }
        if self.eval.has(ModelKind::Ensemble) && self.eval.ensemble_size < 2 {
            return Err(invalid("eval.ensemble_size", "an ensemble needs at least 2 members"));
        }
        if !(self.eval.tpr > 0.0 && self.eval.tpr <= 1.0) {
            return Err(invalid("eval.tpr", "must lie in (0, 1]"));
        }
        if self.eval.histogram_bins == 0 {
            return Err(invalid("eval.histogram_bins", "must be at least 1"));
        }
        Ok(())
    }

    pub fn in_labels(&self) -> Vec<String> {
        self.data.in_components.iter().map(|c| format!("class{c}")).collect()
    }

    /// Canonical `key = value` text of every setting, defaults included.
    pub fn canonical(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Component seeds by name.
    pub fn seeds(&self) -> Vec<(String, u64)> {
        let mut v = vec![("master".to_string(), self.seed), ("data".into(), self.data.seed)];
        if let CodebookSource::Synthetic { seed, .. } = self.codebook.source {
            v.push(("codebook".into(), seed));
        }
        v.push(("train".into(), self.train.seed));
        v.push(("surrogate".into(), self.eval.surrogate_seed));
        v
    }
}
