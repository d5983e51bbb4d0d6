use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{EmbeddingError, EmbeddingSpace};

/// Maps class names to the word used to look them up in an embedding space,
/// e.g. `pickup_truck truck`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    map: HashMap<String, String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class_name: impl Into<String>, word: impl Into<String>) {
        self.map.insert(class_name.into(), word.into());
    }

    /// Parses the two-column `class_name embedding_word` text format.
    pub fn parse(text: &str) -> Result<Self, EmbeddingError> {
        let mut table = AliasTable::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() != 2 {
                return Err(EmbeddingError::Parse {
                    line: i + 1,
                    message: format!("alias line needs 2 fields, found {}", fields.len()),
                });
            }
            table.insert(fields[0], fields[1]);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn resolve<'a>(&'a self, label: &'a str) -> &'a str {
        self.map.get(label).map(String::as_str).unwrap_or(label)
    }
}

/// Per-space target matrices for an ordered label set.
///
/// Row `y` of space `k` is the unit-normalized embedding of label `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCodebook {
    labels: Vec<String>,
    space_names: Vec<String>,
    dims: Vec<usize>,
    targets: Vec<Vec<f64>>,
}

impl LabelCodebook {
    /// Builds a codebook directly from target rows; rows are normalized.
    pub fn from_rows(
        labels: Vec<String>,
        spaces: Vec<(String, Vec<Vec<f64>>)>,
    ) -> Result<Self, EmbeddingError> {
        let n = labels.len();
        if n == 0 {
            return Err(EmbeddingError::InvalidCodebook("no labels".into()));
        }
        if spaces.is_empty() {
            return Err(EmbeddingError::InvalidCodebook("need at least one space".into()));
        }
        let mut seen = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if let Some(j) = seen.insert(l.as_str(), i) {
                return Err(EmbeddingError::InvalidCodebook(format!(
                    "label '{l}' appears at positions {j} and {i}"
                )));
            }
        }
        let mut space_names = Vec::with_capacity(spaces.len());
        let mut dims = Vec::with_capacity(spaces.len());
        let mut targets = Vec::with_capacity(spaces.len());
        for (name, rows) in spaces {
            if rows.len() != n {
                return Err(EmbeddingError::InvalidCodebook(format!(
                    "space '{name}' has {} rows for {n} labels",
                    rows.len()
                )));
            }
            let dim = rows[0].len();
            if dim == 0 {
                return Err(EmbeddingError::InvalidCodebook(format!(
                    "space '{name}' has zero dimensionality"
                )));
            }
            let mut flat = Vec::with_capacity(n * dim);
            for (y, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(EmbeddingError::LengthMismatch(dim, row.len()));
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(EmbeddingError::InvalidCodebook(format!(
                        "label '{}' has a zero or non-finite vector in space '{name}'",
                        labels[y]
                    )));
                }
                flat.extend(row.iter().map(|v| v / norm));
            }
            space_names.push(name);
            dims.push(dim);
            targets.push(flat);
        }
        Ok(LabelCodebook {
            labels,
            space_names,
            dims,
            targets,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_spaces(&self) -> usize {
        self.targets.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn space_names(&self) -> &[String] {
        &self.space_names
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Unit-normalized target of label `y` in space `k`.
    pub fn target(&self, k: usize, y: usize) -> &[f64] {
        let d = self.dims[k];
        &self.targets[k][y * d..(y + 1) * d]
    }

    /// Row-major `N × D_k` target matrix of space `k`.
    pub fn matrix(&self, k: usize) -> &[f64] {
        &self.targets[k]
    }

    /// Codebook restricted to a subset of spaces, in the given order.
    pub fn select_spaces(&self, spaces: &[usize]) -> Result<LabelCodebook, EmbeddingError> {
        if spaces.is_empty() {
            return Err(EmbeddingError::InvalidCodebook("need at least one space".into()));
        }
        if let Some(&bad) = spaces.iter().find(|&&k| k >= self.num_spaces()) {
            return Err(EmbeddingError::InvalidCodebook(format!(
                "space index {bad} out of range"
            )));
        }
        Ok(LabelCodebook {
            labels: self.labels.clone(),
            space_names: spaces.iter().map(|&k| self.space_names[k].clone()).collect(),
            dims: spaces.iter().map(|&k| self.dims[k]).collect(),
            targets: spaces.iter().map(|&k| self.targets[k].clone()).collect(),
        })
    }
}

/// Assembles a codebook for `labels` from `spaces`, resolving class names
/// through `aliases` first. Every label must resolve in every space.
pub fn build_codebook(
    spaces: &[EmbeddingSpace],
    labels: &[String],
    aliases: Option<&AliasTable>,
) -> Result<LabelCodebook, EmbeddingError> {
    let empty = AliasTable::new();
    let aliases = aliases.unwrap_or(&empty);

    let mut missing = Vec::new();
    for label in labels {
        let word = aliases.resolve(label);
        for space in spaces {
            if !space.contains(word) {
                missing.push((label.clone(), space.name().to_string()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(EmbeddingError::MissingLabels(missing));
    }

    let rows = spaces
        .iter()
        .map(|space| {
            let rows = labels
                .iter()
                .map(|l| space.get(aliases.resolve(l)).expect("checked above").to_vec())
                .collect();
            (space.name().to_string(), rows)
        })
        .collect();
    LabelCodebook::from_rows(labels.to_vec(), rows)
}
