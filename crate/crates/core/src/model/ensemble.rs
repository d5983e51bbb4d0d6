use std::collections::HashSet;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::metrics::softmax;

use super::train::argmax;
use super::{train, ModelConfig, ModelError, MultiHeadModel, TrainConfig, TrainLog};

/// Independently trained softmax classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<MultiHeadModel>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Class probabilities of every member for every row: `[member][row][class]`.
    pub fn member_probabilities(&self, rows: &[f64]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        self.members
            .iter()
            .map(|m| Ok(m.logits_rows(rows)?.iter().map(|l| softmax(l)).collect()))
            .collect()
    }

    /// Average of member probabilities per row.
    pub fn mean_probabilities(&self, rows: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
        let per = self.member_probabilities(rows)?;
        let m = per.len() as f64;
        Ok((0..per[0].len())
            .map(|i| {
                let mut acc = vec![0.0; per[0][i].len()];
                for member in &per {
                    for (a, p) in acc.iter_mut().zip(&member[i]) {
                        *a += p / m;
                    }
                }
                acc
            })
            .collect())
    }

    /// Argmax label of each member for each row: `[row][member]`.
    pub fn member_argmax(&self, rows: &[f64]) -> Result<Vec<Vec<usize>>, ModelError> {
        let per = self.member_probabilities(rows)?;
        Ok((0..per[0].len())
            .map(|i| per.iter().map(|m| argmax(&m[i])).collect())
            .collect())
    }

    pub fn predict(&self, rows: &[f64]) -> Result<Vec<usize>, ModelError> {
        Ok(self.mean_probabilities(rows)?.iter().map(|p| argmax(p)).collect())
    }
}

/// Trains one softmax model per seed, in parallel. Each seed drives both the
/// initialization and the shuffle of its member.
pub fn train_ensemble(
    config: &ModelConfig,
    seeds: &[u64],
    data: &Dataset,
    train_cfg: &TrainConfig,
) -> Result<(Ensemble, Vec<TrainLog>), ModelError> {
    if !config.is_softmax() {
        return Err(ModelError::WrongVariant { expected: "softmax" });
    }
    if seeds.is_empty() {
        return Err(ModelError::Config("an ensemble needs at least one seed".into()));
    }
    let mut seen = HashSet::new();
    if let Some(&dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(ModelError::DuplicateSeed(dup));
    }
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let model = MultiHeadModel::new(config.clone(), seed)?;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            train(model, data, None, &cfg)
        })
        .collect::<Result<_, _>>()?;
    let (members, logs) = results.into_iter().unzip();
    Ok((Ensemble { members }, logs))
}
