//! Black-box FGSM through a surrogate softmax model, and detectors that flag
//! inputs on which the predictors disagree.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::dataset::Dataset;
use crate::decoder::{soft_decode, DecodeError};
use crate::embedding::LabelCodebook;
use crate::metrics::sign;
use crate::model::{ModelError, MultiHeadModel};

#[derive(Debug, Error)]
pub enum AdversarialError {
    #[error("perturbation size must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("the agreement rule needs at least 2 heads")]
    SingleHead,
    #[error("{0} flag list is empty")]
    Empty(&'static str),
    #[error("no strictness levels given")]
    NoLevels,
    #[error("dataset declares no input range")]
    NoRange,
    #[error("surrogate must be a softmax model")]
    NotSoftmax,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Applies a sign step to `x` and clips to `[lo, hi]`.
pub fn fgsm_step(x: &[f64], grad: &[f64], epsilon: f64, (lo, hi): (f64, f64)) -> Vec<f64> {
    x.iter()
        .zip(grad)
        .map(|(&v, &g)| (v + epsilon * sign(g)).clamp(lo, hi))
        .collect()
}

/// Gradient of the summed cross-entropy of `surrogate` with respect to each
/// input row.
fn input_gradients(surrogate: &MultiHeadModel, rows: &[f64], labels: &[usize]) -> Result<Vec<f64>, AdversarialError> {
    let Some(classes) = (match surrogate.config().variant {
        crate::model::Variant::Softmax { classes } => Some(classes),
        _ => None,
    }) else {
        return Err(AdversarialError::NotSoftmax);
    };
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(AdversarialError::LabelOutOfRange { label, classes });
    }
    let p = surrogate.config().input_dim;
    let mut g = Graph::new();
    let params = surrogate.bind(&mut g, false);
    let x = g.param(Tensor::matrix(labels.len(), p, rows.to_vec()).map_err(ModelError::from)?);
    let outs = surrogate.forward_graph(&mut g, &params, x)?;
    let ce = g.cross_entropy(outs[0], labels).map_err(ModelError::from)?;
    let loss = g.sum(ce).map_err(ModelError::from)?;
    let grads = g.backward(loss).map_err(ModelError::from)?;
    Ok(grads.get(x).expect("input requires a gradient").data().to_vec())
}

/// One FGSM step against `surrogate` for a single input.
pub fn fgsm(
    surrogate: &MultiHeadModel,
    x: &[f64],
    label: usize,
    epsilon: f64,
    range: (f64, f64),
) -> Result<Vec<f64>, AdversarialError> {
    if !(epsilon >= 0.0) {
        return Err(AdversarialError::NegativeEpsilon(epsilon));
    }
    if x.len() != surrogate.config().input_dim {
        return Err(ModelError::InputLength {
            expected: surrogate.config().input_dim,
            found: x.len(),
        }
        .into());
    }
    let grad = input_gradients(surrogate, x, &[label])?;
    Ok(fgsm_step(x, &grad, epsilon, range))
}

/// Clean inputs with their FGSM counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Dataset,
    pub perturbed: Dataset,
    pub epsilon: f64,
    /// Identifies the surrogate checkpoint the batch was crafted on.
    pub surrogate_id: String,
}

impl AdversarialBatch {
    /// Header: `example_id`, `orig_0..`, `adv_0..`, `epsilon`, `surrogate_id`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let p = self.originals.dim();
        let mut header = vec!["example_id".to_string()];
        header.extend((0..p).map(|j| format!("orig_{j}")));
        header.extend((0..p).map(|j| format!("adv_{j}")));
        header.push("epsilon".into());
        header.push("surrogate_id".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.originals.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.originals.row(i).iter().map(f64::to_string));
            row.extend(self.perturbed.row(i).iter().map(f64::to_string));
            row.push(self.epsilon.to_string());
            row.push(self.surrogate_id.clone());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// FGSM over a whole dataset, clipped to the dataset's declared range.
pub fn fgsm_batch(
    surrogate: &MultiHeadModel,
    data: &Dataset,
    epsilon: f64,
    surrogate_id: impl Into<String>,
) -> Result<AdversarialBatch, AdversarialError> {
    if !(epsilon >= 0.0) {
        return Err(AdversarialError::NegativeEpsilon(epsilon));
    }
    let range = data.range().ok_or(AdversarialError::NoRange)?;
    let p = data.dim();
    let mut perturbed = Vec::with_capacity(data.features().len());
    for (rows, labels) in data.features().chunks(256 * p).zip(data.labels().chunks(256)) {
        let grad = input_gradients(surrogate, rows, labels)?;
        perturbed.extend(fgsm_step(rows, &grad, epsilon, range));
    }
    let perturbed = Dataset::new(p, perturbed, data.labels().to_vec())
        .expect("same shape as the clean set")
        .with_range(range.0, range.1);
    Ok(AdversarialBatch {
        originals: data.clone(),
        perturbed,
        epsilon,
        surrogate_id: surrogate_id.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Clean,
    Adversarial,
}

/// Size of the largest group of voters naming the same label.
pub fn agreement_count(votes: &[usize]) -> usize {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    counts.into_values().max().unwrap_or(0)
}

/// Clean iff every head's nearest label is the same.
pub fn agreement_detector<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
) -> Result<Verdict, AdversarialError> {
    if outputs.len() < 2 {
        return Err(AdversarialError::SingleHead);
    }
    let nearest = soft_decode(outputs, codebook)?.per_head_nearest;
    Ok(if agreement_count(&nearest) == nearest.len() {
        Verdict::Clean
    } else {
        Verdict::Adversarial
    })
}

/// Clean iff every ensemble member predicts the same class.
pub fn unanimity_detector(member_labels: &[usize]) -> Verdict {
    if agreement_count(member_labels) == member_labels.len() {
        Verdict::Clean
    } else {
        Verdict::Adversarial
    }
}

/// Max minus min, across heads, of the decoded label's rank.
pub fn ranking_spread<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
) -> Result<usize, AdversarialError> {
    let ranks = soft_decode(outputs, codebook)?.per_head_rank_of_label;
    Ok(ranks.iter().max().expect("K >= 1") - ranks.iter().min().expect("K >= 1"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRates {
    pub detection_rate: f64,
    pub false_rejection_rate: f64,
}

fn flagged_fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// `true` in a flag list means "flagged as adversarial".
pub fn detection_rates(
    flags_on_adversarial: &[bool],
    flags_on_clean: &[bool],
) -> Result<DetectionRates, AdversarialError> {
    if flags_on_adversarial.is_empty() {
        return Err(AdversarialError::Empty("adversarial"));
    }
    if flags_on_clean.is_empty() {
        return Err(AdversarialError::Empty("clean"));
    }
    Ok(DetectionRates {
        detection_rate: flagged_fraction(flags_on_adversarial),
        false_rejection_rate: flagged_fraction(flags_on_clean),
    })
}

/// Detector flags at one strictness setting.
#[derive(Debug, Clone, PartialEq)]
pub struct StrictnessLevel {
    /// Setting value, e.g. the required agreement count.
    pub setting: usize,
    pub clean_validation_flags: Vec<bool>,
    pub adversarial_flags: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    pub setting: usize,
    /// False rejection on the clean validation set.
    pub validation_frr: f64,
    pub detection_rate: f64,
    /// `false` when no setting reached the target and the least-rejecting
    /// one was reported instead.
    pub met_target: bool,
}

/// Picks the strictest level whose clean-validation FRR is within
/// `target_frr` and reports its detection rate. `levels` go from least to
/// most strict.
pub fn matched_frr_detection(
    levels: &[StrictnessLevel],
    target_frr: f64,
) -> Result<MatchedDetection, AdversarialError> {
    if levels.is_empty() {
        return Err(AdversarialError::NoLevels);
    }
    let mut rated = Vec::with_capacity(levels.len());
    for l in levels {
        let r = detection_rates(&l.adversarial_flags, &l.clean_validation_flags)?;
        rated.push((l.setting, r));
    }
    let to_result = |&(setting, r): &(usize, DetectionRates), met_target| MatchedDetection {
        setting,
        validation_frr: r.false_rejection_rate,
        detection_rate: r.detection_rate,
        met_target,
    };
    if let Some(hit) = rated
        .iter()
        .rev()
        .find(|(_, r)| r.false_rejection_rate <= target_frr)
    {
        return Ok(to_result(hit, true));
    }
    let least = rated
        .iter()
        .min_by(|a, b| a.1.false_rejection_rate.total_cmp(&b.1.false_rejection_rate))
        .expect("nonempty");
    Ok(to_result(least, false))
}

/// Levels of the "at least `m` voters agree" rule for `m` in `ms`.
pub fn agreement_ladder(
    clean_validation_counts: &[usize],
    adversarial_counts: &[usize],
    ms: impl IntoIterator<Item = usize>,
) -> Vec<StrictnessLevel> {
    ms.into_iter()
        .map(|m| StrictnessLevel {
            setting: m,
            clean_validation_flags: clean_validation_counts.iter().map(|&c| c < m).collect(),
            adversarial_flags: adversarial_counts.iter().map(|&c| c < m).collect(),
        })
        .collect()
}

/// Writes `spread_value,count_clean,count_adversarial` for every spread from
/// 0 to the largest observed.
pub fn write_spread_histogram<W: Write>(mut w: W, clean: &[usize], adversarial: &[usize]) -> io::Result<()> {
    let max = clean.iter().chain(adversarial).copied().max().unwrap_or(0);
    let mut counts = vec![(0usize, 0usize); max + 1];
    for &s in clean {
        counts[s].0 += 1;
    }
    for &s in adversarial {
        counts[s].1 += 1;
    }
    writeln!(w, "spread_value,count_clean,count_adversarial")?;
    for (v, (c, a)) in counts.iter().enumerate() {
        writeln!(w, "{v},{c},{a}")?;
    }
    Ok(())
}
