//! Threshold-free and fixed-operating-point detection metrics, plus the
//! max-softmax and ODIN scores for softmax classifiers.
//!
//! Scores follow one convention throughout: higher means "looks
//! in-distribution", and in-distribution is the positive class.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::model::{argmax, ModelError, MultiHeadModel};

pub const TARGET_TPR: f64 = 0.95;
pub const DEFAULT_ODIN_TEMPERATURES: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_ODIN_EPSILONS: [f64; 5] = [0.0, 0.0005, 0.001, 0.002, 0.004];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} score list is empty")]
    Empty(&'static str),
    #[error("non-finite {side} score at position {index}")]
    NonFinite { side: &'static str, index: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("perturbation magnitude must be non-negative, got {0}")]
    Epsilon(f64),
    #[error("ODIN grid is empty")]
    EmptyGrid,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scores of an in-distribution and an out-of-distribution set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    in_scores: Vec<f64>,
    out_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self, MetricsError> {
        for (side, v) in [("in", &in_scores), ("out", &out_scores)] {
            if v.is_empty() {
                return Err(MetricsError::Empty(side));
            }
            if let Some(index) = v.iter().position(|s| !s.is_finite()) {
                return Err(MetricsError::NonFinite { side, index });
            }
        }
        Ok(ScoreSet {
            in_scores,
            out_scores,
        })
    }

    pub fn in_scores(&self) -> &[f64] {
        &self.in_scores
    }

    pub fn out_scores(&self) -> &[f64] {
        &self.out_scores
    }

    /// Writes `example_id,score,is_in_distribution`; in-distribution rows
    /// come first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "example_id,score,is_in_distribution")?;
        let rows = self
            .in_scores
            .iter()
            .map(|s| (s, 1))
            .chain(self.out_scores.iter().map(|s| (s, 0)));
        for (i, (s, flag)) in rows.enumerate() {
            writeln!(w, "{i},{s},{flag}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, MetricsError> {
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if i == 0 || line.is_empty() {
                continue;
            }
            let bad = |message: &str| MetricsError::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let score: f64 = fields[1].parse().map_err(|_| bad("bad score"))?;
            match fields[2] {
                "1" => ins.push(score),
                "0" => outs.push(score),
                _ => return Err(bad("is_in_distribution must be 0 or 1")),
            }
        }
        ScoreSet::new(ins, outs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub fpr_at_95_tpr: f64,
    pub detection_error: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

/// True/false positive counts at every distinct threshold, highest first.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut p = pos.to_vec();
    let mut n = neg.to_vec();
    p.sort_by(|a, b| b.total_cmp(a));
    n.sort_by(|a, b| b.total_cmp(a));
    let mut thresholds: Vec<f64> = p.iter().chain(&n).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut tp, mut fp) = (0, 0);
    thresholds
        .into_iter()
        .map(|t| {
            while tp < p.len() && p[tp] >= t {
                tp += 1;
            }
            while fp < n.len() && n[fp] >= t {
                fp += 1;
            }
            (t, tp, fp)
        })
        .collect()
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Area under precision-recall with `pos` as the positive class. The curve
/// starts at recall 0 with the precision of the highest threshold.
fn aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = sweep(pos, neg)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / pos.len() as f64, tp as f64 / (tp + fp) as f64))
        .collect();
    let mut curve = vec![(0.0, pts[0].1)];
    curve.extend(pts);
    trapezoid(&curve)
}

/// Detection metrics over a threshold sweep. A score equal to the threshold
/// counts as accepted. The detection error is taken at the nominal 95% TPR.
pub fn evaluate_detection(scores: &ScoreSet) -> DetectionReport {
    let (ins, outs) = (&scores.in_scores, &scores.out_scores);
    let (n_in, n_out) = (ins.len() as f64, outs.len() as f64);
    let points = sweep(ins, outs);

    let (_, _, fp) = *points
        .iter()
        .find(|&&(_, tp, _)| tp as f64 / n_in >= TARGET_TPR)
        .expect("the lowest threshold accepts everything");
    let fpr = fp as f64 / n_out;

    let mut roc = vec![(0.0, 0.0)];
    roc.extend(
        points
            .iter()
            .map(|&(_, tp, fp)| (fp as f64 / n_out, tp as f64 / n_in)),
    );

    let negated = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
    DetectionReport {
        fpr_at_95_tpr: fpr,
        detection_error: 0.5 * (1.0 - TARGET_TPR) + 0.5 * fpr,
        auroc: trapezoid(&roc),
        aupr_in: aupr(ins, outs),
        aupr_out: aupr(&negated(outs), &negated(ins)),
    }
}

/// Writes one row per method, metrics as percentages with two decimals.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[(String, DetectionReport)]) -> io::Result<()> {
    writeln!(w, "method,fpr_at_95_tpr,detection_error,auroc,aupr_in,aupr_out")?;
    for (name, r) in rows {
        writeln!(
            w,
            "{name},{:.2},{:.2},{:.2},{:.2},{:.2}",
            100.0 * r.fpr_at_95_tpr,
            100.0 * r.detection_error,
            100.0 * r.auroc,
            100.0 * r.aupr_in,
            100.0 * r.aupr_out
        )?;
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Largest softmax probability.
pub fn max_softmax_score(logits: &[f64]) -> f64 {
    // max_i e^{l_i - m} / Σ e^{l_j - m} = 1 / Σ e^{l_j - m} with m the max logit
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 / logits.iter().map(|v| (v - max).exp()).sum::<f64>()
}

fn check_odin(temperature: f64, epsilon: f64) -> Result<(), MetricsError> {
    if !(temperature > 0.0) {
        return Err(MetricsError::Temperature(temperature));
    }
    if !(epsilon >= 0.0) {
        return Err(MetricsError::Epsilon(epsilon));
    }
    Ok(())
}

/// ODIN scores for a batch of rows: each input is nudged against the
/// gradient of the temperature-scaled cross-entropy at its predicted label,
/// then scored by the max temperature-scaled softmax.
pub fn odin_scores(
    model: &MultiHeadModel,
    rows: &[f64],
    temperature: f64,
    epsilon: f64,
) -> Result<Vec<f64>, MetricsError> {
    check_odin(temperature, epsilon)?;
    let p = model.config().input_dim;
    let mut scores = Vec::with_capacity(rows.len() / p.max(1));
    for chunk in rows.chunks(256 * p) {
        let logits = model.logits_rows(chunk)?;
        let perturbed = if epsilon == 0.0 {
            chunk.to_vec()
        } else {
            let targets: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let mut g = Graph::new();
            let params = model.bind(&mut g, false);
            let x = Tensor::matrix(chunk.len() / p, p, chunk.to_vec()).map_err(ModelError::from)?;
            let xv = g.param(x);
            let outs = model.forward_graph(&mut g, &params, xv)?;
            let grad = input_gradient(&mut g, outs[0], xv, temperature, &targets)
                .map_err(ModelError::from)?;
            chunk
                .iter()
                .zip(grad.data())
                .map(|(&v, &d)| v - epsilon * sign(d))
                .collect()
        };
        let logits = if epsilon == 0.0 {
            logits
        } else {
            model.logits_rows(&perturbed)?
        };
        scores.extend(logits.iter().map(|l| {
            let scaled: Vec<f64> = l.iter().map(|v| v / temperature).collect();
            max_softmax_score(&scaled)
        }));
    }
    Ok(scores)
}

fn input_gradient(
    g: &mut Graph,
    logits: Var,
    x: Var,
    temperature: f64,
    targets: &[usize],
) -> Result<Tensor, AutodiffError> {
    let scaled = g.scale(logits, 1.0 / temperature)?;
    let ce = g.cross_entropy(scaled, targets)?;
    let loss = g.sum(ce)?;
    Ok(g.backward(loss)?.get(x).cloned().expect("input requires a gradient"))
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ODIN score of a single input.
pub fn odin_score(
    model: &MultiHeadModel,
    x: &[f64],
    temperature: f64,
    epsilon: f64,
) -> Result<f64, MetricsError> {
    if x.len() != model.config().input_dim {
        return Err(ModelError::InputLength {
            expected: model.config().input_dim,
            found: x.len(),
        }
        .into());
    }
    Ok(odin_scores(model, x, temperature, epsilon)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdinChoice {
    pub temperature: f64,
    pub epsilon: f64,
    pub fpr_at_95_tpr: f64,
}

/// Grid cell with the lowest validation FPR at 95% TPR. Ties go to the
/// smaller ε, then the smaller temperature.
pub fn odin_grid_search(
    model: &MultiHeadModel,
    val_in: &[f64],
    val_out: &[f64],
    temperatures: &[f64],
    epsilons: &[f64],
) -> Result<OdinChoice, MetricsError> {
    if temperatures.is_empty() || epsilons.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let mut cells: Vec<(f64, f64)> = epsilons
        .iter()
        .flat_map(|&e| temperatures.iter().map(move |&t| (e, t)))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let results: Vec<OdinChoice> = cells
        .par_iter()
        .map(|&(epsilon, temperature)| {
            let set = ScoreSet::new(
                odin_scores(model, val_in, temperature, epsilon)?,
                odin_scores(model, val_out, temperature, epsilon)?,
            )?;
            Ok(OdinChoice {
                temperature,
                epsilon,
                fpr_at_95_tpr: evaluate_detection(&set).fpr_at_95_tpr,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    let mut best = results[0];
    for r in &results[1..] {
        if r.fpr_at_95_tpr < best.fpr_at_95_tpr {
            best = *r;
        }
    }
    Ok(best)
}
