//! Label decoding from K predicted embeddings and the squared-norm
//! out-of-distribution score.
//!
//! All ties are broken towards the lowest label index so decoding is
//! reproducible bit-for-bit.

use std::io::{self, Write};

use thiserror::Error;

use crate::embedding::{cosine_distance, LabelCodebook};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("expected {expected} head outputs, got {found}")]
    HeadCount { expected: usize, found: usize },
    #[error("head {head}: expected length {expected}, got {found}")]
    HeadLength {
        head: usize,
        expected: usize,
        found: usize,
    },
    #[error("head {head} produced a zero vector; cosine distance is undefined")]
    ZeroOutput { head: usize },
    #[error("rejection threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Nearest label of each head on its own.
    pub per_head_nearest: Vec<usize>,
    /// 1-based rank of `label` in each head's distance ordering.
    pub per_head_rank_of_label: Vec<usize>,
    pub distance_sum: f64,
    pub ood_score: f64,
}

/// Cosine distance from each head output to every label: `table[k][y]`.
pub fn distance_table<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
) -> Result<Vec<Vec<f64>>, DecodeError> {
    if outputs.len() != codebook.num_spaces() {
        return Err(DecodeError::HeadCount {
            expected: codebook.num_spaces(),
            found: outputs.len(),
        });
    }
    outputs
        .iter()
        .enumerate()
        .map(|(k, out)| {
            let out = out.as_ref();
            let d = codebook.dims()[k];
            if out.len() != d {
                return Err(DecodeError::HeadLength {
                    head: k,
                    expected: d,
                    found: out.len(),
                });
            }
            (0..codebook.num_labels())
                .map(|y| {
                    cosine_distance(codebook.target(k, y), out)
                        .map_err(|_| DecodeError::ZeroOutput { head: k })
                })
                .collect()
        })
        .collect()
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Rank of `label` among `distances` (1 = nearest), lower index first on ties.
fn rank_of(distances: &[f64], label: usize) -> usize {
    let d = distances[label];
    1 + distances
        .iter()
        .enumerate()
        .filter(|&(y, &v)| v < d || (v == d && y < label))
        .count()
}

/// Sum of squared L2 norms of the head outputs. Larger means more
/// in-distribution.
pub fn ood_score<V: AsRef<[f64]>>(outputs: &[V]) -> f64 {
    outputs
        .iter()
        .map(|o| o.as_ref().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

fn sums(table: &[Vec<f64>]) -> Vec<f64> {
    let n = table[0].len();
    (0..n).map(|y| table.iter().map(|row| row[y]).sum()).collect()
}

/// Label minimizing the summed cosine distance over all heads.
pub fn soft_decode<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
) -> Result<Prediction, DecodeError> {
    let table = distance_table(outputs, codebook)?;
    Ok(prediction_from_table(&table, ood_score(outputs)))
}

pub(crate) fn prediction_from_table(table: &[Vec<f64>], ood_score: f64) -> Prediction {
    let totals = sums(table);
    let label = argmin(&totals);
    Prediction {
        label,
        per_head_nearest: table.iter().map(|row| argmin(row)).collect(),
        per_head_rank_of_label: table.iter().map(|row| rank_of(row, label)).collect(),
        distance_sum: totals[label],
        ood_score,
    }
}

/// Plurality vote over per-head nearest labels. Ties among the most voted
/// labels go to the smaller summed distance, then the lower index.
pub fn hard_decode<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
) -> Result<usize, DecodeError> {
    let table = distance_table(outputs, codebook)?;
    let totals = sums(&table);
    let mut votes = vec![0usize; codebook.num_labels()];
    for row in &table {
        votes[argmin(row)] += 1;
    }
    let top = *votes.iter().max().expect("at least one label");
    let mut best: Option<usize> = None;
    for y in (0..votes.len()).filter(|&y| votes[y] == top) {
        match best {
            Some(b) if totals[y] >= totals[b] => {}
            _ => best = Some(y),
        }
    }
    Ok(best.expect("some label has the top vote"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Label(usize),
    RejectedAsOod,
}

/// Rejects when the squared-norm score falls below `alpha`, otherwise
/// returns the soft-decoded label.
pub fn classify_with_rejection<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
    alpha: f64,
) -> Result<Decision, DecodeError> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(DecodeError::NegativeThreshold(alpha));
    }
    if ood_score(outputs) < alpha {
        return Ok(Decision::RejectedAsOod);
    }
    Ok(Decision::Label(soft_decode(outputs, codebook)?.label))
}

/// Largest threshold `t` among `scores` keeping at least `tpr` of them at or
/// above `t`. Rejecting everything below it accepts ≥ `tpr` of the set.
pub fn threshold_at_tpr(scores: &[f64], tpr: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // number of scores that must be kept
    let need = ((tpr * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[need.min(n) - 1])
}

/// One row of a prediction dump.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub example_id: usize,
    pub true_label: usize,
    pub prediction: Prediction,
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_predictions_csv<W: Write>(mut w: W, records: &[PredictionRecord]) -> io::Result<()> {
    writeln!(
        w,
        "example_id,true_label,predicted_label,distance_sum,ood_score,per_head_nearest,per_head_rank"
    )?;
    for r in records {
        let p = &r.prediction;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.example_id,
            r.true_label,
            p.label,
            p.distance_sum,
            p.ood_score,
            join(&p.per_head_nearest),
            join(&p.per_head_rank_of_label)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codebook(spaces: Vec<Vec<Vec<f64>>>) -> LabelCodebook {
        let n = spaces[0].len();
        LabelCodebook::from_rows(
            (0..n).map(|i| format!("l{i}")).collect(),
            spaces
                .into_iter()
                .enumerate()
                .map(|(k, rows)| (format!("s{k}"), rows))
                .collect(),
        )
        .unwrap()
    }

    fn basis3() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]
    }

    #[test]
    fn exact_targets_decode_with_zero_distance() {
        let cb = codebook(vec![basis3(), basis3()]);
        let p = soft_decode(&[cb.target(0, 2).to_vec(), cb.target(1, 2).to_vec()], &cb).unwrap();
        assert_eq!(p.label, 2);
        assert_eq!(p.distance_sum, 0.0);
        assert_eq!(p.per_head_rank_of_label, vec![1, 1]);
    }

    #[test]
    fn single_head_picks_smaller_distance() {
        let cb = codebook(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]]);
        let p = soft_decode(&[vec![0.9, 0.1]], &cb).unwrap();
        assert_eq!(p.label, 0);
    }

    #[test]
    fn hard_decode_votes() {
        let cb = codebook(vec![basis3(), basis3(), basis3()]);
        let outs = [vec![1.0, 0.1, 0.0], vec![0.9, 0.0, 0.2], vec![0.0, 1.0, 0.0]];
        assert_eq!(hard_decode(&outs, &cb).unwrap(), 0);
        let same = [vec![0.0, 0.0, 1.0], vec![0.1, 0.0, 1.0], vec![0.0, 0.2, 1.0]];
        assert_eq!(hard_decode(&same, &cb).unwrap(), 2);
    }

    #[test]
    fn hard_decode_two_way_tie_uses_distance_sum() {
        let cb = codebook(vec![basis3(), basis3()]);
        // head 0 leans to label 0 weakly, head 1 to label 1 strongly
        let outs = [vec![1.0, 0.9, 0.0], vec![0.0, 1.0, 0.0]];
        let p = soft_decode(&outs, &cb).unwrap();
        assert_eq!(p.per_head_nearest, vec![0, 1]);
        assert_eq!(hard_decode(&outs, &cb).unwrap(), 1);
        assert_eq!(p.label, 1);
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_of(&[0.3, 0.1, 0.3, 0.0], 2), 4);
        assert_eq!(rank_of(&[0.3, 0.1, 0.3, 0.0], 0), 3);
        assert_eq!(rank_of(&[0.3, 0.1, 0.3, 0.0], 3), 1);
    }

    #[test]
    fn ood_score_examples() {
        assert_eq!(ood_score(&[vec![0.0, 0.0], vec![0.0]]), 0.0);
        assert_eq!(ood_score(&[vec![3.0, 4.0], vec![0.0, 0.0]]), 25.0);
        let a = [vec![0.5, -1.5], vec![2.0]];
        let b = [vec![1.0, -3.0], vec![4.0]];
        assert_eq!(ood_score(&b), 4.0 * ood_score(&a));
    }

    #[test]
    fn rejection_bounds() {
        let cb = codebook(vec![basis3()]);
        let out = [vec![0.0, 0.0, 0.2]];
        assert_eq!(classify_with_rejection(&out, &cb, 0.0).unwrap(), Decision::Label(2));
        assert_eq!(
            classify_with_rejection(&out, &cb, f64::INFINITY).unwrap(),
            Decision::RejectedAsOod
        );
        assert!(classify_with_rejection(&out, &cb, -1.0).is_err());
    }

    #[test]
    fn threshold_at_tpr_keeps_quantile() {
        let scores: Vec<f64> = (1..=20).map(f64::from).collect();
        let t = threshold_at_tpr(&scores, 0.95).unwrap();
        assert_eq!(t, 2.0);
        let kept = scores.iter().filter(|&&s| s >= t).count();
        assert_eq!(kept, 19);
        assert_eq!(threshold_at_tpr(&scores, 1.0), Some(1.0));
        assert_eq!(threshold_at_tpr(&[], 0.95), None);
    }

    #[test]
    fn errors() {
        let cb = codebook(vec![basis3(), basis3()]);
        assert!(matches!(
            soft_decode(&[vec![1.0, 0.0, 0.0]], &cb),
            Err(DecodeError::HeadCount { .. })
        ));
        assert!(matches!(
            soft_decode(&[vec![1.0, 0.0, 0.0], vec![0.0; 3]], &cb),
            Err(DecodeError::ZeroOutput { head: 1 })
        ));
        assert!(matches!(
            hard_decode(&[vec![1.0, 0.0], vec![1.0, 0.0, 0.0]], &cb),
            Err(DecodeError::HeadLength { head: 0, .. })
        ));
    }

    #[test]
    fn csv_dump() {
        let cb = codebook(vec![basis3(), basis3()]);
        let p = soft_decode(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &cb).unwrap();
        let mut out = Vec::new();
        write_predictions_csv(
            &mut out,
            &[PredictionRecord { example_id: 7, true_label: 0, prediction: p }],
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "7,0,0,0.5,2,0;1,1;2");
    }

    use proptest::prelude::*;

    fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
            .prop_filter("nonzero rows", |rs| rs.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)))
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>, Vec<f64>)> {
        (2usize..8, 1usize..5, 2usize..5).prop_flat_map(|(n, k, d)| {
            (
                prop::collection::vec(rows(n, d), k),
                rows(k, d),
                prop::collection::vec(0.01f64..100.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn positive_head_scaling_keeps_label((spaces, outs, scales) in instance()) {
            let cb = codebook(spaces);
            let scaled: Vec<Vec<f64>> = outs
                .iter()
                .zip(&scales)
                .map(|(o, c)| o.iter().map(|v| c * v).collect())
                .collect();
            prop_assert_eq!(soft_decode(&outs, &cb).unwrap().label, soft_decode(&scaled, &cb).unwrap().label);
            let c = scales[0];
            let uniform: Vec<Vec<f64>> = outs.iter().map(|o| o.iter().map(|v| c * v).collect()).collect();
            let (s0, s1) = (ood_score(&outs), ood_score(&uniform));
            prop_assert!((s1 - c * c * s0).abs() <= 1e-9 * s1.max(1.0));
        }

        #[test]
        fn all_ranks_one_iff_unanimous((spaces, outs, _) in instance()) {
            let cb = codebook(spaces);
            let p = soft_decode(&outs, &cb).unwrap();
            let top_everywhere = p.per_head_rank_of_label.iter().all(|&r| r == 1);
            let unanimous = p.per_head_nearest.iter().all(|&y| y == p.per_head_nearest[0]);
            prop_assert_eq!(top_everywhere, unanimous && hard_decode(&outs, &cb).unwrap() == p.label);
        }
    }
}
