use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::embedding::{cosine_distance, LabelCodebook};

use super::ModelError;

/// Sum over heads of the cosine distance between each head output and the
/// label's target in that head's space.
pub fn multi_embedding_loss<V: AsRef<[f64]>>(
    outputs: &[V],
    codebook: &LabelCodebook,
    label: usize,
) -> Result<f64, ModelError> {
    check_label(codebook, label)?;
    if outputs.len() != codebook.num_spaces() {
        return Err(ModelError::Config(format!(
            "{} head outputs for a codebook with {} spaces",
            outputs.len(),
            codebook.num_spaces()
        )));
    }
    let mut total = 0.0;
    for (k, out) in outputs.iter().enumerate() {
        let out = out.as_ref();
        if out.iter().all(|&v| v == 0.0) {
            return Err(ModelError::ZeroOutput { head: k });
        }
        total += cosine_distance(codebook.target(k, label), out)
            .map_err(|e| ModelError::Config(e.to_string()))?;
    }
    Ok(total)
}

fn check_label(codebook: &LabelCodebook, label: usize) -> Result<(), ModelError> {
    if label >= codebook.num_labels() {
        return Err(ModelError::LabelOutOfRange {
            label,
            classes: codebook.num_labels(),
        });
    }
    Ok(())
}

/// Per-head cosine-distance nodes, each of shape `[B]`, for head outputs
/// `[B, D_k]` against the targets of `labels`.
pub fn embedding_loss_terms(
    g: &mut Graph,
    outputs: &[Var],
    codebook: &LabelCodebook,
    labels: &[usize],
) -> Result<Vec<Var>, ModelError> {
    for &y in labels {
        check_label(codebook, y)?;
    }
    outputs
        .iter()
        .enumerate()
        .map(|(k, &out)| {
            let d = codebook.dims()[k];
            let mut rows = Vec::with_capacity(labels.len() * d);
            for &y in labels {
                rows.extend_from_slice(codebook.target(k, y));
            }
            let targets = g.constant(Tensor::matrix(labels.len(), d, rows)?);
            g.cosine_distance(out, targets).map_err(|e| match e {
                AutodiffError::ZeroNorm { .. } => ModelError::ZeroOutput { head: k },
                other => other.into(),
            })
        })
        .collect()
}

/// Batch mean of the summed per-head cosine distances.
pub fn batch_embedding_loss(
    g: &mut Graph,
    outputs: &[Var],
    codebook: &LabelCodebook,
    labels: &[usize],
) -> Result<Var, ModelError> {
    let terms = embedding_loss_terms(g, outputs, codebook, labels)?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let s = g.sum(total)?;
    Ok(g.scale(s, 1.0 / labels.len() as f64)?)
}
