use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Optimizer, Tensor, UpdateRule};
use crate::dataset::Dataset;
use crate::decoder::{ood_score, soft_decode};
use crate::embedding::LabelCodebook;

use super::{batch_embedding_loss, multi_embedding_loss, ModelError, MultiHeadModel, Variant};

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` at the start of each listed epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rule: UpdateRule,
    pub schedule: LrSchedule,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

/// Training-set statistics after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    /// Mean L2 norm of the concatenated head outputs, split by whether the
    /// decoded label was right. `None` when the group is empty.
    pub mean_norm_correct: Option<f64>,
    pub mean_norm_wrong: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Per-example evaluation of a model on labeled data.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Evaluation {
    pub loss: Vec<f64>,
    pub correct: Vec<bool>,
    pub norm: Vec<f64>,
}

pub(crate) fn evaluate(
    model: &MultiHeadModel,
    data: &Dataset,
    codebook: Option<&LabelCodebook>,
) -> Result<Evaluation, ModelError> {
    let outputs = model.predict_rows(data.features())?;
    let mut eval = Evaluation {
        loss: Vec::with_capacity(data.len()),
        correct: Vec::with_capacity(data.len()),
        norm: Vec::with_capacity(data.len()),
    };
    for (heads, &y) in outputs.iter().zip(data.labels()) {
        eval.norm.push(ood_score(heads).sqrt());
        match model.config().variant {
            Variant::MultiEmbed => {
                let cb = codebook.ok_or(ModelError::WrongVariant { expected: "softmax" })?;
                eval.loss.push(multi_embedding_loss(heads, cb, y)?);
                eval.correct.push(soft_decode(heads, cb)?.label == y);
            }
            Variant::Softmax { classes } => {
                if y >= classes {
                    return Err(ModelError::LabelOutOfRange { label: y, classes });
                }
                let logits = &heads[0];
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                eval.loss.push(lse - logits[y]);
                eval.correct.push(argmax(logits) == y);
            }
        }
    }
    Ok(eval)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn stats(epoch: usize, e: &Evaluation) -> EpochStats {
    let n = e.loss.len() as f64;
    let pick = |want: bool| {
        mean(
            e.norm
                .iter()
                .zip(&e.correct)
                .filter(move |(_, &c)| c == want)
                .map(|(&v, _)| v),
        )
    };
    EpochStats {
        epoch,
        mean_loss: e.loss.iter().sum::<f64>() / n,
        accuracy: e.correct.iter().filter(|&&c| c).count() as f64 / n,
        mean_norm_correct: pick(true),
        mean_norm_wrong: pick(false),
    }
}

/// Mini-batch training. Multi-embedding models need the codebook; softmax
/// models ignore it and use cross-entropy.
pub fn train(
    mut model: MultiHeadModel,
    data: &Dataset,
    codebook: Option<&LabelCodebook>,
    cfg: &TrainConfig,
) -> Result<(MultiHeadModel, TrainLog), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if data.dim() != model.config().input_dim {
        return Err(ModelError::InputLength {
            expected: model.config().input_dim,
            found: data.dim(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    let num_labels = match (model.config().variant, codebook) {
        (Variant::Softmax { classes }, _) => classes,
        (Variant::MultiEmbed, Some(cb)) => {
            if cb.dims() != model.config().head_dims.as_slice() {
                return Err(ModelError::Config(format!(
                    "codebook dims {:?} do not match head dims {:?}",
                    cb.dims(),
                    model.config().head_dims
                )));
            }
            cb.num_labels()
        }
        (Variant::MultiEmbed, None) => {
            return Err(ModelError::Config("multi-embedding training needs a codebook".into()))
        }
    };
    if let Some(&y) = data.labels().iter().find(|&&y| y >= num_labels) {
        return Err(ModelError::LabelOutOfRange {
            label: y,
            classes: num_labels,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.rule)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let p = data.dim();
    let start = model.epoch();

    for epoch in start..start + cfg.epochs {
        opt.set_lr(cfg.schedule.rate(cfg.rule.lr(), epoch))?;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(batch.len() * p);
            for &i in batch {
                rows.extend_from_slice(data.row(i));
            }
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();

            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let x = g.constant(Tensor::matrix(batch.len(), p, rows)?);
            let outs = model.forward_graph(&mut g, &params, x)?;
            let loss = match codebook.filter(|_| !model.config().is_softmax()) {
                Some(cb) => batch_embedding_loss(&mut g, &outs, cb, &labels)?,
                None => {
                    let ce = g.cross_entropy(outs[0], &labels)?;
                    let s = g.sum(ce)?;
                    g.scale(s, 1.0 / labels.len() as f64)?
                }
            };
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&v| grads.get(v).cloned().expect("parameter gradient"))
                .collect();
            opt.step(model.params_mut(), &grads)?;
        }
        model.set_epoch(epoch + 1);
        let eval = evaluate(&model, data, codebook)?;
        log.epochs.push(stats(epoch + 1, &eval));
    }
    Ok((model, log))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::model::{embedding_loss_terms, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn sgd(lr: f64) -> UpdateRule {
        UpdateRule::SgdMomentum {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    /// Two Gaussian blobs at (±2, ±2, 0, 0) with noise scale 0.5, labels 0 and 1.
    pub(crate) fn toy_two_class(n_per: usize, seed: u64) -> Dataset {
        toy_blobs(n_per, 2.0, seed)
    }

    pub(crate) fn toy_blobs(n_per: usize, center: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let y = i % 2;
            let c = if y == 0 { center } else { -center };
            for j in 0..4 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(if j < 2 { c + 0.5 * noise } else { 0.5 * noise });
            }
            labels.push(y);
        }
        Dataset::new(4, features, labels).unwrap()
    }

    pub(crate) fn random_codebook(n: usize, dims: &[usize], seed: u64) -> LabelCodebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelCodebook::from_rows(
            (0..n).map(|i| format!("c{i}")).collect(),
            dims.iter()
                .enumerate()
                .map(|(k, &d)| {
                    let rows = (0..n)
                        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .collect();
                    (format!("s{k}"), rows)
                })
                .collect(),
        )
        .unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            rule: sgd(0.05),
            schedule: LrSchedule::Constant,
            seed: 3,
        }
    }

    fn loss_and_grads(
        model: &MultiHeadModel,
        cb: &LabelCodebook,
        rows: &[f64],
        labels: &[usize],
        drop_head: Option<usize>,
    ) -> (f64, Vec<Tensor>) {
        let p = model.config().input_dim;
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let x = g.constant(Tensor::matrix(labels.len(), p, rows.to_vec()).unwrap());
        let outs = model.forward_graph(&mut g, &params, x).unwrap();
        let terms = embedding_loss_terms(&mut g, &outs, cb, labels).unwrap();
        let mut total = None;
        for (k, t) in terms.into_iter().enumerate() {
            if Some(k) == drop_head {
                continue;
            }
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t).unwrap(),
            });
        }
        let s = g.sum(total.unwrap()).unwrap();
        let loss = g.scale(s, 1.0 / labels.len() as f64).unwrap();
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).data()[0],
            params.iter().map(|&v| grads.get(v).unwrap().clone()).collect(),
        )
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cb = random_codebook(4, &[3, 2], 5);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(3, vec![5], vec![3, 2], 4), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 2, 3];
        let (_, grads) = loss_and_grads(&model, &cb, &rows, &labels, None);
        let h = 1e-6;
        for (pi, grad) in grads.iter().enumerate() {
            for j in 0..grad.len() {
                let mut plus = model.clone();
                plus.params_mut()[pi].data_mut()[j] += h;
                let mut minus = model.clone();
                minus.params_mut()[pi].data_mut()[j] -= h;
                let fd = (loss_and_grads(&plus, &cb, &rows, &labels, None).0
                    - loss_and_grads(&minus, &cb, &rows, &labels, None).0)
                    / (2.0 * h);
                let a = grad.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "param {pi}[{j}]: analytic {a}, numeric {fd}");
            }
        }
    }

    #[test]
    fn head_gradients_only_see_their_own_term() {
        let cb = random_codebook(4, &[3, 3, 2], 6);
        let model =
            MultiHeadModel::new(ModelConfig::multi_embed(3, vec![8], vec![3, 3, 2], 8), 9).unwrap();
        let rows = [0.3, -0.7, 0.2, 1.0, 0.5, -0.4, -0.9, 0.8, 0.6];
        let labels = [1, 3, 0];
        let (_, full) = loss_and_grads(&model, &cb, &rows, &labels, None);
        let (_, without_1) = loss_and_grads(&model, &cb, &rows, &labels, Some(1));
        for k in 0..3 {
            for i in model.head_param_range(k) {
                if k == 1 {
                    assert!(without_1[i].data().iter().all(|&v| v == 0.0));
                } else {
                    for (a, b) in full[i].data().iter().zip(without_1[i].data()) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
        // Trunk receives the sum of all terms: full = without_1 + only_1.
        let only_1: Vec<Tensor> = {
            let (_, a) = loss_and_grads(&model, &cb, &rows, &labels, Some(0));
            let (_, b) = loss_and_grads(&model, &cb, &rows, &labels, Some(2));
            // (t1 + t2) + (t0 + t1) - (t0 + t1 + t2) = t1
            a.iter()
                .zip(&b)
                .zip(&full)
                .map(|((a, b), f)| {
                    Tensor::new(
                        a.shape().to_vec(),
                        a.data().iter().zip(b.data()).zip(f.data()).map(|((x, y), z)| x + y - z).collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let mut trunk_differs = false;
        for i in model.trunk_param_range() {
            for ((f, w), o) in full[i].data().iter().zip(without_1[i].data()).zip(only_1[i].data()) {
                assert!((f - (w + o)).abs() < 1e-12);
                trunk_differs |= (f - w).abs() > 1e-9;
            }
        }
        assert!(trunk_differs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_lies_in_zero_to_k(seed in 0u64..10_000, x in prop::collection::vec(-5.0f64..5.0, 3)) {
            let cb = random_codebook(3, &[2, 4, 3], seed);
            let model = MultiHeadModel::new(ModelConfig::multi_embed(3, vec![4], vec![2, 4, 3], 3), seed).unwrap();
            let out = model.forward(&x).unwrap();
            for y in 0..3 {
                let l = multi_embedding_loss(&out, &cb, y).unwrap();
                prop_assert!((0.0..=3.0).contains(&l));
            }
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = toy_two_class(20, 1);
        let cb = random_codebook(2, &[4], 2);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(4, vec![8], vec![4], 8), 4).unwrap();
        let (trained, log) = train(model.clone(), &data, Some(&cb), &cfg(0)).unwrap();
        assert_eq!(trained, model);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = Dataset::new(4, vec![], vec![]).unwrap();
        let cb = random_codebook(2, &[4], 2);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(4, vec![], vec![4], 8), 4).unwrap();
        assert!(matches!(train(model, &data, Some(&cb), &cfg(1)), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_two_class(20, 1);
        let cb = random_codebook(2, &[4], 2);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(4, vec![8], vec![4], 8), 4).unwrap();
        let a = train(model.clone(), &data, Some(&cb), &cfg(3)).unwrap();
        let b = train(model, &data, Some(&cb), &cfg(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.epochs.len(), 3);
        assert_eq!(a.0.epoch(), 3);
    }

    #[test]
    fn separable_toy_task_is_learned() {
        let data = toy_two_class(50, 7);
        let cb = random_codebook(2, &[4], 11);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(4, vec![16], vec![4], 16), 5).unwrap();
        let (_, log) = train(model, &data, Some(&cb), &cfg(200)).unwrap();
        let last = log.last().unwrap();
        assert_eq!(last.accuracy, 1.0);
        assert!(last.mean_loss < 0.05, "final loss {}", last.mean_loss);
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    #[test]
    fn wrong_predictions_have_smaller_norm() {
        // Overlapping blobs so some training points stay misclassified.
        let data = toy_blobs(100, 0.35, 7);
        let cb = random_codebook(2, &[4], 11);
        let model = MultiHeadModel::new(ModelConfig::multi_embed(4, vec![16], vec![4], 16), 5).unwrap();
        let (model, _) = train(model, &data, Some(&cb), &cfg(200)).unwrap();
        let e = evaluate(&model, &data, Some(&cb)).unwrap();
        let split = |want: bool| -> Vec<f64> {
            e.norm.iter().zip(&e.correct).filter(|(_, &c)| c == want).map(|(&v, _)| v).collect()
        };
        let (right, wrong) = (split(true), split(false));
        assert!(!wrong.is_empty() && !right.is_empty());
        assert!(median(wrong) < median(right));
    }

    #[test]
    fn softmax_variant_trains() {
        let data = toy_two_class(50, 7);
        let model = MultiHeadModel::new(ModelConfig::softmax(4, vec![16], 2, 16), 5).unwrap();
        let (_, log) = train(model, &data, None, &cfg(30)).unwrap();
        assert_eq!(log.last().unwrap().accuracy, 1.0);
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::Step {
            milestones: vec![2, 4],
            factor: 0.1,
        };
        assert_eq!(s.rate(1.0, 1), 1.0);
        assert!((s.rate(1.0, 2) - 0.1).abs() < 1e-15);
        assert!((s.rate(1.0, 5) - 0.01).abs() < 1e-15);
    }
}
