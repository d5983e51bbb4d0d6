use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::adversarial::{
    agreement_count, agreement_ladder, detection_rates, fgsm_batch, matched_frr_detection,
    ranking_spread, write_spread_histogram, AdversarialBatch,
};
use crate::dataset::Dataset;
use crate::decoder::{ood_score, soft_decode, threshold_at_tpr, write_predictions_csv, Prediction, PredictionRecord};
use crate::embedding::{build_codebook, load_embedding_file, AliasTable, EmbeddingFormat, LabelCodebook};
use crate::metrics::{
    evaluate_detection, max_softmax_score, odin_grid_search, odin_scores, write_report_csv,
    DetectionReport, ScoreSet,
};
use crate::model::{
    argmax, train, train_ensemble, Ensemble, ModelConfig, MultiHeadModel, TrainConfig, TrainLog,
};
use crate::semantic::{avg_semantic_scores, load_label_map, Taxonomy};

use super::config::{CodebookSource, ExperimentConfig, ModelKind};
use super::synth::{gen_synthetic_codebooks, gen_synthetic_dataset, synthetic_taxonomy, SyntheticData};
use super::{ExperimentError, RunManifest};

const SPLITS: [&str; 5] = ["train", "val", "test_in", "out_val", "out_test"];

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a file through `fill`, creating parent directories.
fn emit(
    out: &Path,
    rel: &str,
    artifacts: &mut Vec<PathBuf>,
    fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> Result<(), ExperimentError> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(file_err(parent))?;
    }
    let mut buf = Vec::new();
    fill(&mut buf)?;
    fs::write(&path, buf).map_err(file_err(&path))?;
    artifacts.push(PathBuf::from(rel));
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, ExperimentError> {
    Ok(BufReader::new(File::open(path).map_err(file_err(path))?))
}

fn record_time(out: &Path, stage: &str, start: Instant) -> Result<(), ExperimentError> {
    let dir = out.join("logs");
    fs::create_dir_all(&dir).map_err(file_err(&dir))?;
    let path = dir.join(format!("time_{stage}.txt"));
    fs::write(&path, format!("{}\n", start.elapsed().as_secs_f64())).map_err(file_err(&path))?;
    Ok(())
}

/// Writes the five data splits, the resolved config, and (when none is
/// configured) a synthetic taxonomy.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let data = gen_synthetic_dataset(&cfg.data)?;
    let mut artifacts = Vec::new();
    emit(out, "config.resolved.txt", &mut artifacts, |w| w.write_all(cfg.canonical().as_bytes()))?;
    for (name, ds) in data.splits() {
        emit(out, &format!("data/{name}.csv"), &mut artifacts, |w| ds.write_csv(w))?;
    }
    if cfg.eval.taxonomy.is_none() {
        emit(out, "data/taxonomy.txt", &mut artifacts, |w| {
            w.write_all(synthetic_taxonomy(&cfg.in_labels()).as_bytes())
        })?;
    }
    record_time(out, "gen_data", start)?;
    Ok(artifacts)
}

pub fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<SyntheticData, ExperimentError> {
    let mut sets = Vec::with_capacity(5);
    for name in SPLITS {
        let path = out.join(format!("data/{name}.csv"));
        let ds = Dataset::read_csv(open(&path)?)?.with_range(-cfg.data.clip, cfg.data.clip);
        if ds.dim() != cfg.data.dim {
            return Err(ExperimentError::Invalid(format!(
                "{} has {} features, config says {}",
                path.display(),
                ds.dim(),
                cfg.data.dim
            )));
        }
        sets.push(ds);
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("five splits");
    Ok(SyntheticData {
        train: next(),
        val: next(),
        test_in: next(),
        out_val: next(),
        out_test: next(),
    })
}

/// Writes synthetic embedding files; file-backed codebooks need nothing.
pub fn gen_embeddings(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let mut artifacts = Vec::new();
    if let CodebookSource::Synthetic { diversity, seed } = cfg.codebook.source {
        let spaces = gen_synthetic_codebooks(&cfg.in_labels(), &cfg.codebook.dims, seed, diversity)?;
        for s in &spaces {
            emit(out, &format!("embeddings/{}.txt", s.name()), &mut artifacts, |w| {
                s.write_to(w, EmbeddingFormat::Headerless)
            })?;
        }
    }
    record_time(out, "gen_embeddings", start)?;
    Ok(artifacts)
}

pub fn load_codebook(cfg: &ExperimentConfig, out: &Path) -> Result<LabelCodebook, ExperimentError> {
    let (paths, format, aliases) = match &cfg.codebook.source {
        CodebookSource::Synthetic { .. } => (
            (1..=cfg.codebook.spaces())
                .map(|k| out.join(format!("embeddings/space{k}.txt")))
                .collect(),
            EmbeddingFormat::Headerless,
            None,
        ),
        CodebookSource::Files { paths, format, aliases } => (
            paths.clone(),
            *format,
            aliases.as_ref().map(AliasTable::load).transpose()?,
        ),
    };
    let mut spaces = Vec::with_capacity(paths.len());
    for p in &paths {
        if !p.exists() {
            return Err(ExperimentError::File {
                path: p.clone(),
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            });
        }
        spaces.push(load_embedding_file(p, format)?);
    }
    let cb = build_codebook(&spaces, &cfg.in_labels(), aliases.as_ref())?;
    if cb.dims() != cfg.codebook.dims.as_slice() {
        return Err(ExperimentError::Invalid(format!(
            "embedding dims {:?} differ from configured {:?}",
            cb.dims(),
            cfg.codebook.dims
        )));
    }
    Ok(cb)
}

fn classes(cfg: &ExperimentConfig) -> usize {
    cfg.data.in_components.len()
}

fn embed_config(cfg: &ExperimentConfig, k: usize) -> ModelConfig {
    ModelConfig::multi_embed(
        cfg.data.dim,
        cfg.model.trunk.clone(),
        cfg.codebook.dims[..k].to_vec(),
        cfg.model.head_hidden,
    )
}

fn softmax_config(cfg: &ExperimentConfig, trunk: Vec<usize>) -> ModelConfig {
    ModelConfig::softmax(cfg.data.dim, trunk, classes(cfg), cfg.model.head_hidden)
}

pub fn ensemble_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.eval.ensemble_size as u64)
        .map(|i| cfg.train.seed.wrapping_add(1000 + i))
        .collect()
}

fn needs_surrogate(cfg: &ExperimentConfig) -> bool {
    cfg.eval.adversarial
        && (cfg.eval.has(ModelKind::Ensemble) || cfg.eval.embed_sizes().iter().any(|&k| k >= 2))
}

#[derive(Debug, Clone, Copy)]
enum Job {
    Baseline,
    Ensemble,
    Embed(usize),
    Surrogate,
}

fn write_log(w: &mut Vec<u8>, log: &TrainLog) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(w, "epoch,mean_loss,accuracy,mean_norm_correct,mean_norm_wrong")?;
    for e in &log.epochs {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.epoch,
            e.mean_loss,
            e.accuracy,
            opt(e.mean_norm_correct),
            opt(e.mean_norm_wrong)
        )?;
    }
    Ok(())
}

/// Trains every model the config asks for, concurrently, and saves
/// checkpoints plus per-epoch logs.
pub fn train_models(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let data = load_data(cfg, out)?;
    let needs_codebook = !cfg.eval.embed_sizes().is_empty();
    let codebook = if needs_codebook { Some(load_codebook(cfg, out)?) } else { None };

    let mut jobs = Vec::new();
    if cfg.eval.needs_softmax_baseline() {
        jobs.push(Job::Baseline);
    }
    if cfg.eval.has(ModelKind::Ensemble) {
        jobs.push(Job::Ensemble);
    }
    jobs.extend(cfg.eval.embed_sizes().into_iter().map(Job::Embed));
    if needs_surrogate(cfg) {
        jobs.push(Job::Surrogate);
    }

    let single = |mc: ModelConfig, seed: u64, cb: Option<&LabelCodebook>| {
        let model = MultiHeadModel::new(mc, seed)?;
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        train(model, &data.train, cb, &tc)
    };
    let trained: Vec<Vec<(String, MultiHeadModel, TrainLog)>> = jobs
        .par_iter()
        .map(|job| -> Result<_, ExperimentError> {
            Ok(match *job {
                Job::Baseline => {
                    let (m, log) = single(softmax_config(cfg, cfg.model.trunk.clone()), cfg.train.seed, None)?;
                    vec![("baseline".to_string(), m, log)]
                }
                Job::Ensemble => {
                    let (ens, logs) = train_ensemble(
                        &softmax_config(cfg, cfg.model.trunk.clone()),
                        &ensemble_seeds(cfg),
                        &data.train,
                        &cfg.train,
                    )?;
                    ens.members
                        .into_iter()
                        .zip(logs)
                        .enumerate()
                        .map(|(i, (m, l))| (format!("ensemble{i}"), m, l))
                        .collect()
                }
                Job::Embed(k) => {
                    let cb = codebook
                        .as_ref()
                        .expect("loaded when embedding models are requested")
                        .select_spaces(&(0..k).collect::<Vec<_>>())?;
                    let (m, log) = single(embed_config(cfg, k), cfg.train.seed, Some(&cb))?;
                    vec![(format!("embed{k}"), m, log)]
                }
                Job::Surrogate => {
                    let mc = softmax_config(cfg, cfg.eval.surrogate_trunk.clone());
                    let (m, log) = single(mc, cfg.eval.surrogate_seed, None)?;
                    vec![("surrogate".to_string(), m, log)]
                }
            })
        })
        .collect::<Result<_, _>>()?;

    let mut artifacts = Vec::new();
    for (name, model, log) in trained.into_iter().flatten() {
        let path = out.join(format!("models/{name}.ckpt"));
        fs::create_dir_all(out.join("models")).map_err(file_err(&path))?;
        model.save(&path)?;
        artifacts.push(PathBuf::from(format!("models/{name}.ckpt")));
        emit(out, &format!("logs/train_{name}.csv"), &mut artifacts, |w| write_log(w, &log))?;
    }
    record_time(out, "train", start)?;
    Ok(artifacts)
}

fn load_model(out: &Path, name: &str) -> Result<MultiHeadModel, ExperimentError> {
    let path = out.join(format!("models/{name}.ckpt"));
    if !path.exists() {
        return Err(ExperimentError::File {
            path,
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    Ok(MultiHeadModel::load(&path)?)
}

fn load_ensemble(cfg: &ExperimentConfig, out: &Path) -> Result<Ensemble, ExperimentError> {
    let members = (0..cfg.eval.ensemble_size)
        .map(|i| load_model(out, &format!("ensemble{i}")))
        .collect::<Result<_, _>>()?;
    Ok(Ensemble { members })
}

fn max_softmax_rows(model: &MultiHeadModel, rows: &[f64]) -> Result<Vec<f64>, ExperimentError> {
    Ok(model.logits_rows(rows)?.iter().map(|l| max_softmax_score(l)).collect())
}

fn ensemble_scores(ens: &Ensemble, rows: &[f64]) -> Result<Vec<f64>, ExperimentError> {
    Ok(ens
        .mean_probabilities(rows)?
        .iter()
        .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Decoded predictions of an embedding model for every row.
pub fn embed_predictions(
    model: &MultiHeadModel,
    codebook: &LabelCodebook,
    data: &Dataset,
) -> Result<Vec<Prediction>, ExperimentError> {
    model
        .predict_rows(data.features())?
        .iter()
        .map(|heads| Ok(soft_decode(heads, codebook)?))
        .collect()
}

fn embed_scores(model: &MultiHeadModel, data: &Dataset) -> Result<Vec<f64>, ExperimentError> {
    Ok(model.predict_rows(data.features())?.iter().map(|h| ood_score(h)).collect())
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

fn write_histogram(w: &mut Vec<u8>, ins: &[f64], outs: &[f64], bins: usize) -> std::io::Result<()> {
    let all = ins.iter().chain(outs);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let bin = |s: f64| (((s - lo) / width) as usize).min(bins - 1);
    let mut counts = vec![(0usize, 0usize); bins];
    for &s in ins {
        counts[bin(s)].0 += 1;
    }
    for &s in outs {
        counts[bin(s)].1 += 1;
    }
    writeln!(w, "bin_left,bin_right,count_in,count_out")?;
    for (i, (a, b)) in counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let right = if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 };
        writeln!(w, "{left},{right},{a},{b}")?;
    }
    Ok(())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Out-of-distribution evaluation: one report row per requested method,
/// score dumps, rejection thresholds, histograms and norm medians.
pub fn eval_ood(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let data = load_data(cfg, out)?;
    let mut artifacts = Vec::new();
    let mut reports: Vec<(String, DetectionReport)> = Vec::new();
    let mut accuracies: Vec<(String, f64)> = Vec::new();
    let (tin, tout) = (data.test_in.features(), data.out_test.features());

    let mut push = |name: String, set: ScoreSet, artifacts: &mut Vec<PathBuf>| -> Result<(), ExperimentError> {
        emit(out, &format!("results/scores_{name}.csv"), artifacts, |w| set.write_csv(w))?;
        reports.push((name, evaluate_detection(&set)));
        Ok(())
    };

    for kind in &cfg.eval.models {
        match *kind {
            ModelKind::Baseline => {
                let m = load_model(out, "baseline")?;
                let preds: Vec<usize> = m.logits_rows(tin)?.iter().map(|l| argmax(l)).collect();
                accuracies.push(("baseline".into(), accuracy(&preds, data.test_in.labels())));
                let set = ScoreSet::new(max_softmax_rows(&m, tin)?, max_softmax_rows(&m, tout)?)?;
                push("baseline".into(), set, &mut artifacts)?;
            }
            ModelKind::Odin => {
                let m = load_model(out, "baseline")?;
                let choice = odin_grid_search(
                    &m,
                    data.val.features(),
                    data.out_val.features(),
                    &cfg.eval.odin_temperatures,
                    &cfg.eval.odin_epsilons,
                )?;
                emit(out, "results/odin_choice.csv", &mut artifacts, |w| {
                    writeln!(w, "temperature,epsilon,val_fpr_at_95_tpr")?;
                    writeln!(w, "{},{},{}", choice.temperature, choice.epsilon, choice.fpr_at_95_tpr)
                })?;
                let set = ScoreSet::new(
                    odin_scores(&m, tin, choice.temperature, choice.epsilon)?,
                    odin_scores(&m, tout, choice.temperature, choice.epsilon)?,
                )?;
                push("odin".into(), set, &mut artifacts)?;
            }
            ModelKind::Ensemble => {
                let ens = load_ensemble(cfg, out)?;
                accuracies.push(("ensemble".into(), accuracy(&ens.predict(tin)?, data.test_in.labels())));
                let set = ScoreSet::new(ensemble_scores(&ens, tin)?, ensemble_scores(&ens, tout)?)?;
                push("ensemble".into(), set, &mut artifacts)?;
            }
            ModelKind::Embed(k) => {
                let name = format!("embed{k}");
                let m = load_model(out, &name)?;
                let cb = load_codebook(cfg, out)?.select_spaces(&(0..k).collect::<Vec<_>>())?;
                let preds = embed_predictions(&m, &cb, &data.test_in)?;
                let labels = data.test_in.labels();
                let pred_labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
                accuracies.push((name.clone(), accuracy(&pred_labels, labels)));

                let ins: Vec<f64> = preds.iter().map(|p| p.ood_score).collect();
                let outs = embed_scores(&m, &data.out_test)?;
                let val = embed_scores(&m, &data.val)?;
                let alpha = threshold_at_tpr(&val, cfg.eval.tpr).expect("validation set is nonempty");
                let rate = |v: &[f64]| v.iter().filter(|&&s| s >= alpha).count() as f64 / v.len() as f64;
                emit(out, &format!("results/alpha_{name}.csv"), &mut artifacts, |w| {
                    writeln!(w, "alpha,val_tpr,test_tpr,test_fpr")?;
                    writeln!(w, "{alpha},{},{},{}", rate(&val), rate(&ins), rate(&outs))
                })?;

                emit(out, &format!("results/score_histogram_{name}.csv"), &mut artifacts, |w| {
                    write_histogram(w, &ins, &outs, cfg.eval.histogram_bins)
                })?;

                let (mut right, mut wrong) = (Vec::new(), Vec::new());
                for (p, &y) in preds.iter().zip(labels) {
                    if p.label == y { right.push(p.ood_score) } else { wrong.push(p.ood_score) }
                }
                emit(out, &format!("results/norm_medians_{name}.csv"), &mut artifacts, |w| {
                    writeln!(w, "group,count,median_score")?;
                    for (g, v) in [("ood", &outs), ("wrong", &wrong), ("correct", &right)] {
                        let m = median(v).map(|x| x.to_string()).unwrap_or_default();
                        writeln!(w, "{g},{},{m}", v.len())?;
                    }
                    Ok(())
                })?;

                let records: Vec<PredictionRecord> = preds
                    .into_iter()
                    .zip(labels)
                    .enumerate()
                    .map(|(i, (prediction, &true_label))| PredictionRecord {
                        example_id: i,
                        true_label,
                        prediction,
                    })
                    .collect();
                emit(out, &format!("results/predictions_{name}.csv"), &mut artifacts, |w| {
                    write_predictions_csv(w, &records)
                })?;

                push(name, ScoreSet::new(ins, outs)?, &mut artifacts)?;
            }
        }
    }

    emit(out, "results/ood_report.csv", &mut artifacts, |w| write_report_csv(w, &reports))?;
    emit(out, "results/accuracy.csv", &mut artifacts, |w| {
        writeln!(w, "model,test_accuracy")?;
        for (n, a) in &accuracies {
            writeln!(w, "{n},{a}")?;
        }
        Ok(())
    })?;
    record_time(out, "eval_ood", start)?;
    Ok(artifacts)
}

/// Black-box FGSM against the surrogate, scored by the agreement rule of
/// the largest embedding model and by ensemble unanimity.
pub fn eval_adv(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let mut artifacts = Vec::new();
    if !needs_surrogate(cfg) {
        return Ok(artifacts);
    }
    let data = load_data(cfg, out)?;
    let surrogate = load_model(out, "surrogate")?;
    let batch: AdversarialBatch = fgsm_batch(&surrogate, &data.test_in, cfg.eval.fgsm_epsilon, "models/surrogate.ckpt")?;
    emit(out, "results/adversarial_batch.csv", &mut artifacts, |w| batch.write_csv(w))?;

    // (detector, rule, setting, validation_frr, test_frr, detection_rate, met_target)
    let mut rows: Vec<(String, &str, usize, f64, f64, f64, bool)> = Vec::new();
    let mut acc_rows: Vec<(String, f64, f64)> = Vec::new();
    let labels = data.test_in.labels();
    let sur_acc = |rows: &[f64]| -> Result<f64, ExperimentError> {
        let p: Vec<usize> = surrogate.logits_rows(rows)?.iter().map(|l| argmax(l)).collect();
        Ok(accuracy(&p, labels))
    };
    acc_rows.push((
        "surrogate".into(),
        sur_acc(data.test_in.features())?,
        sur_acc(batch.perturbed.features())?,
    ));

    let mut ladder = |name: String,
                      max_m: usize,
                      val: &[usize],
                      clean: &[usize],
                      adv: &[usize]|
     -> Result<(), ExperimentError> {
        let full = |c: &[usize]| c.iter().map(|&x| x < max_m).collect::<Vec<bool>>();
        let strict = detection_rates(&full(adv), &full(clean))?;
        let val_frr = detection_rates(&full(adv), &full(val))?.false_rejection_rate;
        rows.push((name.clone(), "unanimous", max_m, val_frr, strict.false_rejection_rate, strict.detection_rate, true));
        let levels = agreement_ladder(val, adv, 2..=max_m);
        let matched = matched_frr_detection(&levels, cfg.eval.target_frr)?;
        let test_frr = clean.iter().filter(|&&c| c < matched.setting).count() as f64 / clean.len() as f64;
        rows.push((
            name,
            "matched_frr",
            matched.setting,
            matched.validation_frr,
            test_frr,
            matched.detection_rate,
            matched.met_target,
        ));
        Ok(())
    };

    if let Some(&k) = cfg.eval.embed_sizes().iter().filter(|&&k| k >= 2).max() {
        let name = format!("embed{k}");
        let m = load_model(out, &name)?;
        let cb = load_codebook(cfg, out)?.select_spaces(&(0..k).collect::<Vec<_>>())?;
        let heads = |ds: &Dataset| m.predict_rows(ds.features());
        let val_h = heads(&data.val)?;
        let clean_h = heads(&data.test_in)?;
        let adv_h = heads(&batch.perturbed)?;
        let counts = |hs: &[Vec<Vec<f64>>]| -> Result<Vec<usize>, ExperimentError> {
            hs.iter()
                .map(|h| Ok(agreement_count(&soft_decode(h, &cb)?.per_head_nearest)))
                .collect()
        };
        let spreads = |hs: &[Vec<Vec<f64>>]| -> Result<Vec<usize>, ExperimentError> {
            hs.iter().map(|h| Ok(ranking_spread(h, &cb)?)).collect()
        };
        let decoded = |hs: &[Vec<Vec<f64>>]| -> Result<f64, ExperimentError> {
            let p: Vec<usize> = hs.iter().map(|h| Ok(soft_decode(h, &cb)?.label)).collect::<Result<_, ExperimentError>>()?;
            Ok(accuracy(&p, labels))
        };
        acc_rows.push((name.clone(), decoded(&clean_h)?, decoded(&adv_h)?));
        let (sc, sa) = (spreads(&clean_h)?, spreads(&adv_h)?);
        emit(out, &format!("results/spread_histogram_{name}.csv"), &mut artifacts, |w| {
            write_spread_histogram(w, &sc, &sa)
        })?;
        ladder(name, k, &counts(&val_h)?, &counts(&clean_h)?, &counts(&adv_h)?)?;
    }

    if cfg.eval.has(ModelKind::Ensemble) {
        let ens = load_ensemble(cfg, out)?;
        let counts = |rows: &[f64]| -> Result<Vec<usize>, ExperimentError> {
            Ok(ens.member_argmax(rows)?.iter().map(|v| agreement_count(v)).collect())
        };
        acc_rows.push((
            "ensemble".into(),
            accuracy(&ens.predict(data.test_in.features())?, labels),
            accuracy(&ens.predict(batch.perturbed.features())?, labels),
        ));
        ladder(
            "ensemble".into(),
            ens.len(),
            &counts(data.val.features())?,
            &counts(data.test_in.features())?,
            &counts(batch.perturbed.features())?,
        )?;
    }

    emit(out, "results/adversarial_detection.csv", &mut artifacts, |w| {
        writeln!(w, "detector,rule,setting,validation_frr,test_frr,detection_rate,met_target")?;
        for (d, r, s, v, t, det, met) in &rows {
            writeln!(w, "{d},{r},{s},{v},{t},{det},{met}")?;
        }
        Ok(())
    })?;
    emit(out, "results/adversarial_accuracy.csv", &mut artifacts, |w| {
        writeln!(w, "model,clean_accuracy,adversarial_accuracy")?;
        for (n, c, a) in &acc_rows {
            writeln!(w, "{n},{c},{a}")?;
        }
        Ok(())
    })?;
    record_time(out, "eval_adv", start)?;
    Ok(artifacts)
}

/// Average taxonomy relatedness between true and predicted labels of the
/// misclassified in-distribution test examples.
pub fn eval_semantic(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let start = Instant::now();
    let mut artifacts = Vec::new();
    if !cfg.eval.semantic {
        return Ok(artifacts);
    }
    let data = load_data(cfg, out)?;
    let tax_path = cfg.eval.taxonomy.clone().unwrap_or_else(|| out.join("data/taxonomy.txt"));
    let mut tax = Taxonomy::load(&tax_path).map_err(|e| match e {
        crate::semantic::SemanticError::Io(source) => ExperimentError::File { path: tax_path.clone(), source },
        other => other.into(),
    })?;
    if let Some(p) = &cfg.eval.label_map {
        tax = tax.with_label_map(load_label_map(p)?)?;
    }
    let names = cfg.in_labels();
    let labels = data.test_in.labels();
    let tin = data.test_in.features();

    let mut predictions: Vec<(String, Vec<usize>)> = Vec::new();
    for kind in &cfg.eval.models {
        match *kind {
            ModelKind::Baseline => {
                let m = load_model(out, "baseline")?;
                predictions.push(("baseline".into(), m.logits_rows(tin)?.iter().map(|l| argmax(l)).collect()));
            }
            ModelKind::Ensemble => {
                predictions.push(("ensemble".into(), load_ensemble(cfg, out)?.predict(tin)?));
            }
            ModelKind::Embed(k) => {
                let name = format!("embed{k}");
                let m = load_model(out, &name)?;
                let cb = load_codebook(cfg, out)?.select_spaces(&(0..k).collect::<Vec<_>>())?;
                let p = embed_predictions(&m, &cb, &data.test_in)?;
                predictions.push((name, p.iter().map(|p| p.label).collect()));
            }
            ModelKind::Odin => {}
        }
    }

    let mut lines = Vec::new();
    for (name, pred) in &predictions {
        let pairs: Vec<(&str, &str)> = pred
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .map(|(&p, &y)| (names[y].as_str(), names[p].as_str()))
            .collect();
        let acc = accuracy(pred, labels);
        let line = if pairs.is_empty() {
            format!("{name},{acc},0,NA,NA,NA")
        } else {
            let s = avg_semantic_scores(&tax, &pairs)?;
            format!("{name},{acc},{},{},{},{}", pairs.len(), s.wup, s.lch, s.path)
        };
        lines.push(line);
    }
    emit(out, "results/semantic.csv", &mut artifacts, |w| {
        writeln!(w, "model,accuracy,errors,avg_wup,avg_lch,avg_path")?;
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    record_time(out, "eval_semantic", start)?;
    Ok(artifacts)
}

/// Lists every artifact under `out`, sums recorded stage times and writes
/// the manifest.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest, ExperimentError> {
    let mut artifacts = Vec::new();
    for dir in ["data", "embeddings", "models", "logs", "results"] {
        collect(out, &out.join(dir), &mut artifacts)?;
    }
    if out.join("config.resolved.txt").exists() {
        artifacts.push(PathBuf::from("config.resolved.txt"));
    }
    artifacts.retain(|p| !p.starts_with("logs") || !p.to_string_lossy().contains("time_"));
    artifacts.sort();
    let mut wall = 0.0;
    let mut times: HashMap<String, f64> = HashMap::new();
    if let Ok(entries) = fs::read_dir(out.join("logs")) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(stage) = name.strip_prefix("time_").and_then(|n| n.strip_suffix(".txt")) {
                let t: f64 = fs::read_to_string(e.path())?.trim().parse().unwrap_or(0.0);
                times.insert(stage.to_string(), t);
                wall += t;
            }
        }
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seeds: cfg.seeds(),
        artifacts,
        wall_clock_seconds: wall,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = out.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(file_err(&path))?;
    Ok(manifest)
}

fn collect(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries {
        let path = e?.path();
        if path.is_dir() {
            collect(root, &path, acc)?;
        } else {
            acc.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// All stages in order.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest, ExperimentError> {
    fs::create_dir_all(out).map_err(file_err(out))?;
    gen_data(cfg, out)?;
    gen_embeddings(cfg, out)?;
    train_models(cfg, out)?;
    eval_ood(cfg, out)?;
    eval_adv(cfg, out)?;
    eval_semantic(cfg, out)?;
    report(cfg, out)
}
