use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::Dataset;
use crate::embedding::EmbeddingSpace;

use super::config::DataSpec;
use super::ExperimentError;

/// Splits of a generated mixture. In-distribution labels index
/// `DataSpec::in_components`; out-of-distribution labels index
/// `DataSpec::out_components`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub val: Dataset,
    pub test_in: Dataset,
    pub out_val: Dataset,
    pub out_test: Dataset,
}

impl SyntheticData {
    pub fn splits(&self) -> [(&'static str, &Dataset); 5] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test_in", &self.test_in),
            ("out_val", &self.out_val),
            ("out_test", &self.out_test),
        ]
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gaussian mixture with component means on a sphere of radius
/// `separation`, isotropic noise, and features clipped to `[-clip, clip]`.
pub fn gen_synthetic_dataset(spec: &DataSpec) -> Result<SyntheticData, ExperimentError> {
    if let Some(c) = spec.in_components.iter().find(|c| spec.out_components.contains(c)) {
        return Err(ExperimentError::OverlappingSplit(*c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let components = spec
        .in_components
        .iter()
        .chain(&spec.out_components)
        .max()
        .map_or(0, |m| m + 1);
    let means: Vec<Vec<f64>> = (0..components)
        .map(|_| {
            let mut m = normal_vec(&mut rng, spec.dim);
            normalize(&mut m);
            m.iter().map(|x| x * spec.separation).collect()
        })
        .collect();
    let sample = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means[c]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                (m + spec.noise * z).clamp(-spec.clip, spec.clip)
            })
            .collect()
    };

    let n = spec.samples_per_class;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, &c) in spec.in_components.iter().enumerate() {
        let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 2);
        let pool = n - n_test;
        let n_val = ((pool as f64 * spec.val_fraction).round() as usize).clamp(1, pool - 1);
        for i in 0..n {
            let x = sample(c, &mut rng);
            let dest = if i < n_test {
                &mut test
            } else if i < n_test + n_val {
                &mut val
            } else {
                &mut train
            };
            dest.push((x, label));
        }
    }
    let (mut out_val, mut out_test) = (Vec::new(), Vec::new());
    for (label, &c) in spec.out_components.iter().enumerate() {
        let n_val = ((n as f64 * spec.out_val_fraction).round() as usize).clamp(1, n - 1);
        for i in 0..n {
            let x = sample(c, &mut rng);
            if i < n_val {
                out_val.push((x, label));
            } else {
                out_test.push((x, label));
            }
        }
    }

    let mut finish = |mut rows: Vec<(Vec<f64>, usize)>| -> Dataset {
        rows.shuffle(&mut rng);
        let labels = rows.iter().map(|r| r.1).collect();
        let features = rows.into_iter().flat_map(|r| r.0).collect();
        Dataset::new(spec.dim, features, labels)
            .expect("generated rows are well formed")
            .with_range(-spec.clip, spec.clip)
    };
    Ok(SyntheticData {
        train: finish(std::mem::take(&mut train)),
        val: finish(std::mem::take(&mut val)),
        test_in: finish(std::mem::take(&mut test)),
        out_val: finish(std::mem::take(&mut out_val)),
        out_test: finish(std::mem::take(&mut out_test)),
    })
}

/// Random `rows × cols` matrix with orthonormal columns (rows ≥ cols) or
/// orthonormal rows (rows < cols).
fn random_isometry(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows.max(cols);
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix makes the factor uniformly distributed.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.view((0, 0), (rows, cols)).into_owned()
}

/// `dims.len()` embedding spaces over `labels`. The first holds random unit
/// vectors; each later one is a random rotation of the first blended with
/// independent noise, `diversity` controlling the blend (0: pure rotation,
/// 1: pure noise).
pub fn gen_synthetic_codebooks(
    labels: &[String],
    dims: &[usize],
    seed: u64,
    diversity: f64,
) -> Result<Vec<EmbeddingSpace>, ExperimentError> {
    if !(0.0..=1.0).contains(&diversity) {
        return Err(ExperimentError::Invalid(format!("diversity {diversity} outside [0, 1]")));
    }
    if dims.is_empty() || dims.iter().any(|&d| d < 2) {
        return Err(ExperimentError::Invalid("embedding dimensions must be at least 2".into()));
    }
    if labels.is_empty() {
        return Err(ExperimentError::Invalid("no labels to embed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec<f64>> = labels
        .iter()
        .map(|_| {
            let mut v = normal_vec(&mut rng, dims[0]);
            normalize(&mut v);
            v
        })
        .collect();
    let mut spaces = Vec::with_capacity(dims.len());
    for (k, &d) in dims.iter().enumerate() {
        let mut space = EmbeddingSpace::new(format!("space{}", k + 1), d)?;
        if k == 0 {
            for (label, v) in labels.iter().zip(&base) {
                space.insert(label.clone(), v)?;
            }
        } else {
            let rot = random_isometry(&mut rng, d, dims[0]);
            for (label, v) in labels.iter().zip(&base) {
                let rotated = &rot * nalgebra::DVector::from_column_slice(v);
                let mut noise = normal_vec(&mut rng, d);
                normalize(&mut noise);
                let mut row: Vec<f64> = rotated
                    .iter()
                    .zip(&noise)
                    .map(|(r, z)| (1.0 - diversity) * r + diversity * z)
                    .collect();
                normalize(&mut row);
                space.insert(label.clone(), &row)?;
            }
        }
        spaces.push(space);
    }
    Ok(spaces)
}

/// Two-level taxonomy over the in-distribution labels: consecutive pairs of
/// labels share a parent group under a single root.
pub fn synthetic_taxonomy(labels: &[String]) -> String {
    let mut text = String::from("!root entity\n");
    for g in 0..labels.len().div_ceil(2) {
        text.push_str(&format!("group{g} entity\n"));
    }
    for (i, l) in labels.iter().enumerate() {
        text.push_str(&format!("{l} group{}\n", i / 2));
    }
    text
}
