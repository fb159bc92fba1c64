//! Seeded synthetic data generators. Identical seeds give bitwise-identical data.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vector;
use crate::problems::data::{ClassificationData, RegressionData};
use crate::problems::hyperrepr::{Episode, GeneratorDescriptor, MetaDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub n: usize,
    pub features: usize,
    /// Distance between the two class means.
    pub separation: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperCleanParams {
    pub n_train: usize,
    pub n_val: usize,
    pub features: usize,
    pub separation: f64,
    pub noise: f64,
    /// Fraction ρ ∈ [0, 1) of training labels to flip.
    pub corruption: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceParams {
    pub tasks: usize,
    pub features: usize,
    pub true_dim: usize,
    pub classes: usize,
    pub shots_per_class: usize,
    pub val_shots_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionParams {
    pub n_train: usize,
    pub n_val: usize,
    pub features: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCleanData {
    pub train: ClassificationData,
    pub val: ClassificationData,
    /// `true` for every training example whose label was flipped.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    Gaussians2class(GaussianParams),
    HypercleanCorrupted(HyperCleanParams),
    SharedSubspaceTasks(SubspaceParams),
}

#[derive(Clone, Debug)]
pub enum SyntheticData {
    Gaussians(ClassificationData),
    HyperClean(HyperCleanData),
    Tasks { meta: MetaDataset, basis: DMatrix<f64> },
}

pub fn generate_synthetic(kind: &SyntheticKind, seed: u64) -> Result<SyntheticData> {
    Ok(match kind {
        SyntheticKind::Gaussians2class(p) => SyntheticData::Gaussians(gaussians_2class(p, seed)?),
        SyntheticKind::HypercleanCorrupted(p) => SyntheticData::HyperClean(hyperclean_corrupted(p, seed)?),
        SyntheticKind::SharedSubspaceTasks(p) => {
            let (meta, basis) = shared_subspace_tasks(p, seed)?;
            SyntheticData::Tasks { meta, basis }
        }
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_gaussian(p: &GaussianParams) -> Result<()> {
    if p.features == 0 {
        return Err(Error::BadParams("features must be positive".into()));
    }
    if !(p.noise > 0.0 && p.noise.is_finite()) || !p.separation.is_finite() {
        return Err(Error::BadParams("noise must be positive and separation finite".into()));
    }
    Ok(())
}

fn sample_gaussians(p: &GaussianParams, n: usize, rng: &mut ChaCha8Rng) -> ClassificationData {
    let half = 0.5 * p.separation / (p.features as f64).sqrt();
    let mut x = DMatrix::zeros(n, p.features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = usize::from(rng.random_bool(0.5));
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for j in 0..p.features {
            x[(i, j)] = sign * half + p.noise * normal(rng);
        }
        labels.push(y);
    }
    ClassificationData::new(x, labels, 2).expect("labels are binary")
}

/// Two isotropic Gaussian classes with means `±(separation/2)·1/√p`, labels
/// drawn with equal probability.
pub fn gaussians_2class(p: &GaussianParams, seed: u64) -> Result<ClassificationData> {
    check_gaussian(p)?;
    if p.n == 0 {
        return Err(Error::BadParams("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_gaussians(p, p.n, &mut rng))
}

/// Exactly `round(ρ·n_train)` flipped training labels.
pub fn corrupted_count(n_train: usize, corruption: f64) -> usize {
    (corruption * n_train as f64).round() as usize
}

/// Two-Gaussian train/validation splits with a fraction of the training labels
/// flipped. The validation split is clean.
pub fn hyperclean_corrupted(p: &HyperCleanParams, seed: u64) -> Result<HyperCleanData> {
    if !(0.0..1.0).contains(&p.corruption) {
        return Err(Error::BadParams(format!("corruption must lie in [0, 1), got {}", p.corruption)));
    }
    if p.n_train == 0 || p.n_val == 0 {
        return Err(Error::BadParams("both splits need examples".into()));
    }
    let g = GaussianParams {
        n: p.n_train,
        features: p.features,
        separation: p.separation,
        noise: p.noise,
    };
    check_gaussian(&g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = sample_gaussians(&g, p.n_train, &mut rng);
    let val = sample_gaussians(&g, p.n_val, &mut rng);
    let flips = corrupted_count(p.n_train, p.corruption);
    let mut mask = vec![false; p.n_train];
    for i in rand::seq::index::sample(&mut rng, p.n_train, flips) {
        mask[i] = true;
        train.labels[i] = 1 - train.labels[i];
    }
    Ok(HyperCleanData { train, val, mask })
}

/// Random orthonormal `p × k` basis.
pub fn random_basis(features: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(features, dim, |_, _| normal(rng));
    g.qr().q()
}

/// Classification tasks that all live on one shared `true_dim`-dimensional
/// subspace: each task draws class prototypes in the subspace and labels
/// Gaussian inputs by the best-scoring prototype, filling an exact quota of
/// shots per class. Returns the episodes and the subspace basis.
pub fn shared_subspace_tasks(p: &SubspaceParams, seed: u64) -> Result<(MetaDataset, DMatrix<f64>)> {
    check_subspace(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_basis(p.features, p.true_dim, &mut rng);
    let meta = tasks_on_basis(p, &basis, seed, &mut rng)?;
    Ok((meta, basis))
}

/// Fresh tasks on a given basis (e.g. held-out episodes).
pub fn shared_subspace_tasks_on(p: &SubspaceParams, basis: &DMatrix<f64>, seed: u64) -> Result<MetaDataset> {
    check_subspace(p)?;
    if basis.nrows() != p.features || basis.ncols() != p.true_dim {
        return Err(Error::BadParams("basis shape does not match parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tasks_on_basis(p, basis, seed, &mut rng)
}

fn check_subspace(p: &SubspaceParams) -> Result<()> {
    if p.true_dim == 0 || p.true_dim > p.features {
        return Err(Error::BadParams(format!(
            "true dimension {} must lie in 1..={}",
            p.true_dim, p.features
        )));
    }
    if p.classes < 2 || p.tasks == 0 || p.shots_per_class == 0 || p.val_shots_per_class == 0 {
        return Err(Error::BadParams("need ≥ 2 classes, ≥ 1 task and ≥ 1 shot per split".into()));
    }
    Ok(())
}

fn tasks_on_basis(
    p: &SubspaceParams,
    basis: &DMatrix<f64>,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<MetaDataset> {
    let quota = p.shots_per_class + p.val_shots_per_class;
    let max_draws = 10_000 * quota * p.classes;
    let mut episodes = Vec::with_capacity(p.tasks);
    for task in 0..p.tasks {
        let protos = DMatrix::from_fn(p.classes, p.true_dim, |_, _| normal(rng));
        let mut per_class: Vec<Vec<Vector>> = vec![Vec::new(); p.classes];
        let mut draws = 0;
        while per_class.iter().any(|c| c.len() < quota) {
            draws += 1;
            if draws > max_draws {
                return Err(Error::BadParams(format!("task {task}: could not fill class quotas")));
            }
            let x = Vector::from_fn(p.features, |_, _| normal(rng));
            let scores = &protos * (basis.transpose() * &x);
            let label = scores.imax();
            if per_class[label].len() < quota {
                per_class[label].push(x);
            }
        }
        let split = |range: std::ops::Range<usize>| -> ClassificationData {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (c, xs) in per_class.iter().enumerate() {
                for x in &xs[range.clone()] {
                    rows.extend_from_slice(x.as_slice());
                    labels.push(c);
                }
            }
            let n = labels.len();
            ClassificationData::new(DMatrix::from_row_slice(n, p.features, &rows), labels, p.classes)
                .expect("labels within class range")
        };
        episodes.push(Episode {
            task,
            train: Arc::new(split(0..p.shots_per_class)),
            val: Arc::new(split(p.shots_per_class..quota)),
        });
    }
    Ok(MetaDataset {
        episodes,
        descriptor: GeneratorDescriptor {
            seed,
            tasks: p.tasks,
            shots_per_class: p.shots_per_class,
            val_shots_per_class: p.val_shots_per_class,
            classes: p.classes,
            features: p.features,
            true_dim: p.true_dim,
        },
    })
}

/// Linear regression data `y = Xβ + noise` with Gaussian inputs and a shared
/// random `β`.
pub fn regression(p: &RegressionParams, seed: u64) -> Result<(RegressionData, RegressionData)> {
    if p.features == 0 || p.n_train == 0 || p.n_val == 0 {
        return Err(Error::BadParams("sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Vector::from_fn(p.features, |_, _| normal(&mut rng));
    let mut draw = |n: usize| {
        let x = DMatrix::from_fn(n, p.features, |_, _| normal(&mut rng));
        let noise = Vector::from_fn(n, |_, _| p.noise * normal(&mut rng));
        let y = &x * &beta + noise;
        RegressionData::new(x, y).expect("shapes agree")
    };
    let train = draw(p.n_train);
    let val = draw(p.n_val);
    Ok((train, val))
}
