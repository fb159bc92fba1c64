//! Hyper-representation meta-learning.
//!
//! A shared linear map `h_λ(x) = R x` (`R ∈ ℝ^{k×p}`, the `repr` segment of λ)
//! feeds episode-local softmax heads `W^j ∈ ℝ^{C×k}`. Heads are the inner
//! variables, trained for `T` steps on each episode's training split from a
//! cold start; the outer objective is the validation loss averaged over a
//! batch of episodes and depends on λ both through the heads and directly
//! through `h_λ`.

use std::sync::Arc;

use nalgebra::{DMatrix, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{ConstantInit, DynamicsSpec, ZeroInit, LR_SEGMENT};
use crate::error::{Error, Result};
use crate::hypergrad::{hypergrad, f_value, HypergradResult, Mode};
use crate::model::{
    assemble_problem, BilevelProblem, Dataset, HyperVector, InitMap, InnerObjective,
    OuterObjective, Splits, Vector,
};
use crate::problems::data::ClassificationData;

pub const REPR_SEGMENT: &str = "repr";

/// One task's data, split into task-train and task-validation parts.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task: usize,
    pub train: Arc<ClassificationData>,
    pub val: Arc<ClassificationData>,
}

/// How a meta-dataset was generated.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GeneratorDescriptor {
    pub seed: u64,
    pub tasks: usize,
    pub shots_per_class: usize,
    pub val_shots_per_class: usize,
    pub classes: usize,
    pub features: usize,
    pub true_dim: usize,
}

#[derive(Clone, Debug)]
pub struct MetaDataset {
    pub episodes: Vec<Episode>,
    pub descriptor: GeneratorDescriptor,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Uniform sample of `batch` distinct episode indices.
pub fn sample_meta_batch(meta: &MetaDataset, batch: usize, seed: u64) -> Result<Vec<usize>> {
    if batch > meta.len() {
        return Err(Error::BatchTooLarge {
            batch,
            available: meta.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, meta.len(), batch).into_vec())
}

#[derive(Clone, Copy, Debug)]
struct Shapes {
    k: usize,
    p: usize,
    classes: usize,
    repr_offset: usize,
    hyper_dim: usize,
}

impl Shapes {
    fn repr(&self, hyper: &HyperVector) -> DMatrix<f64> {
        let vals = &hyper.values().as_slice()[self.repr_offset..self.repr_offset + self.k * self.p];
        DMatrix::from_row_slice(self.k, self.p, vals)
    }

    fn heads(&self, w: &Vector) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.classes, self.k, w.as_slice())
    }

    fn flatten_heads(m: &DMatrix<f64>) -> Vector {
        Vector::from_column_slice(m.transpose().as_slice())
    }

    fn embed_repr(&self, m: &DMatrix<f64>) -> Vector {
        let mut out = Vector::zeros(self.hyper_dim);
        out.rows_mut(self.repr_offset, self.k * self.p)
            .copy_from_slice(m.transpose().as_slice());
        out
    }

    fn repr_tangent(&self, dhyper: &Vector) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            self.k,
            self.p,
            &dhyper.as_slice()[self.repr_offset..self.repr_offset + self.k * self.p],
        )
    }
}

/// Forward pass quantities for one split.
struct Forward {
    z: DMatrix<f64>,
    probs: DMatrix<f64>,
    /// `softmax − onehot`
    resid: DMatrix<f64>,
    loss: f64,
}

fn forward(shapes: &Shapes, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> Forward {
    let r = shapes.repr(hyper);
    let heads = shapes.heads(w);
    let z = &data.x * r.transpose();
    let logits = &z * heads.transpose();
    let n = data.len();
    let mut probs = DMatrix::zeros(n, shapes.classes);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let top = row.max();
        let mut sum = 0.0;
        for c in 0..shapes.classes {
            let e = (row[c] - top).exp();
            probs[(i, c)] = e;
            sum += e;
        }
        for c in 0..shapes.classes {
            probs[(i, c)] /= sum;
        }
        loss += top + sum.ln() - row[data.labels[i]];
    }
    let mut resid = probs.clone();
    for i in 0..n {
        resid[(i, data.labels[i])] -= 1.0;
    }
    Forward {
        z,
        probs,
        resid,
        loss: loss / n.max(1) as f64,
    }
}

/// Row-wise softmax Jacobian applied to `ds`: `p ⊙ ds − p (p·ds)`.
fn softmax_jacobian(probs: &DMatrix<f64>, ds: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = probs.component_mul(ds);
    for i in 0..probs.nrows() {
        let inner: f64 = out.row(i).sum();
        for c in 0..probs.ncols() {
            out[(i, c)] -= probs[(i, c)] * inner;
        }
    }
    out
}

/// Mean softmax cross-entropy of the episode heads on `h_λ(x)`.
pub struct ReprInner {
    shapes: Shapes,
}

impl InnerObjective<ClassificationData> for ReprInner {
    fn param_dim(&self) -> usize {
        self.shapes.classes * self.shapes.k
    }

    fn hyper_dim(&self) -> usize {
        self.shapes.hyper_dim
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> f64 {
        forward(&self.shapes, w, hyper, data).loss
    }

    fn grad(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        Shapes::flatten_heads(&(f.resid.transpose() * &f.z / data.len() as f64))
    }

    fn hvp(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData, v: &Vector) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        let dv = self.shapes.heads(v);
        let m = softmax_jacobian(&f.probs, &(&f.z * dv.transpose()));
        Shapes::flatten_heads(&(m.transpose() * &f.z / data.len() as f64))
    }

    fn cross_vjp(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData, v: &Vector) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        let heads = self.shapes.heads(w);
        let vm = self.shapes.heads(v);
        let m = softmax_jacobian(&f.probs, &(&f.z * vm.transpose()));
        let g = (heads.transpose() * m.transpose() + vm.transpose() * f.resid.transpose()) * &data.x
            / data.len() as f64;
        self.shapes.embed_repr(&g)
    }

    fn cross_jvp(
        &self,
        w: &Vector,
        hyper: &HyperVector,
        data: &ClassificationData,
        dhyper: &Vector,
    ) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        let heads = self.shapes.heads(w);
        let dr = self.shapes.repr_tangent(dhyper);
        let dz = &data.x * dr.transpose();
        let m = softmax_jacobian(&f.probs, &(&dz * heads.transpose()));
        Shapes::flatten_heads(&((m.transpose() * &f.z + f.resid.transpose() * dz) / data.len() as f64))
    }
}

/// Mean validation cross-entropy; depends on λ explicitly through `h_λ`.
pub struct ReprOuter {
    shapes: Shapes,
}

impl OuterObjective<ClassificationData> for ReprOuter {
    fn param_dim(&self) -> usize {
        self.shapes.classes * self.shapes.k
    }

    fn hyper_dim(&self) -> usize {
        self.shapes.hyper_dim
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> f64 {
        forward(&self.shapes, w, hyper, data).loss
    }

    fn grad_w(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        Shapes::flatten_heads(&(f.resid.transpose() * &f.z / data.len() as f64))
    }

    fn grad_hyper(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> Vector {
        let f = forward(&self.shapes, w, hyper, data);
        let heads = self.shapes.heads(w);
        let g = heads.transpose() * f.resid.transpose() * &data.x / data.len() as f64;
        self.shapes.embed_repr(&g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadInit {
    Zero,
    Gaussian { scale: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperReprSpec {
    /// Representation width `k ≤ p`.
    pub k: usize,
    /// Initial representation, `k × p`.
    pub repr: DMatrix<f64>,
    pub classes: usize,
    pub dynamics: DynamicsSpec,
    pub horizon: usize,
    pub head_init: HeadInit,
    /// Orthonormal basis (`p × k*`) of the subspace the generator used.
    pub truth: Option<DMatrix<f64>>,
}

/// A per-episode bilevel problem plus the episodes it can be pointed at.
/// The meta-objective is the mean of per-episode `f_T` over a batch.
#[derive(Clone, Debug)]
pub struct MetaProblem {
    problem: BilevelProblem<ClassificationData>,
    meta: Arc<MetaDataset>,
    truth: Option<DMatrix<f64>>,
}

/// Averaged result over a batch of episodes.
#[derive(Clone, Debug)]
pub struct BatchHypergrad {
    pub f_value: f64,
    pub grad: Vector,
    pub inner_final_loss: f64,
    pub episodes: Vec<usize>,
}

/// Layout: `repr` (row-major `k × p`), plus `lr` for a learned head step.
pub fn hyperrepr_template(repr: &DMatrix<f64>, dynamics: &DynamicsSpec) -> Result<HyperVector> {
    let mut b = HyperVector::builder().segment(REPR_SEGMENT, repr.transpose().as_slice());
    if let Some(theta) = dynamics.initial_log_rate() {
        b = b.segment(LR_SEGMENT, &[theta]);
    }
    b.build()
}

pub fn hyperrepr_problem(meta: MetaDataset, spec: &HyperReprSpec) -> Result<MetaProblem> {
    let first = meta.episodes.first().ok_or(Error::EmptyTrainingSet)?;
    let p = first.train.features();
    for (j, ep) in meta.episodes.iter().enumerate() {
        for found in [ep.train.features(), ep.val.features()] {
            if found != p {
                return Err(Error::InconsistentFeatureDim {
                    episode: j,
                    expected: p,
                    found,
                });
            }
        }
        if ep.train.classes != spec.classes || ep.val.classes != spec.classes {
            return Err(Error::BadParams(format!(
                "episode {j} has {} classes, expected {}",
                ep.train.classes, spec.classes
            )));
        }
    }
    if spec.repr.nrows() != spec.k || spec.repr.ncols() != p {
        return Err(Error::DimensionMismatch {
            left: "representation".into(),
            left_dim: spec.repr.len(),
            right: "k × p".into(),
            right_dim: spec.k * p,
        });
    }
    if spec.k > p {
        return Err(Error::BadParams(format!("representation width {} exceeds {p}", spec.k)));
    }
    let template = hyperrepr_template(&spec.repr, &spec.dynamics)?;
    let shapes = Shapes {
        k: spec.k,
        p,
        classes: spec.classes,
        repr_offset: 0,
        hyper_dim: template.len(),
    };
    let d = spec.classes * spec.k;
    let init: Arc<dyn InitMap> = match spec.head_init {
        HeadInit::Zero => Arc::new(ZeroInit::new(d, template.len())),
        HeadInit::Gaussian { scale, seed } => {
            Arc::new(ConstantInit::gaussian(d, template.len(), scale, seed))
        }
    };
    let splits = Splits {
        train: Arc::clone(&first.train),
        val: Arc::clone(&first.val),
    };
    let problem = assemble_problem(
        Arc::new(ReprInner { shapes }),
        Arc::new(ReprOuter { shapes }),
        spec.dynamics.build::<ClassificationData>(&template)?,
        init,
        spec.horizon,
        splits,
        template,
    )?;
    Ok(MetaProblem {
        problem,
        meta: Arc::new(meta),
        truth: spec.truth.clone(),
    })
}

impl MetaProblem {
    pub fn meta(&self) -> &MetaDataset {
        &self.meta
    }

    pub fn template(&self) -> &HyperVector {
        self.problem.template()
    }

    pub fn truth(&self) -> Option<&DMatrix<f64>> {
        self.truth.as_ref()
    }

    /// The bilevel problem restricted to one episode.
    pub fn episode_problem(&self, index: usize) -> BilevelProblem<ClassificationData> {
        let ep = &self.meta.episodes[index];
        self.problem.with_splits(Splits {
            train: Arc::clone(&ep.train),
            val: Arc::clone(&ep.val),
        })
    }

    /// Same problem over a different set of episodes (e.g. held-out tasks).
    pub fn with_meta(&self, meta: MetaDataset) -> Result<Self> {
        if meta.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        Ok(Self {
            meta: Arc::new(meta),
            ..self.clone()
        })
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            problem: self.problem.with_horizon(horizon),
            ..self.clone()
        }
    }

    /// Mean of per-episode hypergradients; episodes run in parallel and are
    /// reduced in the order given.
    pub fn hypergrad_batch(&self, hyper: &HyperVector, episodes: &[usize], mode: Mode) -> Result<BatchHypergrad> {
        if episodes.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let results: Vec<Result<HypergradResult>> = episodes
            .par_iter()
            .map(|&j| hypergrad(&self.episode_problem(j), hyper, mode, None))
            .collect();
        let n = episodes.len() as f64;
        let mut f = 0.0;
        let mut grad = Vector::zeros(hyper.len());
        let mut inner = 0.0;
        for r in results {
            let r = r?;
            f += r.f_value;
            grad += &r.grad;
            inner += r.inner_final_loss();
        }
        Ok(BatchHypergrad {
            f_value: f / n,
            grad: grad / n,
            inner_final_loss: inner / n,
            episodes: episodes.to_vec(),
        })
    }

    pub fn hypergrad_full(&self, hyper: &HyperVector, mode: Mode) -> Result<BatchHypergrad> {
        let all: Vec<usize> = (0..self.meta.len()).collect();
        self.hypergrad_batch(hyper, &all, mode)
    }

    /// Mean `f_T` over every episode.
    pub fn meta_loss(&self, hyper: &HyperVector) -> Result<f64> {
        let values: Vec<Result<f64>> = (0..self.meta.len())
            .into_par_iter()
            .map(|j| f_value(&self.episode_problem(j), hyper, None))
            .collect();
        let mut total = 0.0;
        for v in values {
            total += v?;
        }
        Ok(total / self.meta.len() as f64)
    }

    /// Representation matrix `R` held in `hyper`.
    pub fn repr(&self, hyper: &HyperVector) -> Result<DMatrix<f64>> {
        let seg = hyper
            .segment(REPR_SEGMENT)
            .ok_or_else(|| Error::Layout("no representation segment".into()))?;
        let p = self.meta.episodes[0].train.features();
        Ok(DMatrix::from_row_slice(seg.len / p, p, &hyper.values().as_slice()[seg.range()]))
    }
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("requested U");
    let top = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > top * 1e-12)
        .count();
    u.columns(0, rank).into_owned()
}

/// Principal angles (radians, ascending) between the row space of `repr`
/// (`k × p`) and the column space of `basis` (`p × k*`).
pub fn principal_angles(repr: &DMatrix<f64>, basis: &DMatrix<f64>) -> Vec<f64> {
    let q1 = orthonormal_columns(&repr.transpose());
    let q2 = orthonormal_columns(basis);
    let cross = q1.transpose() * q2;
    let mut cos: Vec<f64> = SVD::new(cross, false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    cos.sort_by(|a, b| b.total_cmp(a));
    cos.into_iter().map(f64::acos).collect()
}

pub fn largest_principal_angle(repr: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    principal_angles(repr, basis)
        .last()
        .copied()
        .unwrap_or(std::f64::consts::FRAC_PI_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_transpose_consistency;
    use crate::problems::synthetic::{shared_subspace_tasks, SubspaceParams};

    fn small_meta(tasks: usize) -> (MetaDataset, DMatrix<f64>) {
        shared_subspace_tasks(
            &SubspaceParams {
                tasks,
                features: 5,
                true_dim: 2,
                classes: 3,
                shots_per_class: 3,
                val_shots_per_class: 4,
            },
            11,
        )
        .unwrap()
    }

    fn spec(k: usize, classes: usize, repr: DMatrix<f64>) -> HyperReprSpec {
        HyperReprSpec {
            k,
            repr,
            classes,
            dynamics: DynamicsSpec::Gd { eta: 0.5 },
            horizon: 5,
            head_init: HeadInit::Gaussian { scale: 0.1, seed: 3 },
            truth: None,
        }
    }

    #[test]
    fn transpose_consistent() {
        let (meta, _) = small_meta(3);
        let repr = DMatrix::from_fn(2, 5, |i, j| 0.3 * (i as f64 + 1.0) - 0.1 * j as f64);
        let mp = hyperrepr_problem(meta, &spec(2, 3, repr)).unwrap();
        let p = mp.episode_problem(1);
        let rep = check_transpose_consistency(&p, mp.template(), 20, 5);
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn identity_representation_is_plain_softmax_regression() {
        let (meta, _) = small_meta(2);
        let mp = hyperrepr_problem(meta, &spec(5, 3, DMatrix::identity(5, 5))).unwrap();
        let problem = mp.episode_problem(0);
        let data = problem.train();
        let w = Vector::from_fn(15, |i, _| (i as f64 * 0.37).sin());
        // independent multinomial logistic loss with W applied to x directly
        let heads = DMatrix::from_row_slice(3, 5, w.as_slice());
        let mut loss = 0.0;
        for i in 0..data.len() {
            let s = &heads * data.x.row(i).transpose();
            let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
            loss += lse - s[data.labels[i]];
        }
        loss /= data.len() as f64;
        let got = problem.inner().value(&w, mp.template(), data);
        assert!((got - loss).abs() < 1e-12, "{got} vs {loss}");
    }

    #[test]
    fn single_task_batch_equals_episode_hypergradient() {
        let (meta, _) = small_meta(1);
        let repr = DMatrix::from_fn(2, 5, |i, j| ((i * 5 + j) as f64).cos());
        let mp = hyperrepr_problem(meta, &spec(2, 3, repr)).unwrap();
        let batch = mp.hypergrad_full(mp.template(), Mode::Reverse).unwrap();
        let single = hypergrad(&mp.episode_problem(0), mp.template(), Mode::Reverse, None).unwrap();
        assert_eq!(batch.grad, single.grad);
        assert_eq!(batch.f_value, single.f_value);
    }

    #[test]
    fn outer_gradient_matches_central_differences() {
        let (meta, _) = small_meta(2);
        let repr = DMatrix::from_fn(2, 5, |i, j| 0.2 * i as f64 - 0.15 * j as f64 + 0.1);
        let mp = hyperrepr_problem(meta, &spec(2, 3, repr)).unwrap();
        let problem = mp.episode_problem(0);
        let hyper = mp.template();
        let w = Vector::from_fn(6, |i, _| 0.4 * (i as f64).sin());
        let analytic = problem.outer().grad_hyper(&w, hyper, problem.val());
        for k in 0..hyper.len() {
            let h = 1e-6;
            let mut up = hyper.values().clone();
            up[k] += h;
            let mut down = hyper.values().clone();
            down[k] -= h;
            let fp = problem.outer().value(&w, &hyper.with_values(up).unwrap(), problem.val());
            let fm = problem.outer().value(&w, &hyper.with_values(down).unwrap(), problem.val());
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - analytic[k]).abs() <= 1e-4 * analytic.amax().max(1e-8),
                "coordinate {k}: {fd} vs {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn inconsistent_features_rejected() {
        let (mut meta, _) = small_meta(2);
        let bad = ClassificationData::new(DMatrix::zeros(2, 4), vec![0, 1], 3).unwrap();
        meta.episodes[1].val = Arc::new(bad);
        let err = hyperrepr_problem(meta, &spec(2, 3, DMatrix::zeros(2, 5))).unwrap_err();
        assert!(matches!(err, Error::InconsistentFeatureDim { episode: 1, .. }));
    }

    #[test]
    fn batch_sampling() {
        let (meta, _) = small_meta(6);
        assert_eq!(sample_meta_batch(&meta, 3, 4).unwrap(), sample_meta_batch(&meta, 3, 4).unwrap());
        let mut full = sample_meta_batch(&meta, 6, 1).unwrap();
        full.sort_unstable();
        assert_eq!(full, (0..6).collect::<Vec<_>>());
        assert!(matches!(
            sample_meta_batch(&meta, 7, 1),
            Err(Error::BatchTooLarge { batch: 7, available: 6 })
        ));
    }

    #[test]
    fn principal_angles_of_known_subspaces() {
        let basis = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let same = DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0]);
        assert!(largest_principal_angle(&same, &basis).abs() < 1e-7);
        let tilted = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let angle = largest_principal_angle(&tilted, &basis);
        assert!((angle - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }
}
