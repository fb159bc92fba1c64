//! Problem suite shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bilevel::dynamics::DynamicsSpec;
use bilevel::hypergrad::{fd_hypergrad, forward_hypergrad, relative_inf_error, reverse_from};
use bilevel::model::{BilevelProblem, Dataset, HyperVector, NoData, Vector};
use bilevel::oracle::QuadraticInner;
use bilevel::problems::hyperclean::{hyperclean_problem, HyperCleanSpec};
use bilevel::problems::hyperrepr::{hyperrepr_problem, HeadInit, HyperReprSpec};
use bilevel::problems::quadratic::{quadratic_problem, QuadraticOuter};
use bilevel::problems::ridge::{ridge_problem, RidgeSpec};
use bilevel::problems::synthetic::{
    hyperclean_corrupted, regression, shared_subspace_tasks, HyperCleanParams, RegressionParams,
    SubspaceParams,
};
use bilevel::problems::{ClassificationData, RegressionData};
use bilevel::Result;

pub fn dynamics_with(eta: f64) -> Vec<DynamicsSpec> {
    vec![
        DynamicsSpec::Gd { eta },
        DynamicsSpec::HyperLr { eta },
        DynamicsSpec::Momentum { eta, mu: 0.7 },
    ]
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(d, d)
}

fn lambda_max(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.max()
}

/// Quadratic inner problem with λ entering both the Hessian and the linear
/// term, boxed to `[0, 2]³`.
pub fn quadratic(dynamics: &DynamicsSpec, horizon: usize) -> Result<BilevelProblem<NoData>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 4;
    let mut b = HyperVector::builder().bounded_segment("lambda", &[0.5, 1.0, 1.5], 0.0, 2.0);
    if let Some(theta) = dynamics.initial_log_rate() {
        b = b.segment("lr", &[theta]);
    }
    let template = b.build()?;
    let m = template.len();
    let a0 = random_spd(d, &mut rng);
    let u = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let v = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let terms = vec![(0, &u * u.transpose()), (1, &v * v.transpose())];
    let mut bmap = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
    if m > 3 {
        bmap.column_mut(3).fill(0.0);
    }
    let b0 = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let outer = QuadraticOuter::new(
        random_spd(d, &mut rng),
        Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)),
        0.5,
        m,
    )
    .with_hyper_curvature(Vector::from_fn(m, |k, _| if k < 3 { 0.1 * (k as f64 + 1.0) } else { 0.0 }));
    let q = QuadraticInner::new(a0, terms, b0, bmap, &template)?;
    quadratic_problem(q, outer, dynamics, template, horizon)
}

/// Step size `0.5 / λ_max(2A)`, bounded over the box of [`quadratic`].
pub fn quadratic_eta() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a0 = random_spd(4, &mut rng);
    let u = Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let v = Vector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let worst = a0 + (&u * u.transpose()) * 2.0 + (&v * v.transpose()) * 2.0;
    0.5 / (2.0 * lambda_max(&worst))
}

pub fn ridge(dynamics: &DynamicsSpec, horizon: usize) -> Result<BilevelProblem<RegressionData>> {
    let (train, val) = regression(
        &RegressionParams {
            n_train: 20,
            n_val: 15,
            features: 4,
            noise: 0.3,
        },
        5,
    )?;
    ridge_problem(
        train,
        val,
        &RidgeSpec {
            reg: 1.0,
            dynamics: dynamics.clone(),
            horizon,
        },
    )
}

pub fn hyperclean(dynamics: &DynamicsSpec, horizon: usize) -> Result<BilevelProblem<ClassificationData>> {
    let data = hyperclean_corrupted(
        &HyperCleanParams {
            n_train: 30,
            n_val: 20,
            features: 5,
            separation: 2.0,
            noise: 1.0,
            corruption: 0.3,
        },
        6,
    )?;
    let spec = HyperCleanSpec::new(&data.train, dynamics.clone(), horizon);
    hyperclean_problem(data.train, data.val, &spec)
}

/// One episode of a small hyper-representation problem.
pub fn hyperrepr(dynamics: &DynamicsSpec, horizon: usize) -> Result<BilevelProblem<ClassificationData>> {
    let (meta, basis) = shared_subspace_tasks(
        &SubspaceParams {
            tasks: 2,
            features: 6,
            true_dim: 2,
            classes: 3,
            shots_per_class: 4,
            val_shots_per_class: 4,
        },
        8,
    )?;
    let repr = DMatrix::from_fn(2, 6, |i, j| 0.4 * ((i * 6 + j) as f64 * 0.7).sin());
    let mp = hyperrepr_problem(
        meta,
        &HyperReprSpec {
            k: 2,
            repr,
            classes: 3,
            dynamics: dynamics.clone(),
            horizon,
            head_init: HeadInit::Zero,
            truth: Some(basis),
        },
    )?;
    Ok(mp.episode_problem(1))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SweepStats {
    pub cases: usize,
    pub worst_mode: f64,
    pub worst_fd: f64,
}

/// Largest relative ℓ∞ disagreement between reverse mode and forward mode
/// (and, when `fd` is set, central differences) over `points` random
/// feasible λ.
pub fn sweep<D: Dataset>(problem: &BilevelProblem<D>, points: usize, seed: u64, fd: bool) -> Result<SweepStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = SweepStats::default();
    for _ in 0..points {
        let hyper = problem.template().random_feasible(0.5, &mut rng);
        let rev = reverse_from(problem, &hyper, None)?;
        if fd {
            let num = fd_hypergrad(problem, &hyper, None)?;
            stats.worst_fd = stats.worst_fd.max(relative_inf_error(&rev.grad, &num.grad));
        } else {
            let fwd = forward_hypergrad(problem, &hyper, None)?;
            stats.worst_mode = stats.worst_mode.max(relative_inf_error(&rev.grad, &fwd.grad));
        }
        stats.cases += 1;
    }
    Ok(stats)
}

/// Runs [`sweep`] over every shipped problem × dynamics × horizon.
pub fn full_sweep(horizons: &[usize], points: usize, fd: bool) -> Result<(SweepStats, Vec<String>)> {
    let mut total = SweepStats::default();
    let mut lines = Vec::new();
    let mut merge = |name: String, s: SweepStats| {
        total.cases += s.cases;
        total.worst_mode = total.worst_mode.max(s.worst_mode);
        total.worst_fd = total.worst_fd.max(s.worst_fd);
        lines.push(format!("{name}: mode {:.2e} fd {:.2e}", s.worst_mode, s.worst_fd));
    };
    let q_eta = quadratic_eta();
    for &t in horizons {
        for (i, spec) in dynamics_with(q_eta).iter().enumerate() {
            merge(format!("quadratic/{spec:?}/T={t}"), sweep(&quadratic(spec, t)?, points, 100 + i as u64, fd)?);
        }
        for (i, spec) in dynamics_with(0.01).iter().enumerate() {
            merge(format!("ridge/{spec:?}/T={t}"), sweep(&ridge(spec, t)?, points, 200 + i as u64, fd)?);
        }
        for (i, spec) in dynamics_with(0.02).iter().enumerate() {
            merge(format!("hyperclean/{spec:?}/T={t}"), sweep(&hyperclean(spec, t)?, points, 300 + i as u64, fd)?);
        }
        for (i, spec) in dynamics_with(0.5).iter().enumerate() {
            merge(format!("hyperrepr/{spec:?}/T={t}"), sweep(&hyperrepr(spec, t)?, points, 400 + i as u64, fd)?);
        }
    }
    Ok((total, lines))
}
