//! Executes one resolved [`RunConfig`] and writes its artifacts:
//!
//! | file | contents |
//! |------|----------|
//! | `trace.csv` | one row per outer step (or per checked point / horizon) |
//! | `timing.csv` | wall-clock milliseconds per row of `trace.csv` |
//! | `summary.json` | resolved config and results; identical across reruns |
//! | `verdict.json` | verification kinds only: invariant → `{pass, measured, threshold}` |
//! | `meta.json` | timestamps and total wall time |

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use crate::dynamics::LR_SEGMENT;
use crate::error::{Error, Result};
use crate::experiment::config::{
    ExperimentKind, HypercleanProblem, HyperreprProblem, ProblemConfig, RidgeProblem, RunConfig,
    TargetProblem,
};
use crate::experiment::output::{write_atomic, write_json, ArtifactPaths, Verdict, Verdicts};
use crate::hypergrad::{
    f_value, fd_hypergrad, forward_hypergrad, relative_inf_error, reverse_from, reverse_hypergrad,
    unroll,
};
use crate::model::{check_transpose_consistency, BilevelProblem, Dataset, HyperVector, Vector};
use crate::oracle::{convergence_harness, exact_hypergrad, exact_minimizer};
use crate::outer::{lambda_hash, run_outer, OuterRecord, OuterTrace, StopReason};
use crate::problems::data::{write_classification_csv, write_mask_csv, write_regression_csv, ClassificationData, RegressionData};
use crate::problems::hyperclean::{hyperclean_problem, weight_separation, HyperCleanSpec};
use crate::problems::hyperrepr::{
    hyperrepr_problem, largest_principal_angle, HeadInit, HyperReprSpec, MetaProblem,
};
use crate::problems::ridge::{ridge_problem, ridge_quadratic, RidgeSpec};
use crate::problems::synthetic::{
    hyperclean_corrupted, regression, shared_subspace_tasks, shared_subspace_tasks_on,
    HyperCleanParams, RegressionParams, SubspaceParams,
};

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub summary: Value,
    pub verdicts: Option<Verdicts>,
}

impl RunReport {
    /// `true` unless some verdict failed.
    pub fn passed(&self) -> bool {
        self.verdicts
            .as_ref()
            .is_none_or(|v| v.values().all(|v| v.pass))
    }
}

struct KindOutput {
    trace: OuterTrace,
    results: Value,
    verdicts: Option<Verdicts>,
}

/// Runs `config` and writes every artifact into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let started_at = unix_seconds();
    let clock = Instant::now();
    let paths = ArtifactPaths::new(out_dir);
    std::fs::create_dir_all(out_dir)?;
    log::info!("running {} (seed {}) into {}", config.kind.name(), config.seed, out_dir.display());
    let output = match (&config.kind, &config.problem) {
        (ExperimentKind::Hyperclean, ProblemConfig::Hyperclean(p)) => run_hyperclean(config, p, &paths)?,
        (ExperimentKind::Hyperrepr, ProblemConfig::Hyperrepr(p)) => run_hyperrepr(config, p)?,
        (ExperimentKind::RidgeVerify, ProblemConfig::Ridge(p)) => run_ridge_verify(config, p, &paths)?,
        (ExperimentKind::Convergence, ProblemConfig::Ridge(p)) => run_convergence(config, p, &paths)?,
        (ExperimentKind::Gradcheck, ProblemConfig::Gradcheck { inner, .. }) => run_gradcheck(config, inner)?,
        (kind, _) => {
            return Err(Error::Config(format!("problem section does not match kind {}", kind.name())))
        }
    };

    write_atomic(&paths.trace(), &output.trace.to_csv())?;
    write_atomic(&paths.timing(), &output.trace.timing_csv())?;
    let summary = json!({
        "config": config,
        "stop_reason": uses_outer_loop(config.kind).then_some(output.trace.stop_reason),
        "steps": output.trace.len(),
        "results": output.results,
        "pass": output.verdicts.as_ref().map(|v| v.values().all(|v| v.pass)),
    });
    write_json(&paths.summary(), &summary)?;
    if let Some(v) = &output.verdicts {
        write_json(&paths.verdict(), v)?;
    }
    write_json(
        &paths.meta(),
        &json!({
            "started_unix": started_at,
            "finished_unix": unix_seconds(),
            "wall_ms": clock.elapsed().as_secs_f64() * 1e3,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    Ok(RunReport {
        kind: config.kind,
        output_dir: out_dir.to_path_buf(),
        summary,
        verdicts: output.verdicts,
    })
}

fn uses_outer_loop(kind: ExperimentKind) -> bool {
    matches!(
        kind,
        ExperimentKind::Hyperclean | ExperimentKind::Hyperrepr | ExperimentKind::RidgeVerify
    )
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn row(step: usize, f: f64, grad: &Vector, inner: f64, hyper: &HyperVector, wall: Instant) -> OuterRecord {
    OuterRecord {
        step,
        f_value: f,
        hypergrad_inf_norm: grad.amax(),
        residual: 0.0,
        inner_final_loss: inner,
        lambda_hash: lambda_hash(hyper.values()),
        hyper: hyper.values().clone(),
        wall_ms: wall.elapsed().as_secs_f64() * 1e3,
    }
}

fn finite(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::String(x.to_string())
    }
}

fn segments_json(hyper: &HyperVector) -> Value {
    let mut map = serde_json::Map::new();
    for s in hyper.segments() {
        map.insert(s.name.clone(), json!(hyper.segment_values(&s.name).unwrap_or(&[])));
    }
    Value::Object(map)
}

fn learned_rate(hyper: &HyperVector) -> Option<f64> {
    hyper.segment_values(LR_SEGMENT).map(|v| v[0].exp())
}

fn hyperclean_data(
    p: &HypercleanProblem,
    seed: u64,
) -> Result<(ClassificationData, ClassificationData, Vec<bool>)> {
    let data = hyperclean_corrupted(
        &HyperCleanParams {
            n_train: p.n_train,
            n_val: p.n_val,
            features: p.features,
            separation: p.separation,
            noise: p.noise,
            corruption: p.corruption,
        },
        seed,
    )?;
    Ok((data.train, data.val, data.mask))
}

fn hyperclean_from(
    config: &RunConfig,
    p: &HypercleanProblem,
    train: ClassificationData,
    val: ClassificationData,
    mask: Option<Vec<bool>>,
) -> Result<BilevelProblem<ClassificationData>> {
    let spec = HyperCleanSpec {
        initial_weight: p.initial_weight,
        weight_count: train.weight_count(),
        mask,
        dynamics: config.dynamics.clone(),
        horizon: config.horizon,
        l2: p.l2,
    };
    hyperclean_problem(train, val, &spec)
}

fn run_hyperclean(config: &RunConfig, p: &HypercleanProblem, paths: &ArtifactPaths) -> Result<KindOutput> {
    let (train, val, mask) = hyperclean_data(p, config.seed)?;
    write_classification_csv(&paths.file("train.csv"), &train)?;
    write_classification_csv(&paths.file("val.csv"), &val)?;
    write_mask_csv(&paths.file("mask.csv"), &mask)?;
    let problem = hyperclean_from(config, p, train, val, Some(mask.clone()))?;
    let start = problem.template().clone();
    let outcome = run_outer(&problem, &config.outer, &start)?;
    let ones = start.with_segment(
        crate::problems::hyperclean::WEIGHT_SEGMENT,
        &vec![1.0; mask.len()],
    )?;
    let baseline = f_value(&problem, &ones, None)?;
    let final_loss = f_value(&problem, &outcome.hyper, None)?;
    let (corrupted, clean) = weight_separation(&outcome.hyper, &mask);
    Ok(KindOutput {
        results: json!({
            "validation_loss": finite(final_loss),
            "baseline_validation_loss": finite(baseline),
            "mean_weight_corrupted": corrupted,
            "mean_weight_clean": clean,
            "weight_gap": clean - corrupted,
            "learned_step_size": learned_rate(&outcome.hyper),
            "final_hyper": segments_json(&outcome.hyper),
        }),
        trace: outcome.trace,
        verdicts: None,
    })
}

fn subspace_params(p: &HyperreprProblem, tasks: usize) -> SubspaceParams {
    SubspaceParams {
        tasks,
        features: p.features,
        true_dim: p.true_dim,
        classes: p.classes,
        shots_per_class: p.shots_per_class,
        val_shots_per_class: p.val_shots_per_class,
    }
}

/// Meta-training problem, held-out copy and the generator's subspace basis.
pub fn hyperrepr_setup(config: &RunConfig, p: &HyperreprProblem) -> Result<(MetaProblem, MetaProblem)> {
    let (meta, basis) = shared_subspace_tasks(&subspace_params(p, p.tasks), config.seed)?;
    let heldout = shared_subspace_tasks_on(
        &subspace_params(p, p.heldout_tasks.max(1)),
        &basis,
        config.seed.wrapping_add(1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let normal = Normal::new(0.0, p.repr_scale)
        .map_err(|e| Error::Config(format!("problem.repr_scale: {e}")))?;
    let repr = DMatrix::from_fn(p.k, p.features, |_, _| normal.sample(&mut rng));
    let spec = HyperReprSpec {
        k: p.k,
        repr,
        classes: p.classes,
        dynamics: config.dynamics.clone(),
        horizon: config.horizon,
        head_init: HeadInit::Zero,
        truth: Some(basis),
    };
    let mp = hyperrepr_problem(meta, &spec)?;
    let held = mp.with_meta(heldout.clone())?;
    Ok((mp, held))
}

fn run_hyperrepr(config: &RunConfig, p: &HyperreprProblem) -> Result<KindOutput> {
    let (mp, held) = hyperrepr_setup(config, p)?;
    let start = mp.template().clone();
    let outcome = run_outer(&mp, &config.outer, &start)?;
    let basis = mp.truth().expect("generator basis is recorded");
    let angle_start = largest_principal_angle(&mp.repr(&start)?, basis);
    let angle_final = largest_principal_angle(&mp.repr(&outcome.hyper)?, basis);
    let frozen = held.meta_loss(&start)?;
    let learned = held.meta_loss(&outcome.hyper)?;
    Ok(KindOutput {
        results: json!({
            "heldout_loss_learned": finite(learned),
            "heldout_loss_frozen": finite(frozen),
            "largest_angle_start": angle_start,
            "largest_angle_final": angle_final,
            "final_hyper": segments_json(&outcome.hyper),
        }),
        trace: outcome.trace,
        verdicts: None,
    })
}

fn ridge_setup(config: &RunConfig, p: &RidgeProblem) -> Result<BilevelProblem<RegressionData>> {
    let (train, val) = regression(
        &RegressionParams {
            n_train: p.n_train,
            n_val: p.n_val,
            features: p.features,
            noise: p.noise,
        },
        config.seed,
    )?;
    ridge_problem(
        train,
        val,
        &RidgeSpec {
            reg: p.reg,
            dynamics: config.dynamics.clone(),
            horizon: config.horizon,
        },
    )
}

/// Central-difference step that stays inside the box at `hyper`.
fn safe_fd_step(hyper: &HyperVector) -> f64 {
    let mut eps = f64::INFINITY;
    for k in 0..hyper.len() {
        let x = hyper.values()[k];
        let room = (x - hyper.lower()[k]).min(hyper.upper()[k] - x);
        eps = eps.min(crate::hypergrad::default_fd_step(x)).min(0.5 * room);
    }
    eps
}

fn run_ridge_verify(config: &RunConfig, p: &RidgeProblem, paths: &ArtifactPaths) -> Result<KindOutput> {
    let problem = ridge_setup(config, p)?;
    write_regression_csv(&paths.file("train.csv"), problem.train())?;
    write_regression_csv(&paths.file("val.csv"), problem.val())?;
    let start = problem.template().clone();
    let q = ridge_quadratic(&problem)?;
    let check = &config.check;
    let mut verdicts = Verdicts::new();

    let w_star = exact_minimizer(&q, &start)?;
    let traj = unroll(&problem.with_horizon(check.endpoint_horizon), &start, None)?;
    verdicts.insert(
        "closed_form_endpoint".into(),
        Verdict::at_most(
            relative_inf_error(&w_star, &traj.final_state().params),
            check.endpoint_tolerance,
        ),
    );

    let long = problem.with_horizon(check.oracle_horizon);
    let rev = reverse_from(&long, &start, None)?;
    let exact = exact_hypergrad(&q, problem.outer(), problem.val(), &start)?;
    verdicts.insert(
        "oracle_hypergrad".into(),
        Verdict::at_most(relative_inf_error(&exact, &rev.grad), check.oracle_tolerance),
    );

    let rev_t = reverse_from(&problem, &start, None)?;
    let fd = fd_hypergrad(&problem, &start, Some(safe_fd_step(&start)))?;
    verdicts.insert(
        "fd_hypergrad".into(),
        Verdict::at_most(relative_inf_error(&rev_t.grad, &fd.grad), check.fd_tolerance),
    );

    let rep = check_transpose_consistency(&problem, &start, check.probes, config.seed);
    verdicts.insert(
        "transpose_consistency".into(),
        Verdict::at_most(rep.max_defect, rep.threshold),
    );

    let outcome = run_outer(&problem, &config.outer, &start)?;
    let fd_star = fd_hypergrad(&problem, &outcome.hyper, Some(safe_fd_step(&outcome.hyper)))?;
    let beta = config.outer.step_size;
    let stepped = outcome
        .hyper
        .with_values(outcome.hyper.values() - &fd_star.grad * beta)?
        .project_box();
    let residual = (outcome.hyper.values() - stepped.values()).amax() / beta;
    verdicts.insert(
        "outer_stationarity".into(),
        Verdict::at_most(residual, check.stationarity_tolerance),
    );

    Ok(KindOutput {
        results: json!({
            "final_hyper": segments_json(&outcome.hyper),
            "final_f_value": finite(f_value(&problem, &outcome.hyper, None)?),
            "exact_hypergrad_at_start": exact.as_slice(),
            "converged": outcome.trace.stop_reason == StopReason::Converged,
        }),
        trace: outcome.trace,
        verdicts: Some(verdicts),
    })
}

fn run_convergence(config: &RunConfig, p: &RidgeProblem, paths: &ArtifactPaths) -> Result<KindOutput> {
    let problem = ridge_setup(config, p)?;
    let q = ridge_quadratic(&problem)?;
    let start = problem.template().clone();
    let clock = Instant::now();
    let table = convergence_harness(&problem, &q, &start, &config.check.horizons)?;
    table.write_csv(&paths.file("convergence.csv"))?;
    let records = table
        .rows
        .iter()
        .map(|r| OuterRecord {
            step: r.horizon,
            f_value: r.f_value,
            hypergrad_inf_norm: r.grad_inf_norm,
            residual: 0.0,
            inner_final_loss: r.inner_final_loss,
            lambda_hash: lambda_hash(start.values()),
            hyper: start.values().clone(),
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        })
        .collect();
    let max_t = table.rows.iter().map(|r| r.horizon).max().unwrap_or(0);
    let mut verdicts = Verdicts::new();
    verdicts.insert(
        "fitted_ratio".into(),
        Verdict::at_most(table.relative_ratio_gap(), config.check.ratio_tolerance),
    );
    verdicts.insert(
        "monotone_tail".into(),
        Verdict::at_most(table.monotone_from as f64, (max_t / 2) as f64),
    );
    Ok(KindOutput {
        results: json!({
            "fitted_ratio": table.fitted_ratio,
            "theoretical_ratio": table.theoretical_ratio,
            "monotone_from": table.monotone_from,
            "step_size": table.step_size,
            "hessian_min": table.hessian_min,
            "hessian_max": table.hessian_max,
        }),
        trace: OuterTrace {
            records,
            stop_reason: StopReason::MaxSteps,
        },
        verdicts: Some(verdicts),
    })
}

fn run_gradcheck(config: &RunConfig, inner: &TargetProblem) -> Result<KindOutput> {
    match inner {
        TargetProblem::Hyperclean(p) => {
            let (train, val, _) = hyperclean_data(p, config.seed)?;
            gradcheck_on(config, &hyperclean_from(config, p, train, val, None)?)
        }
        TargetProblem::Ridge(p) => gradcheck_on(config, &ridge_setup(config, p)?),
        TargetProblem::Hyperrepr(p) => {
            let (mp, _) = hyperrepr_setup(config, p)?;
            gradcheck_on(config, &mp.episode_problem(0))
        }
    }
}

/// Mode agreement, finite differences, transpose consistency and replay at
/// `check.points` random feasible points.
fn gradcheck_on<D: Dataset>(config: &RunConfig, problem: &BilevelProblem<D>) -> Result<KindOutput> {
    let check = &config.check;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut records = Vec::with_capacity(check.points);
    let (mut mode_err, mut fd_err, mut replay_failures) = (0.0_f64, 0.0_f64, 0);
    for i in 0..check.points {
        let clock = Instant::now();
        let hyper = problem.template().random_feasible(check.spread, &mut rng);
        let traj = unroll(problem, &hyper, None)?;
        if traj.verify_replay(problem).is_err() {
            replay_failures += 1;
        }
        let rev = reverse_hypergrad(problem, &traj)?;
        let fwd = forward_hypergrad(problem, &hyper, None)?;
        let fd = fd_hypergrad(problem, &hyper, None)?;
        mode_err = mode_err.max(relative_inf_error(&rev.grad, &fwd.grad));
        fd_err = fd_err.max(relative_inf_error(&rev.grad, &fd.grad));
        records.push(row(i, rev.f_value, &rev.grad, rev.inner_final_loss(), &hyper, clock));
    }
    let rep = check_transpose_consistency(problem, problem.template(), check.probes, config.seed);
    let mut verdicts = Verdicts::new();
    verdicts.insert("mode_agreement".into(), Verdict::at_most(mode_err, check.mode_tolerance));
    verdicts.insert("fd_agreement".into(), Verdict::at_most(fd_err, check.fd_tolerance));
    verdicts.insert(
        "transpose_consistency".into(),
        Verdict::at_most(rep.max_defect, rep.threshold),
    );
    verdicts.insert("replay".into(), Verdict::at_most(replay_failures as f64, 0.0));
    Ok(KindOutput {
        results: json!({
            "points": check.points,
            "hyper_dim": problem.template().len(),
            "param_dim": problem.param_dim(),
            "max_mode_error": mode_err,
            "max_fd_error": fd_err,
            "max_transpose_defect": rep.max_defect,
        }),
        trace: OuterTrace {
            records,
            stop_reason: StopReason::MaxSteps,
        },
        verdicts: Some(verdicts),
    })
}
