//! Acceptance checks. Each prints one PASS/FAIL line; the binary exits
//! nonzero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};

use bilevel::dynamics::DynamicsSpec;
use bilevel::experiment::config::{ProblemConfig, RunConfig};
use bilevel::experiment::runner::hyperrepr_setup;
use bilevel::hypergrad::{f_value, forward_hypergrad, relative_inf_error, reverse_from};
use bilevel::instrument::instrument;
use bilevel::model::{BilevelProblem, Vector};
use bilevel::oracle::{convergence_harness, exact_hypergrad};
use bilevel::outer::{run_outer, OuterConfig};
use bilevel::problems::hyperclean::{hyperclean_problem, HyperCleanSpec, WEIGHT_SEGMENT};
use bilevel::problems::quadratic::learned_rate_problem;
use bilevel::problems::ridge::{ridge_problem, ridge_quadratic, RidgeSpec};
use bilevel::problems::synthetic::{hyperclean_corrupted, regression, HyperCleanParams, RegressionParams};
use bilevel::problems::{ClassificationData, RegressionData};
use bilevel::Result;

type Check = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn mode_agreement() -> Result<Outcome> {
    let started = Instant::now();
    let (stats, _) = common::full_sweep(&[0, 1, 5, 25], 10, false)?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        stats.worst_mode <= 1e-8 && secs < 30.0,
        format!(
            "{} cases, max relative l-inf {:.2e} (tol 1e-8), {secs:.1}s (limit 30s)",
            stats.cases, stats.worst_mode
        ),
    )
}

fn fd_agreement() -> Result<Outcome> {
    let started = Instant::now();
    let (stats, _) = common::full_sweep(&[0, 1, 5, 25], 10, true)?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        stats.worst_fd <= 1e-4 && secs < 120.0,
        format!(
            "{} cases, max relative l-inf {:.2e} (tol 1e-4), {secs:.1}s (limit 120s)",
            stats.cases, stats.worst_fd
        ),
    )
}

fn ridge_30x5(eta: f64) -> Result<BilevelProblem<RegressionData>> {
    let (train, val) = regression(
        &RegressionParams {
            n_train: 30,
            n_val: 30,
            features: 5,
            noise: 0.5,
        },
        3,
    )?;
    ridge_problem(
        train,
        val,
        &RidgeSpec {
            reg: 1.0,
            dynamics: DynamicsSpec::Gd { eta },
            horizon: 1,
        },
    )
}

fn convergence_rate() -> Result<Outcome> {
    let started = Instant::now();
    let eta = 0.01;
    let problem = ridge_30x5(eta)?;
    let q = ridge_quadratic(&problem)?;
    let horizons: Vec<usize> = (1..=60).collect();
    let table = convergence_harness(&problem, &q, problem.template(), &horizons)?;
    // independent spectrum of 2XᵀX + 2λI
    let x = &problem.train().x;
    let reg = problem.template().values()[0];
    let h = (x.transpose() * x + DMatrix::identity(5, 5) * reg) * 2.0;
    let theory = 1.0 - eta * SymmetricEigen::new(h).eigenvalues.min();
    let gap = (table.fitted_ratio - theory).abs() / theory;
    let tail_monotone = table
        .rows
        .iter()
        .filter(|r| r.horizon >= table.monotone_from && r.in_fit)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| w[1].error <= w[0].error);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        gap <= 0.2 && tail_monotone && (table.theoretical_ratio - theory).abs() < 1e-12 && secs < 30.0,
        format!(
            "fitted {:.4} vs theory {theory:.4} (gap {:.1}%, tol 20%), monotone from T={} , {secs:.1}s",
            table.fitted_ratio,
            gap * 100.0,
            table.monotone_from
        ),
    )
}

fn oracle_equivalence() -> Result<Outcome> {
    let started = Instant::now();
    let problem = ridge_30x5(0.01)?.with_horizon(2000);
    let hyper = problem.template();
    let rev = reverse_from(&problem, hyper, None)?;
    let q = ridge_quadratic(&problem)?;
    let exact = exact_hypergrad(&q, problem.outer(), problem.val(), hyper)?;
    // closed form, written out independently of the oracle module
    let (x, y) = (&problem.train().x, &problem.train().y);
    let (xv, yv) = (&problem.val().x, &problem.val().y);
    let reg = hyper.values()[0];
    let a = x.transpose() * x + DMatrix::identity(5, 5) * reg;
    let a_inv = a.try_inverse().expect("ridge system is invertible");
    let w = &a_inv * (x.transpose() * y);
    let dw = -(&a_inv * &w);
    let grad_e = xv.transpose() * (xv * &w - yv) * (2.0 / yv.len() as f64);
    let by_hand = Vector::from_element(1, dw.dot(&grad_e));
    let err = relative_inf_error(&exact, &rev.grad).max(relative_inf_error(&by_hand, &rev.grad));
    let secs = started.elapsed().as_secs_f64();
    outcome(
        err <= 1e-7 && secs < 10.0,
        format!("T=2000 relative error {err:.2e} (tol 1e-7), {secs:.2}s (limit 10s)"),
    )
}

fn grouped_hyperclean(groups: usize, horizon: usize) -> Result<BilevelProblem<ClassificationData>> {
    let data = hyperclean_corrupted(
        &HyperCleanParams {
            n_train: 2000,
            n_val: 200,
            features: 50,
            separation: 2.0,
            noise: 1.0,
            corruption: 0.3,
        },
        13,
    )?;
    let n = data.train.labels.len();
    let train = ClassificationData::with_weight_index(
        data.train.x,
        data.train.labels,
        2,
        (0..n).map(|i| i % groups).collect(),
    )?;
    let spec = HyperCleanSpec::new(&train, DynamicsSpec::Gd { eta: 2e-4 }, horizon);
    hyperclean_problem(train, data.val, &spec)
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed());
    }
    Ok(best)
}

fn cost_flatness() -> Result<Outcome> {
    let horizon = 10;
    let dims = [10, 100, 1000];
    let mut reverse_counts = Vec::new();
    let mut forward_counts = Vec::new();
    let mut times = Vec::new();
    for &m in &dims {
        let problem = grouped_hyperclean(m, horizon)?;
        let (counted, counter) = instrument(&problem)?;
        reverse_from(&counted, counted.template(), None)?;
        reverse_counts.push(counter.snapshot().derivative_products());
        counter.reset();
        forward_hypergrad(&counted, counted.template(), None)?;
        forward_counts.push(counter.snapshot().derivative_products());
        let hyper = problem.template().clone();
        times.push(min_time(9, || reverse_from(&problem, &hyper, None).map(|_| ()))?);
    }
    let flat = reverse_counts.iter().all(|&c| c == reverse_counts[0]);
    let ratio = times[2].as_secs_f64() / times[0].as_secs_f64();
    let per_dim: Vec<f64> = forward_counts
        .iter()
        .zip(&dims)
        .map(|(&c, &m)| c as f64 / m as f64)
        .collect();
    let linear = per_dim.iter().all(|&r| (r - per_dim[0]).abs() < 1e-12) && forward_counts[2] > forward_counts[0];
    outcome(
        flat && ratio <= 1.5 && linear,
        format!(
            "reverse products {reverse_counts:?}, time ratio dim 1000/10 = {ratio:.2} (limit 1.5), forward products {forward_counts:?}"
        ),
    )
}

fn hyperclean_efficacy() -> Result<Outcome> {
    let started = Instant::now();
    let data = hyperclean_corrupted(
        &HyperCleanParams {
            n_train: 100,
            n_val: 100,
            features: 10,
            separation: 2.0,
            noise: 1.0,
            corruption: 0.3,
        },
        42,
    )?;
    let mask = data.mask.clone();
    let spec = HyperCleanSpec {
        mask: Some(mask.clone()),
        ..HyperCleanSpec::new(&data.train, DynamicsSpec::Gd { eta: 0.005 }, 50)
    };
    let problem = hyperclean_problem(data.train, data.val, &spec)?;
    let cfg = OuterConfig {
        step_size: 2.0,
        max_steps: 200,
        ..Default::default()
    };
    let out = run_outer(&problem, &cfg, problem.template())?;
    let feasible = out
        .trace
        .records
        .iter()
        .all(|r| r.hyper.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let weights = out.hyper.segment_values(WEIGHT_SEGMENT).expect("weights");
    let mean = |flag: bool| {
        let sel: Vec<f64> = weights.iter().zip(&mask).filter(|(_, &m)| m == flag).map(|(w, _)| *w).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let gap = mean(false) - mean(true);
    let ones = problem.template().with_segment(WEIGHT_SEGMENT, &[1.0; 100])?;
    let baseline = f_value(&problem, &ones, None)?;
    let learned = f_value(&problem, &out.hyper, None)?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        gap >= 0.2 && learned < baseline && feasible && secs < 120.0,
        format!(
            "weight gap {gap:.3} (min 0.2), validation loss {learned:.4} vs all-ones {baseline:.4}, {} steps, {secs:.1}s",
            out.trace.len()
        ),
    )
}

fn learned_rate() -> Result<Outcome> {
    let c = -2.0_f64;
    let mut worst = 0.0_f64;
    let mut parts = Vec::new();
    for a in [0.5, 2.0, 4.0] {
        let problem = learned_rate_problem(a, c, 0.1 / a, 1)?;
        let cfg = OuterConfig {
            step_size: 0.5 * a / (c * c),
            max_steps: 500,
            tolerance: 1e-10,
            ..Default::default()
        };
        let out = run_outer(&problem, &cfg, problem.template())?;
        let eta = out.hyper.values()[0].exp();
        let rel = (eta - 1.0 / a).abs() * a;
        worst = worst.max(rel);
        parts.push(format!("a={a}: eta {eta:.5} vs {:.5}", 1.0 / a));
    }
    outcome(worst <= 0.05, format!("{} (max rel error {worst:.1e}, tol 5%)", parts.join("; ")))
}

fn principal_cosines(repr: &DMatrix<f64>, basis: &DMatrix<f64>) -> Vec<f64> {
    // QR orthonormalization plus an eigen-decomposition, independent of the
    // library's SVD-based routine
    let q = repr.transpose().qr().q();
    let m = q.transpose() * basis;
    let eig = SymmetricEigen::new(&m * m.transpose());
    eig.eigenvalues.iter().map(|&v| v.clamp(0.0, 1.0).sqrt()).collect()
}

fn hyper_representation() -> Result<Outcome> {
    let started = Instant::now();
    let cfg = RunConfig::from_toml(
        "kind = \"hyperrepr\"\nseed = 7\n[problem]\nfeatures = 10\ntrue_dim = 3\nk = 3\n[outer]\nmeta_batch = 4\nmax_steps = 500\n",
    )?;
    let ProblemConfig::Hyperrepr(p) = &cfg.problem else {
        unreachable!("hyperrepr config")
    };
    let (mp, held) = hyperrepr_setup(&cfg, p)?;
    let start = mp.template().clone();
    let out = run_outer(&mp, &cfg.outer, &start)?;
    let frozen = held.meta_loss(&start)?;
    let learned = held.meta_loss(&out.hyper)?;
    let basis = mp.truth().expect("basis");
    let angle = |h| -> Result<f64> {
        let cos = principal_cosines(&mp.repr(h)?, basis);
        Ok(cos.iter().cloned().fold(f64::INFINITY, f64::min).acos())
    };
    let (a0, a1) = (angle(&start)?, angle(&out.hyper)?);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        learned < frozen && a1 < a0 && out.trace.len() == 500 && secs < 300.0,
        format!(
            "held-out loss {learned:.4} vs frozen {frozen:.4}, largest angle {a0:.3} -> {a1:.3} rad, {secs:.1}s"
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<_> = std::fs::read_dir(&configs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    let tmp = tempfile::tempdir()?;
    let mut mismatched = Vec::new();
    for path in &paths {
        let cfg = RunConfig::from_path(path)?;
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{stem}-{rep}"));
            bilevel::experiment::run(&cfg, &dir)?;
            bytes.push((std::fs::read(dir.join("trace.csv"))?, std::fs::read(dir.join("summary.json"))?));
        }
        if bytes[0] != bytes[1] {
            mismatched.push(stem);
        }
    }
    outcome(
        mismatched.is_empty() && !paths.is_empty(),
        format!("{} configs rerun, mismatched: {mismatched:?}", paths.len()),
    )
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("reverse/forward mode agreement", mode_agreement),
        ("finite-difference agreement", fd_agreement),
        ("geometric convergence to the exact hypergradient", convergence_rate),
        ("independent oracle equivalence", oracle_equivalence),
        ("reverse-mode cost flat in dim(lambda)", cost_flatness),
        ("hyper-cleaning efficacy", hyperclean_efficacy),
        ("learnable learning rate", learned_rate),
        ("hyper-representation", hyper_representation),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {} [{}] {name}: {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
