//! TOML run configuration. Every section is optional except the top-level
//! `kind` and `seed`; omitted fields take the per-kind defaults below, and the
//! resolved configuration (defaults materialized) is what gets recorded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsSpec;
use crate::error::{Error, Result};
use crate::hypergrad::Mode;
use crate::outer::OuterConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Hyperclean,
    Hyperrepr,
    RidgeVerify,
    Gradcheck,
    Convergence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Hyperclean,
        ExperimentKind::Hyperrepr,
        ExperimentKind::RidgeVerify,
        ExperimentKind::Gradcheck,
        ExperimentKind::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Hyperclean => "hyperclean",
            ExperimentKind::Hyperrepr => "hyperrepr",
            ExperimentKind::RidgeVerify => "ridge-verify",
            ExperimentKind::Gradcheck => "gradcheck",
            ExperimentKind::Convergence => "convergence",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::Hyperclean => {
                "learn per-example weights that down-weight corrupted training labels"
            }
            ExperimentKind::Hyperrepr => {
                "learn a shared linear representation across few-shot classification tasks"
            }
            ExperimentKind::RidgeVerify => {
                "check unrolled ridge regression against its closed form and exact hypergradient"
            }
            ExperimentKind::Gradcheck => {
                "compare reverse, forward and finite-difference hypergradients at random points"
            }
            ExperimentKind::Convergence => {
                "measure how fast the truncated hypergradient approaches the exact one"
            }
        }
    }

    /// Kinds that emit `verdict.json`.
    pub fn is_verification(self) -> bool {
        matches!(
            self,
            ExperimentKind::RidgeVerify | ExperimentKind::Gradcheck | ExperimentKind::Convergence
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypercleanProblem {
    pub n_train: usize,
    pub n_val: usize,
    pub features: usize,
    pub separation: f64,
    pub noise: f64,
    pub corruption: f64,
    pub l2: f64,
    pub initial_weight: f64,
}

impl Default for HypercleanProblem {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_val: 100,
            features: 10,
            separation: 2.0,
            noise: 1.0,
            corruption: 0.3,
            l2: crate::problems::hyperclean::DEFAULT_L2,
            initial_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperreprProblem {
    pub tasks: usize,
    pub heldout_tasks: usize,
    pub features: usize,
    pub true_dim: usize,
    /// Width of the learned representation.
    pub k: usize,
    pub classes: usize,
    pub shots_per_class: usize,
    pub val_shots_per_class: usize,
    /// Entries of the initial representation are `N(0, repr_scale²)`.
    pub repr_scale: f64,
}

impl Default for HyperreprProblem {
    fn default() -> Self {
        Self {
            tasks: 200,
            heldout_tasks: 50,
            features: 10,
            true_dim: 3,
            k: 3,
            classes: 2,
            shots_per_class: 5,
            val_shots_per_class: 15,
            repr_scale: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeProblem {
    pub n_train: usize,
    pub n_val: usize,
    pub features: usize,
    pub noise: f64,
    pub reg: f64,
}

impl Default for RidgeProblem {
    fn default() -> Self {
        Self {
            n_train: 30,
            n_val: 30,
            features: 5,
            noise: 0.5,
            reg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradcheckTarget {
    Hyperclean,
    Ridge,
    Hyperrepr,
}

/// Problem a gradient check runs on.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TargetProblem {
    Hyperclean(HypercleanProblem),
    Hyperrepr(HyperreprProblem),
    Ridge(RidgeProblem),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ProblemConfig {
    Hyperclean(HypercleanProblem),
    Hyperrepr(HyperreprProblem),
    Ridge(RidgeProblem),
    Gradcheck {
        target: GradcheckTarget,
        #[serde(flatten)]
        inner: TargetProblem,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Random feasible points per gradient check.
    pub points: usize,
    /// Half-width of the sampling interval on unbounded coordinates.
    pub spread: f64,
    /// Random probes for the transpose-consistency check.
    pub probes: usize,
    pub horizons: Vec<usize>,
    pub endpoint_horizon: usize,
    pub oracle_horizon: usize,
    pub mode_tolerance: f64,
    pub fd_tolerance: f64,
    pub ratio_tolerance: f64,
    pub oracle_tolerance: f64,
    pub endpoint_tolerance: f64,
    pub stationarity_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            points: 10,
            spread: 0.5,
            probes: 20,
            horizons: (1..=60).collect(),
            endpoint_horizon: 500,
            oracle_horizon: 2000,
            mode_tolerance: 1e-8,
            fd_tolerance: 1e-4,
            ratio_tolerance: 0.2,
            oracle_tolerance: 1e-7,
            endpoint_tolerance: 1e-8,
            stationarity_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDynamics {
    name: String,
    eta: Option<f64>,
    mu: Option<f64>,
    horizon: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOuter {
    step_size: Option<f64>,
    max_steps: Option<usize>,
    mode: Option<Mode>,
    warm_restart: Option<bool>,
    meta_batch: Option<usize>,
    tolerance: Option<f64>,
    divergence_window: Option<usize>,
    divergence_factor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    seed: u64,
    output_dir: Option<PathBuf>,
    problem: Option<toml::Table>,
    dynamics: Option<RawDynamics>,
    outer: Option<RawOuter>,
    check: Option<CheckConfig>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub dynamics: DynamicsSpec,
    pub horizon: usize,
    pub outer: OuterConfig,
    pub check: CheckConfig,
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "BILEVEL_OUTPUT_DIR";

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        resolve(raw)
    }

    /// `$BILEVEL_OUTPUT_DIR`, else `output_dir`, else `runs/<kind>-<seed>`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", self.kind.name(), self.seed)))
    }
}

fn parse_problem<T: for<'de> Deserialize<'de> + Default>(table: Option<toml::Table>) -> Result<T> {
    match table {
        None => Ok(T::default()),
        Some(t) => t
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[problem]: {}", e.message()))),
    }
}

fn resolve_dynamics(kind: ExperimentKind, raw: Option<RawDynamics>) -> Result<(DynamicsSpec, usize)> {
    let (default_eta, default_horizon) = match kind {
        ExperimentKind::Hyperclean => (0.005, 50),
        ExperimentKind::Hyperrepr => (0.5, 10),
        ExperimentKind::RidgeVerify | ExperimentKind::Convergence => (0.01, 50),
        ExperimentKind::Gradcheck => (0.005, 10),
    };
    let raw = raw.unwrap_or(RawDynamics {
        name: "gd".into(),
        eta: None,
        mu: None,
        horizon: None,
    });
    let eta = raw.eta.unwrap_or(default_eta);
    let horizon = raw.horizon.unwrap_or(default_horizon);
    let spec = match raw.name.as_str() {
        "gd" => DynamicsSpec::Gd { eta },
        "hyper-lr" => DynamicsSpec::HyperLr { eta },
        "momentum" => DynamicsSpec::Momentum {
            eta,
            mu: raw.mu.unwrap_or(0.9),
        },
        other => {
            return Err(Error::Config(format!(
                "dynamics.name: unknown dynamics `{other}`, expected one of gd, hyper-lr, momentum"
            )))
        }
    };
    if raw.mu.is_some() && !matches!(spec, DynamicsSpec::Momentum { .. }) {
        return Err(Error::Config(format!("dynamics.mu: only momentum takes mu, not `{}`", raw.name)));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("dynamics.eta: must be positive, got {eta}")));
    }
    if let DynamicsSpec::Momentum { mu, .. } = spec {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::Config(format!("dynamics.mu: must lie in [0, 1), got {mu}")));
        }
    }
    Ok((spec, horizon))
}

fn resolve_outer(kind: ExperimentKind, raw: Option<RawOuter>, seed: u64) -> Result<OuterConfig> {
    let raw = raw.unwrap_or_default();
    let (step, steps, batch) = match kind {
        ExperimentKind::Hyperclean => (2.0, 200, None),
        ExperimentKind::Hyperrepr => (0.5, 500, Some(4)),
        ExperimentKind::RidgeVerify => (50.0, 500, None),
        _ => (0.5, 200, None),
    };
    if raw.meta_batch.is_some() && kind != ExperimentKind::Hyperrepr {
        return Err(Error::Config("outer.meta_batch: only hyperrepr runs sample episodes".into()));
    }
    let d = OuterConfig::default();
    let cfg = OuterConfig {
        step_size: raw.step_size.unwrap_or(step),
        max_steps: raw.max_steps.unwrap_or(steps),
        mode: raw.mode.unwrap_or(d.mode),
        warm_restart: raw.warm_restart.unwrap_or(d.warm_restart),
        meta_batch: raw.meta_batch.or(batch),
        tolerance: raw.tolerance.unwrap_or(d.tolerance),
        seed,
        divergence_window: raw.divergence_window.unwrap_or(d.divergence_window),
        divergence_factor: raw.divergence_factor.unwrap_or(d.divergence_factor),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let kind = raw.kind;
    let problem = match kind {
        ExperimentKind::Hyperclean => ProblemConfig::Hyperclean(parse_problem(raw.problem)?),
        ExperimentKind::Hyperrepr => ProblemConfig::Hyperrepr(parse_problem(raw.problem)?),
        ExperimentKind::RidgeVerify | ExperimentKind::Convergence => {
            ProblemConfig::Ridge(parse_problem(raw.problem)?)
        }
        ExperimentKind::Gradcheck => {
            let mut table = raw.problem.unwrap_or_default();
            let target = match table.remove("target") {
                None => GradcheckTarget::Hyperclean,
                Some(v) => v.try_into().map_err(|e: toml::de::Error| {
                    Error::Config(format!(
                        "problem.target: {}; expected hyperclean, ridge or hyperrepr",
                        e.message()
                    ))
                })?,
            };
            let inner = match target {
                GradcheckTarget::Hyperclean => TargetProblem::Hyperclean(merge(
                    HypercleanProblem {
                        n_train: 50,
                        n_val: 50,
                        features: 20,
                        ..Default::default()
                    },
                    table,
                )?),
                GradcheckTarget::Ridge => TargetProblem::Ridge(merge(RidgeProblem::default(), table)?),
                GradcheckTarget::Hyperrepr => TargetProblem::Hyperrepr(merge(
                    HyperreprProblem {
                        tasks: 4,
                        heldout_tasks: 1,
                        ..Default::default()
                    },
                    table,
                )?),
            };
            ProblemConfig::Gradcheck { target, inner }
        }
    };
    let (dynamics, horizon) = resolve_dynamics(kind, raw.dynamics)?;
    if kind == ExperimentKind::Convergence && !matches!(dynamics, DynamicsSpec::Gd { .. }) {
        return Err(Error::Config(
            "dynamics.name: the convergence rate is derived for gd only".into(),
        ));
    }
    let outer = resolve_outer(kind, raw.outer, raw.seed)?;
    let check = raw.check.unwrap_or_default();
    if check.points == 0 || check.probes == 0 {
        return Err(Error::Config("check.points and check.probes must be positive".into()));
    }
    if kind == ExperimentKind::Convergence && check.horizons.len() < 2 {
        return Err(Error::Config("check.horizons: need at least two horizons".into()));
    }
    Ok(RunConfig {
        kind,
        seed: raw.seed,
        output_dir: raw.output_dir,
        problem,
        dynamics,
        horizon,
        outer,
        check,
    })
}

/// Overlays the keys of `table` on `base`.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: T, table: toml::Table) -> Result<T> {
    let mut full = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    full.extend(table);
    full.try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("[problem]: {}", e.message())))
}
