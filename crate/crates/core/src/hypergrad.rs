//! Hypergradients of the truncated objective `f_T(λ) = E(w_T(λ), λ)`.
//!
//! * [`reverse_hypergrad`] sweeps an adjoint backwards over a stored
//!   [`Trajectory`]; its cost depends on `T`, not on `dim(λ)`.
//! * [`forward_hypergrad`] propagates the tangent matrix `Z_t = dw_t/dλ`
//!   alongside the unroll and stores nothing.
//! * [`fd_hypergrad`] is the central-difference oracle for both.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BilevelProblem, DataSlice, Dataset, HyperVector, InnerState, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Reverse,
    Forward,
    FiniteDiff,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Reverse => "reverse",
            Mode::Forward => "forward",
            Mode::FiniteDiff => "finite-diff",
        })
    }
}

/// Carries the final inner state of one outer iteration into the next.
/// The carried state is treated as a constant: no derivative flows through it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStartState {
    pub enabled: bool,
    carried: Option<InnerState>,
}

impl WarmStartState {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            carried: None,
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn carried(&self) -> Option<&InnerState> {
        if self.enabled {
            self.carried.as_ref()
        } else {
            None
        }
    }

    pub fn update(&mut self, state: InnerState) {
        if self.enabled {
            self.carried = Some(state);
        }
    }
}

/// The stored unroll `[w_0, …, w_T]` plus what is needed to replay it.
#[derive(Clone, Debug)]
pub struct Trajectory {
    states: Vec<InnerState>,
    hyper: HyperVector,
    slices: Vec<DataSlice>,
    warm_started: bool,
    inner_losses: Vec<f64>,
}

impl Trajectory {
    pub fn states(&self) -> &[InnerState] {
        &self.states
    }

    pub fn hyper(&self) -> &HyperVector {
        &self.hyper
    }

    pub fn slices(&self) -> &[DataSlice] {
        &self.slices
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &InnerState {
        self.states.last().expect("trajectory holds at least w_0")
    }

    pub fn warm_started(&self) -> bool {
        self.warm_started
    }

    /// Inner objective on the full training data at every stored state.
    pub fn inner_losses(&self) -> &[f64] {
        &self.inner_losses
    }

    /// Recomputes every step and checks it reproduces the stored state bitwise.
    pub fn verify_replay<D: Dataset>(&self, problem: &BilevelProblem<D>) -> Result<()> {
        for t in 1..self.states.len() {
            self.replay_step(problem, t)?;
        }
        Ok(())
    }

    fn replay_step<D: Dataset>(&self, problem: &BilevelProblem<D>, t: usize) -> Result<()> {
        let data = self.slices[t - 1].apply(problem.train());
        let next = problem
            .dynamics()
            .step(problem.inner(), &self.states[t - 1], &self.hyper, &data)?;
        if next != self.states[t] {
            return Err(Error::TrajectoryMismatch(format!("step {t} does not replay")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub inner_losses: Vec<f64>,
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct HypergradResult {
    pub f_value: f64,
    pub grad: Vector,
    pub mode: Mode,
    pub final_state: InnerState,
    pub diagnostics: Diagnostics,
}

impl HypergradResult {
    pub fn inner_final_loss(&self) -> f64 {
        self.diagnostics.inner_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn start_state<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
) -> Result<(InnerState, bool)> {
    match warm.and_then(WarmStartState::carried) {
        Some(state) => {
            if state.params.len() != problem.param_dim() || state.dim() != problem.state_dim() {
                return Err(Error::DimensionMismatch {
                    left: "problem state".into(),
                    left_dim: problem.state_dim(),
                    right: "warm-start state".into(),
                    right_dim: state.dim(),
                });
            }
            Ok((state.clone(), true))
        }
        None => Ok((problem.initial_state(hyper), false)),
    }
}

fn checked_step<D: Dataset>(
    problem: &BilevelProblem<D>,
    state: &InnerState,
    hyper: &HyperVector,
    data: &D,
    t: usize,
) -> Result<InnerState> {
    let next = match problem.dynamics().step(problem.inner(), state, hyper, data) {
        Err(Error::NonFiniteGradient) => return Err(Error::NonFiniteState { step: t }),
        other => other?,
    };
    if !next.is_finite() {
        return Err(Error::NonFiniteState { step: t });
    }
    Ok(next)
}

/// Runs the inner dynamics for `T` steps from `Φ_0(λ)` (or the carried warm
/// state) and stores every iterate.
pub fn unroll<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
) -> Result<Trajectory> {
    problem.check_hyper(hyper)?;
    let (w0, warm_started) = start_state(problem, hyper, warm)?;
    let horizon = problem.horizon();
    let train = problem.train();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut slices = Vec::with_capacity(horizon);
    let mut inner_losses = Vec::with_capacity(horizon + 1);
    inner_losses.push(problem.inner().value(&w0.params, hyper, train));
    states.push(w0);
    for t in 1..=horizon {
        let slice = problem.schedule().slice_for_step(t, train.len());
        let data = slice.apply(train);
        let next = checked_step(problem, &states[t - 1], hyper, &data, t)?;
        inner_losses.push(problem.inner().value(&next.params, hyper, train));
        states.push(next);
        slices.push(slice);
    }
    Ok(Trajectory {
        states,
        hyper: hyper.clone(),
        slices,
        warm_started,
        inner_losses,
    })
}

/// `f_T(λ)`: unroll, then evaluate the outer objective at `w_T`.
pub fn f_value<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
) -> Result<f64> {
    let traj = unroll(problem, hyper, warm)?;
    Ok(problem
        .outer()
        .value(&traj.final_state().params, hyper, problem.val()))
}

fn pad_to_state(grad_w: Vector, state_dim: usize) -> Vector {
    let d = grad_w.len();
    if d == state_dim {
        return grad_w;
    }
    let mut out = Vector::zeros(state_dim);
    out.rows_mut(0, d).copy_from(&grad_w);
    out
}

/// Adjoint sweep over a stored trajectory:
/// `α_T = ∇_w E`, `α_{t−1} = (∂Φ_t/∂w)ᵀ α_t`,
/// `∇f_T = ∇_λ E + Σ_t (∂Φ_t/∂λ)ᵀ α_t + (∂Φ_0/∂λ)ᵀ α_0`.
pub fn reverse_hypergrad<D: Dataset>(
    problem: &BilevelProblem<D>,
    trajectory: &Trajectory,
) -> Result<HypergradResult> {
    let started = Instant::now();
    let hyper = &trajectory.hyper;
    if trajectory.horizon() != problem.horizon() {
        return Err(Error::TrajectoryMismatch(format!(
            "trajectory has {} steps, problem unrolls {}",
            trajectory.horizon(),
            problem.horizon()
        )));
    }
    if !problem.template().same_layout(hyper) {
        return Err(Error::TrajectoryMismatch("hyperparameter layout differs".into()));
    }
    if trajectory.states.iter().any(|s| s.dim() != problem.state_dim()) {
        return Err(Error::TrajectoryMismatch("state dimension differs".into()));
    }
    // spot-check the last step; a trajectory from another λ or data will not replay
    if trajectory.horizon() > 0 {
        trajectory.replay_step(problem, trajectory.horizon())?;
    }

    let inner = problem.inner();
    let dynamics = problem.dynamics();
    let train = problem.train();
    let val = problem.val();
    let w_t = &trajectory.final_state().params;

    let f_value = problem.outer().value(w_t, hyper, val);
    let mut grad = problem.outer().grad_hyper(w_t, hyper, val);
    let mut alpha = pad_to_state(problem.outer().grad_w(w_t, hyper, val), problem.state_dim());

    for t in (1..=trajectory.horizon()).rev() {
        let data = trajectory.slices[t - 1].apply(train);
        let prev = &trajectory.states[t - 1];
        grad += dynamics.vjp_hyper(inner, prev, hyper, &data, &alpha);
        alpha = dynamics.vjp_state(inner, prev, hyper, &data, &alpha);
    }
    if !trajectory.warm_started {
        let d = problem.param_dim();
        grad += problem.init().vjp(hyper, &alpha.rows(0, d).into_owned());
    }

    Ok(HypergradResult {
        f_value,
        grad,
        mode: Mode::Reverse,
        final_state: trajectory.final_state().clone(),
        diagnostics: Diagnostics {
            inner_losses: trajectory.inner_losses.clone(),
            wall_time: started.elapsed(),
        },
    })
}

/// Convenience: unroll then run the reverse sweep.
pub fn reverse_from<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
) -> Result<HypergradResult> {
    let started = Instant::now();
    let traj = unroll(problem, hyper, warm)?;
    let mut result = reverse_hypergrad(problem, &traj)?;
    result.diagnostics.wall_time = started.elapsed();
    Ok(result)
}

/// Forward-mode hypergradient along every coordinate of λ.
pub fn forward_hypergrad<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
) -> Result<HypergradResult> {
    let identity = DMatrix::<f64>::identity(hyper.len(), hyper.len());
    forward_directional(problem, hyper, warm, &identity)
}

/// Forward-mode directional derivatives: column `j` of `directions` is a
/// tangent `dλ_j` and entry `j` of the result is `∇f_T · dλ_j`.
pub fn forward_directional<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    warm: Option<&WarmStartState>,
    directions: &DMatrix<f64>,
) -> Result<HypergradResult> {
    let started = Instant::now();
    problem.check_hyper(hyper)?;
    if directions.nrows() != hyper.len() {
        return Err(Error::DimensionMismatch {
            left: "hyperparameters".into(),
            left_dim: hyper.len(),
            right: "tangent directions".into(),
            right_dim: directions.nrows(),
        });
    }
    let (mut state, warm_started) = start_state(problem, hyper, warm)?;
    let d = problem.param_dim();
    let s = problem.state_dim();
    let dirs: Vec<Vector> = directions.column_iter().map(|c| c.into_owned()).collect();

    let mut tangents: Vec<Vector> = dirs
        .iter()
        .map(|dl| {
            if warm_started {
                Vector::zeros(s)
            } else {
                pad_to_state(problem.init().jvp(hyper, dl), s)
            }
        })
        .collect();

    let inner = problem.inner();
    let dynamics = problem.dynamics();
    let train = problem.train();
    let mut inner_losses = Vec::with_capacity(problem.horizon() + 1);
    inner_losses.push(inner.value(&state.params, hyper, train));

    for t in 1..=problem.horizon() {
        let slice = problem.schedule().slice_for_step(t, train.len());
        let data = slice.apply(train);
        let data: &D = &data;
        tangents = tangents
            .par_iter()
            .zip(dirs.par_iter())
            .map(|(z, dl)| dynamics.jvp(inner, &state, hyper, data, z, dl))
            .collect();
        state = checked_step(problem, &state, hyper, data, t)?;
        inner_losses.push(inner.value(&state.params, hyper, train));
    }

    let val = problem.val();
    let w_t = &state.params;
    let f_value = problem.outer().value(w_t, hyper, val);
    let gw = problem.outer().grad_w(w_t, hyper, val);
    let gl = problem.outer().grad_hyper(w_t, hyper, val);
    let grad = Vector::from_iterator(
        dirs.len(),
        tangents
            .iter()
            .zip(&dirs)
            .map(|(z, dl)| z.rows(0, d).dot(&gw) + dl.dot(&gl)),
    );

    Ok(HypergradResult {
        f_value,
        grad,
        mode: Mode::Forward,
        final_state: state,
        diagnostics: Diagnostics {
            inner_losses,
            wall_time: started.elapsed(),
        },
    })
}

/// Default central-difference step for coordinate value `x`.
pub fn default_fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.abs())
}

/// Central differences of `f_T` along every coordinate. `epsilon`, when given,
/// replaces the default relative step `ε_mach^{1/3}·(1+|λ_k|)`.
pub fn fd_hypergrad<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    epsilon: Option<f64>,
) -> Result<HypergradResult> {
    let started = Instant::now();
    let traj = unroll(problem, hyper, None)?;
    let f0 = problem
        .outer()
        .value(&traj.final_state().params, hyper, problem.val());
    let values = hyper.values();
    let mut grad = Vector::zeros(hyper.len());
    for k in 0..hyper.len() {
        let eps = epsilon.unwrap_or_else(|| default_fd_step(values[k]));
        if values[k] - eps < hyper.lower()[k] || values[k] + eps > hyper.upper()[k] {
            return Err(Error::BoundaryTooClose {
                coordinate: k,
                epsilon: eps,
            });
        }
        let mut plus = values.clone();
        plus[k] += eps;
        let mut minus = values.clone();
        minus[k] -= eps;
        let fp = f_value(problem, &hyper.with_values(plus)?, None)?;
        let fm = f_value(problem, &hyper.with_values(minus)?, None)?;
        grad[k] = (fp - fm) / (2.0 * eps);
    }
    Ok(HypergradResult {
        f_value: f0,
        grad,
        mode: Mode::FiniteDiff,
        final_state: traj.final_state().clone(),
        diagnostics: Diagnostics {
            inner_losses: traj.inner_losses.clone(),
            wall_time: started.elapsed(),
        },
    })
}

/// Dispatch on `mode`.
pub fn hypergrad<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    mode: Mode,
    warm: Option<&WarmStartState>,
) -> Result<HypergradResult> {
    match mode {
        Mode::Reverse => reverse_from(problem, hyper, warm),
        Mode::Forward => forward_hypergrad(problem, hyper, warm),
        Mode::FiniteDiff => {
            if warm.and_then(WarmStartState::carried).is_some() {
                return Err(Error::Config(
                    "finite differences do not support warm restarts".into(),
                ));
            }
            fd_hypergrad(problem, hyper, None)
        }
    }
}

/// `‖a − b‖∞ / (‖a‖∞ + 1e-12)`
pub fn relative_inf_error(reference: &Vector, other: &Vector) -> f64 {
    let diff = (reference - other).amax();
    diff / (reference.amax() + 1e-12)
}
