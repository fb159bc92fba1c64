//! Projected gradient descent on `f_T` over the hyperparameter box.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypergrad::{hypergrad, Mode, WarmStartState};
use crate::model::{BilevelProblem, Dataset, HyperVector, Vector};
use crate::problems::hyperrepr::{sample_meta_batch, MetaProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterConfig {
    /// Constant step `β`.
    pub step_size: f64,
    pub max_steps: usize,
    pub mode: Mode,
    pub warm_restart: bool,
    /// Episodes per outer step; `None` uses every episode.
    pub meta_batch: Option<usize>,
    /// Stop once `‖λ − Π(λ − β∇f_T)‖∞ / β` falls to this value.
    pub tolerance: f64,
    pub seed: u64,
    pub divergence_window: usize,
    pub divergence_factor: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_steps: 100,
            mode: Mode::Reverse,
            warm_restart: false,
            meta_batch: None,
            tolerance: 1e-6,
            seed: 0,
            divergence_window: 20,
            divergence_factor: 10.0,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("outer.step_size must be positive, got {}", self.step_size)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("outer.max_steps must be positive".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(format!("outer.tolerance must be ≥ 0, got {}", self.tolerance)));
        }
        if self.mode == Mode::FiniteDiff {
            return Err(Error::Config("outer.mode must be reverse or forward".into()));
        }
        if self.meta_batch == Some(0) {
            return Err(Error::Config("outer.meta_batch must be positive".into()));
        }
        if self.divergence_window == 0 || self.divergence_factor.is_nan() || self.divergence_factor <= 0.0 {
            return Err(Error::Config("divergence window and factor must be positive".into()));
        }
        Ok(())
    }
}

/// One hypergradient evaluation as seen by the outer loop.
#[derive(Clone, Debug)]
pub struct OuterEvaluation {
    pub f_value: f64,
    pub grad: Vector,
    pub inner_final_loss: f64,
}

/// Anything the outer loop can descend on.
pub trait OuterTarget {
    fn evaluate(
        &self,
        hyper: &HyperVector,
        config: &OuterConfig,
        step: usize,
        warm: &mut WarmStartState,
    ) -> Result<OuterEvaluation>;
}

impl<D: Dataset> OuterTarget for BilevelProblem<D> {
    fn evaluate(
        &self,
        hyper: &HyperVector,
        config: &OuterConfig,
        _step: usize,
        warm: &mut WarmStartState,
    ) -> Result<OuterEvaluation> {
        let res = hypergrad(self, hyper, config.mode, Some(warm))?;
        let inner_final_loss = res.inner_final_loss();
        warm.update(res.final_state);
        Ok(OuterEvaluation {
            f_value: res.f_value,
            grad: res.grad,
            inner_final_loss,
        })
    }
}

/// Seed of the meta-batch drawn at outer step `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng.next_u64()
}

impl OuterTarget for MetaProblem {
    fn evaluate(
        &self,
        hyper: &HyperVector,
        config: &OuterConfig,
        step: usize,
        warm: &mut WarmStartState,
    ) -> Result<OuterEvaluation> {
        if warm.enabled {
            return Err(Error::Config(
                "warm restarts are not available for episode-local heads".into(),
            ));
        }
        let res = match config.meta_batch {
            Some(b) => {
                let batch = sample_meta_batch(self.meta(), b, batch_seed(config.seed, step))?;
                self.hypergrad_batch(hyper, &batch, config.mode)?
            }
            None => self.hypergrad_full(hyper, config.mode)?,
        };
        Ok(OuterEvaluation {
            f_value: res.f_value,
            grad: res.grad,
            inner_final_loss: res.inner_final_loss,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OuterRecord {
    pub step: usize,
    pub f_value: f64,
    pub hypergrad_inf_norm: f64,
    /// Projected-gradient residual `‖λ − Π(λ − β∇f_T)‖∞ / β`.
    pub residual: f64,
    pub inner_final_loss: f64,
    pub lambda_hash: String,
    /// λ at which this step's hypergradient was taken.
    #[serde(skip)]
    pub hyper: Vector,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OuterTrace {
    pub records: Vec<OuterRecord>,
    pub stop_reason: StopReason,
}

/// SHA-256 over the little-endian bytes of `values`, first 16 hex digits.
pub fn lambda_hash(values: &Vector) -> String {
    let mut h = Sha256::new();
    for v in values.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl OuterTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn f_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.f_value).collect()
    }

    /// `step,f_value,hypergrad_inf_norm,inner_final_loss,lambda_hash`
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "step,f_value,hypergrad_inf_norm,inner_final_loss,lambda_hash").unwrap();
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{}",
                r.step, r.f_value, r.hypergrad_inf_norm, r.inner_final_loss, r.lambda_hash
            )
            .unwrap();
        }
        out
    }

    /// `step,wall_ms`
    pub fn timing_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "step,wall_ms").unwrap();
        for r in &self.records {
            writeln!(out, "{},{:.3}", r.step, r.wall_ms).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::experiment::output::write_atomic(path, &self.to_csv())
    }
}

#[derive(Clone, Debug)]
pub struct OuterOutcome {
    pub hyper: HyperVector,
    pub trace: OuterTrace,
}

/// `λ_{s+1} = Π(λ_s − β∇f_T(λ_s))` until the projected residual drops to the
/// tolerance or `max_steps` is reached.
pub fn run_outer<P: OuterTarget + ?Sized>(
    problem: &P,
    config: &OuterConfig,
    start: &HyperVector,
) -> Result<OuterOutcome> {
    config.validate()?;
    start.check_feasible()?;
    let mut warm = if config.warm_restart {
        WarmStartState::enabled()
    } else {
        WarmStartState::disabled()
    };
    let beta = config.step_size;
    let mut hyper = start.clone();
    let mut records = Vec::with_capacity(config.max_steps);
    let mut f_initial = None;
    let mut run_above = 0;
    let mut stop_reason = StopReason::MaxSteps;
    for step in 0..config.max_steps {
        let started = Instant::now();
        let eval = problem.evaluate(&hyper, config, step, &mut warm)?;
        if !eval.f_value.is_finite() {
            return Err(Error::DivergenceDetected {
                step,
                value: eval.f_value,
            });
        }
        let f0: f64 = *f_initial.get_or_insert(eval.f_value);
        if eval.f_value - f0 > config.divergence_factor * f0.abs() {
            run_above += 1;
            if run_above >= config.divergence_window {
                return Err(Error::DivergenceDetected {
                    step,
                    value: eval.f_value,
                });
            }
        } else {
            run_above = 0;
        }
        let next = hyper
            .with_values(hyper.values() - &eval.grad * beta)
            .map(|h| h.project_box())?;
        let residual = (hyper.values() - next.values()).amax() / beta;
        records.push(OuterRecord {
            step,
            f_value: eval.f_value,
            hypergrad_inf_norm: eval.grad.amax(),
            residual,
            inner_final_loss: eval.inner_final_loss,
            lambda_hash: lambda_hash(hyper.values()),
            hyper: hyper.values().clone(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        log::debug!("outer step {step}: f = {:e}, residual = {residual:e}", eval.f_value);
        if residual <= config.tolerance {
            stop_reason = StopReason::Converged;
            break;
        }
        hyper = next;
    }
    Ok(OuterOutcome {
        hyper,
        trace: OuterTrace {
            records,
            stop_reason,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsSpec;
    use crate::problems::quadratic::scalar_toy;

    fn toy() -> BilevelProblem<crate::model::NoData> {
        scalar_toy(3.0, &DynamicsSpec::Gd { eta: 0.5 }, 1).unwrap()
    }

    #[test]
    fn parabola_iterates_halve_the_distance() {
        let p = toy();
        let cfg = OuterConfig {
            step_size: 0.25,
            max_steps: 4,
            ..Default::default()
        };
        let out = run_outer(&p, &cfg, p.template()).unwrap();
        let xs: Vec<f64> = out.trace.records.iter().map(|r| r.hyper[0]).collect();
        assert_eq!(xs, vec![3.0, 2.0, 1.5, 1.25]);
        assert_eq!(out.hyper.values()[0], 1.125);
        assert_eq!(out.trace.stop_reason, StopReason::MaxSteps);
    }

    #[test]
    fn stationary_start_stops_after_one_step() {
        let p = scalar_toy(1.0, &DynamicsSpec::Gd { eta: 0.5 }, 1).unwrap();
        let out = run_outer(&p, &OuterConfig::default(), p.template()).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace.stop_reason, StopReason::Converged);
        assert_eq!(out.hyper, *p.template());
    }

    #[test]
    fn reverse_and_forward_traces_agree() {
        let p = toy();
        let mut cfg = OuterConfig {
            step_size: 0.1,
            max_steps: 30,
            ..Default::default()
        };
        let a = run_outer(&p, &cfg, p.template()).unwrap();
        cfg.mode = Mode::Forward;
        let b = run_outer(&p, &cfg, p.template()).unwrap();
        for (x, y) in a.trace.f_values().iter().zip(b.trace.f_values()) {
            assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let p = toy();
        let cfg = OuterConfig {
            max_steps: 10,
            ..Default::default()
        };
        let a = run_outer(&p, &cfg, p.template()).unwrap();
        let b = run_outer(&p, &cfg, p.template()).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }

    #[test]
    fn divergence_is_detected() {
        // f₁(λ) = (λ − 1)², β = 1.5 overshoots with growing amplitude
        let p = scalar_toy(1.5, &DynamicsSpec::Gd { eta: 0.5 }, 1).unwrap();
        let cfg = OuterConfig {
            step_size: 1.5,
            max_steps: 200,
            ..Default::default()
        };
        let err = run_outer(&p, &cfg, p.template()).unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { .. }), "{err:?}");
    }

    #[test]
    fn bad_configs_rejected() {
        let p = toy();
        for cfg in [
            OuterConfig {
                step_size: 0.0,
                ..Default::default()
            },
            OuterConfig {
                max_steps: 0,
                ..Default::default()
            },
            OuterConfig {
                mode: Mode::FiniteDiff,
                ..Default::default()
            },
        ] {
            assert!(matches!(run_outer(&p, &cfg, p.template()), Err(Error::Config(_))));
        }
    }

    #[test]
    fn hash_tracks_values() {
        let a = lambda_hash(&Vector::from_vec(vec![1.0, 2.0]));
        assert_eq!(a.len(), 16);
        assert_eq!(a, lambda_hash(&Vector::from_vec(vec![1.0, 2.0])));
        assert_ne!(a, lambda_hash(&Vector::from_vec(vec![1.0, 2.000001])));
    }
}
