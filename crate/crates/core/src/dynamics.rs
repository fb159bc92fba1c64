//! Concrete inner step maps and initialization maps.
//!
//! Every dynamics here is a first-order method driven by the inner gradient,
//! so its Jacobian products reduce to Hessian-vector and cross-derivative
//! products supplied by the inner objective.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Dynamics, HyperVector, InitMap, InnerObjective, InnerState, Vector};

fn finite_grad(g: Vector) -> Result<Vector> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(g)
    } else {
        Err(Error::NonFiniteGradient)
    }
}

/// Plain gradient descent with a fixed step: `w' = w − η ∇_w L_λ(w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDescent {
    eta: f64,
}

impl GradientDescent {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Config(format!("step size must be finite and positive, got {eta}")));
        }
        Ok(Self { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

impl<D> Dynamics<D> for GradientDescent {
    fn name(&self) -> &str {
        "gd"
    }

    fn aux_dim(&self, _param_dim: usize) -> usize {
        0
    }

    fn step(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
    ) -> Result<InnerState> {
        let g = finite_grad(inner.grad(&state.params, hyper, data))?;
        Ok(InnerState::new(
            &state.params - g * self.eta,
            Vector::zeros(0),
        ))
    }

    fn vjp_state(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        v - inner.hvp(&state.params, hyper, data, v) * self.eta
    }

    fn vjp_hyper(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        inner.cross_vjp(&state.params, hyper, data, v) * (-self.eta)
    }

    fn jvp(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        z: &Vector,
        dhyper: &Vector,
    ) -> Vector {
        let hz = inner.hvp(&state.params, hyper, data, z);
        let cd = inner.cross_jvp(&state.params, hyper, data, dhyper);
        z - (hz + cd) * self.eta
    }

    fn step_size(&self, _hyper: &HyperVector) -> Option<f64> {
        Some(self.eta)
    }
}

/// Gradient descent whose step size is itself a hyperparameter, stored in
/// log-domain: `η = exp(θ)` with θ the single entry of segment `lr_segment`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedRateDescent {
    lr_segment: String,
    lr_index: usize,
}

impl LearnedRateDescent {
    pub fn new(template: &HyperVector, lr_segment: &str) -> Result<Self> {
        let seg = template
            .segment(lr_segment)
            .ok_or_else(|| Error::Layout(format!("no learning-rate segment `{lr_segment}`")))?;
        if seg.len != 1 {
            return Err(Error::Layout(format!(
                "learning-rate segment `{lr_segment}` must have length 1, has {}",
                seg.len
            )));
        }
        Ok(Self {
            lr_segment: lr_segment.to_string(),
            lr_index: seg.offset,
        })
    }

    fn eta(&self, hyper: &HyperVector) -> f64 {
        hyper.values()[self.lr_index].exp()
    }
}

impl<D> Dynamics<D> for LearnedRateDescent {
    fn name(&self) -> &str {
        "hyper-lr"
    }

    fn aux_dim(&self, _param_dim: usize) -> usize {
        0
    }

    fn check_layout(&self, template: &HyperVector) -> Result<()> {
        match template.segment(&self.lr_segment) {
            Some(seg) if seg.offset == self.lr_index && seg.len == 1 => Ok(()),
            _ => Err(Error::Layout(format!(
                "learning-rate segment `{}` not found at coordinate {}",
                self.lr_segment, self.lr_index
            ))),
        }
    }

    fn step(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
    ) -> Result<InnerState> {
        let g = finite_grad(inner.grad(&state.params, hyper, data))?;
        Ok(InnerState::new(
            &state.params - g * self.eta(hyper),
            Vector::zeros(0),
        ))
    }

    fn vjp_state(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        v - inner.hvp(&state.params, hyper, data, v) * self.eta(hyper)
    }

    fn vjp_hyper(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        let eta = self.eta(hyper);
        let mut out = inner.cross_vjp(&state.params, hyper, data, v) * (-eta);
        // ∂Φ/∂θ = −exp(θ) ∇_w L
        let g = inner.grad(&state.params, hyper, data);
        out[self.lr_index] -= eta * g.dot(v);
        out
    }

    fn jvp(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        z: &Vector,
        dhyper: &Vector,
    ) -> Vector {
        let eta = self.eta(hyper);
        let hz = inner.hvp(&state.params, hyper, data, z);
        let cd = inner.cross_jvp(&state.params, hyper, data, dhyper);
        let mut out = z - (hz + cd) * eta;
        let dtheta = dhyper[self.lr_index];
        if dtheta != 0.0 {
            let g = inner.grad(&state.params, hyper, data);
            out -= g * (eta * dtheta);
        }
        out
    }

    fn step_size(&self, hyper: &HyperVector) -> Option<f64> {
        Some(self.eta(hyper))
    }
}

/// Heavy-ball momentum. The velocity is carried as auxiliary state:
/// `v' = μ v + ∇_w L_λ(w)`, `w' = w − η v'`.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    eta: f64,
    mu: f64,
}

impl Momentum {
    pub fn new(eta: f64, mu: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Config(format!("step size must be finite and positive, got {eta}")));
        }
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {mu}")));
        }
        Ok(Self { eta, mu })
    }
}

impl<D> Dynamics<D> for Momentum {
    fn name(&self) -> &str {
        "momentum"
    }

    fn aux_dim(&self, param_dim: usize) -> usize {
        param_dim
    }

    fn step(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
    ) -> Result<InnerState> {
        let g = finite_grad(inner.grad(&state.params, hyper, data))?;
        let velocity = &state.aux * self.mu + g;
        let params = &state.params - &velocity * self.eta;
        Ok(InnerState::new(params, velocity))
    }

    fn vjp_state(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        let d = state.params.len();
        let a_w = v.rows(0, d);
        let a_v = v.rows(d, d);
        // both outputs flow through the new velocity
        let through_velocity: Vector = a_v - a_w * self.eta;
        let h = inner.hvp(&state.params, hyper, data, &through_velocity);
        let mut out = Vector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&(a_w + h));
        out.rows_mut(d, d).copy_from(&(&through_velocity * self.mu));
        out
    }

    fn vjp_hyper(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector {
        let d = state.params.len();
        let through_velocity: Vector = v.rows(d, d) - v.rows(0, d) * self.eta;
        inner.cross_vjp(&state.params, hyper, data, &through_velocity)
    }

    fn jvp(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        z: &Vector,
        dhyper: &Vector,
    ) -> Vector {
        let d = state.params.len();
        let z_w: Vector = z.rows(0, d).into_owned();
        let z_v = z.rows(d, d);
        let dg = inner.hvp(&state.params, hyper, data, &z_w)
            + inner.cross_jvp(&state.params, hyper, data, dhyper);
        let dv: Vector = z_v * self.mu + dg;
        let mut out = Vector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&(&z_w - &dv * self.eta));
        out.rows_mut(d, d).copy_from(&dv);
        out
    }

    fn step_size(&self, _hyper: &HyperVector) -> Option<f64> {
        Some(self.eta)
    }
}

/// Serializable choice of dynamics, resolved against a problem layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DynamicsSpec {
    Gd { eta: f64 },
    /// Step size learned in log-domain; `eta` is the initial value.
    HyperLr { eta: f64 },
    Momentum { eta: f64, mu: f64 },
}

/// Segment name under which problems place a learned step size.
pub const LR_SEGMENT: &str = "lr";

impl DynamicsSpec {
    /// Whether the hyperparameter layout needs an `lr` segment.
    pub fn learns_rate(&self) -> bool {
        matches!(self, DynamicsSpec::HyperLr { .. })
    }

    pub fn initial_log_rate(&self) -> Option<f64> {
        match *self {
            DynamicsSpec::HyperLr { eta } => Some(eta.ln()),
            _ => None,
        }
    }

    pub fn build<D: Dataset + 'static>(&self, template: &HyperVector) -> Result<Arc<dyn Dynamics<D>>> {
        Ok(match *self {
            DynamicsSpec::Gd { eta } => Arc::new(GradientDescent::new(eta)?),
            DynamicsSpec::HyperLr { eta } => {
                if !(eta.is_finite() && eta > 0.0) {
                    return Err(Error::Config(format!(
                        "initial step size must be finite and positive, got {eta}"
                    )));
                }
                Arc::new(LearnedRateDescent::new(template, LR_SEGMENT)?)
            }
            DynamicsSpec::Momentum { eta, mu } => Arc::new(Momentum::new(eta, mu)?),
        })
    }
}

/// `Φ_0(λ) = 0`.
#[derive(Clone, Debug)]
pub struct ZeroInit {
    param_dim: usize,
    hyper_dim: usize,
}

impl ZeroInit {
    pub fn new(param_dim: usize, hyper_dim: usize) -> Self {
        Self { param_dim, hyper_dim }
    }
}

impl InitMap for ZeroInit {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn params(&self, _hyper: &HyperVector) -> Vector {
        Vector::zeros(self.param_dim)
    }

    fn vjp(&self, _hyper: &HyperVector, _v: &Vector) -> Vector {
        Vector::zeros(self.hyper_dim)
    }

    fn jvp(&self, _hyper: &HyperVector, _dhyper: &Vector) -> Vector {
        Vector::zeros(self.param_dim)
    }
}

/// A fixed starting point independent of λ: seeded Gaussian draws, or any
/// caller-supplied vector.
#[derive(Clone, Debug)]
pub struct ConstantInit {
    params: Vector,
    hyper_dim: usize,
}

impl ConstantInit {
    pub fn new(params: Vector, hyper_dim: usize) -> Self {
        Self { params, hyper_dim }
    }

    pub fn gaussian(param_dim: usize, hyper_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("scale must be finite and non-negative");
        let params = Vector::from_fn(param_dim, |_, _| normal.sample(&mut rng));
        Self::new(params, hyper_dim)
    }
}

impl InitMap for ConstantInit {
    fn param_dim(&self) -> usize {
        self.params.len()
    }

    fn params(&self, _hyper: &HyperVector) -> Vector {
        self.params.clone()
    }

    fn vjp(&self, _hyper: &HyperVector, _v: &Vector) -> Vector {
        Vector::zeros(self.hyper_dim)
    }

    fn jvp(&self, _hyper: &HyperVector, _dhyper: &Vector) -> Vector {
        Vector::zeros(self.params.len())
    }
}

/// `Φ_0(λ) = λ[segment]`: the initial parameters are read off a segment.
#[derive(Clone, Debug)]
pub struct SegmentInit {
    offset: usize,
    len: usize,
    hyper_dim: usize,
}

impl SegmentInit {
    pub fn new(template: &HyperVector, segment: &str) -> Result<Self> {
        let seg = template
            .segment(segment)
            .ok_or_else(|| Error::Layout(format!("no segment `{segment}`")))?;
        Ok(Self {
            offset: seg.offset,
            len: seg.len,
            hyper_dim: template.len(),
        })
    }
}

impl InitMap for SegmentInit {
    fn param_dim(&self) -> usize {
        self.len
    }

    fn params(&self, hyper: &HyperVector) -> Vector {
        hyper.values().rows(self.offset, self.len).into_owned()
    }

    fn vjp(&self, _hyper: &HyperVector, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.hyper_dim);
        out.rows_mut(self.offset, self.len).copy_from(&v.rows(0, self.len));
        out
    }

    fn jvp(&self, _hyper: &HyperVector, dhyper: &Vector) -> Vector {
        dhyper.rows(self.offset, self.len).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::{reverse_from, unroll};
    use crate::model::{assemble_problem, check_transpose_consistency, NoData, Splits};
    use crate::oracle::{exact_minimizer, QuadraticInner};
    use crate::problems::quadratic::{scalar_toy, QuadraticObjective, QuadraticOuter};
    use crate::problems::ridge::{ridge_problem, ridge_quadratic, RidgeSpec};
    use crate::problems::synthetic::{regression, RegressionParams};
    use nalgebra::DMatrix;

    fn ridge(dynamics: DynamicsSpec, horizon: usize) -> crate::model::BilevelProblem<crate::problems::RegressionData> {
        let (train, val) = regression(
            &RegressionParams {
                n_train: 20,
                n_val: 15,
                features: 4,
                noise: 0.3,
            },
            4,
        )
        .unwrap();
        ridge_problem(
            train,
            val,
            &RidgeSpec {
                reg: 0.5,
                dynamics,
                horizon,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let gd = ridge(DynamicsSpec::Gd { eta: 0.01 }, 15);
        let hb = ridge(DynamicsSpec::Momentum { eta: 0.01, mu: 0.0 }, 15);
        let a = unroll(&gd, gd.template(), None).unwrap();
        let b = unroll(&hb, hb.template(), None).unwrap();
        for (x, y) in a.states().iter().zip(b.states()) {
            assert_eq!(x.params, y.params);
        }
    }

    #[test]
    fn learned_rate_at_log_eta_matches_fixed_rate() {
        let eta = 0.01;
        let gd = ridge(DynamicsSpec::Gd { eta }, 15);
        let lr = ridge(DynamicsSpec::HyperLr { eta }, 15);
        let a = unroll(&gd, gd.template(), None).unwrap();
        let b = unroll(&lr, lr.template(), None).unwrap();
        assert!((&a.final_state().params - &b.final_state().params).amax() < 1e-12);
        let ga = reverse_from(&gd, gd.template(), None).unwrap().grad;
        let gb = reverse_from(&lr, lr.template(), None).unwrap().grad;
        assert!((ga[0] - gb[0]).abs() < 1e-12 * (1.0 + ga[0].abs()));
    }

    #[test]
    fn momentum_matches_hand_rolled_recursion() {
        let (lambda, eta, mu) = (2.0, 0.3, 0.6);
        let p = scalar_toy(lambda, &DynamicsSpec::Momentum { eta, mu }, 3).unwrap();
        let traj = unroll(&p, p.template(), None).unwrap();
        let (mut w, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=3 {
            v = mu * v + 2.0 * (w - lambda);
            w -= eta * v;
            assert!((traj.states()[t].params[0] - w).abs() < 1e-15);
            assert!((traj.states()[t].aux[0] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn gd_distance_to_minimizer_decreases() {
        let p = ridge(DynamicsSpec::Gd { eta: 0.01 }, 100);
        let w_star = exact_minimizer(&ridge_quadratic(&p).unwrap(), p.template()).unwrap();
        let traj = unroll(&p, p.template(), None).unwrap();
        let dist: Vec<f64> = traj.states().iter().map(|s| (&s.params - &w_star).norm()).collect();
        assert!(dist.windows(2).all(|w| w[1] < w[0]), "{dist:?}");
    }

    #[test]
    fn all_dynamics_transpose_consistent() {
        for spec in [
            DynamicsSpec::Gd { eta: 0.01 },
            DynamicsSpec::HyperLr { eta: 0.01 },
            DynamicsSpec::Momentum { eta: 0.01, mu: 0.8 },
        ] {
            let p = ridge(spec.clone(), 5);
            let rep = check_transpose_consistency(&p, p.template(), 20, 9);
            assert!(rep.pass, "{spec:?}: {rep:?}");
        }
    }

    #[test]
    fn segment_init_with_no_steps_passes_outer_gradient_through() {
        let template = HyperVector::builder().segment("w0", &[0.5, -1.0, 2.0]).build().unwrap();
        let q = QuadraticInner::new(
            DMatrix::identity(3, 3),
            Vec::new(),
            Vector::zeros(3),
            DMatrix::zeros(3, 3),
            &template,
        )
        .unwrap();
        let p_mat = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let q_vec = Vector::from_vec(vec![1.0, -1.0, 0.5]);
        let problem = assemble_problem(
            Arc::new(QuadraticObjective::new(Arc::new(q))),
            Arc::new(QuadraticOuter::new(p_mat.clone(), q_vec.clone(), 0.0, 3)),
            DynamicsSpec::Gd { eta: 0.1 }.build::<NoData>(&template).unwrap(),
            Arc::new(SegmentInit::new(&template, "w0").unwrap()),
            0,
            Splits::new(NoData, NoData),
            template.clone(),
        )
        .unwrap();
        let g = reverse_from(&problem, &template, None).unwrap().grad;
        assert_eq!(g, &p_mat * template.values() + q_vec);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(GradientDescent::new(0.0).is_err());
        assert!(GradientDescent::new(f64::NAN).is_err());
        assert!(Momentum::new(0.1, 1.0).is_err());
        assert!(Momentum::new(0.1, -0.1).is_err());
        let t = HyperVector::builder().segment("a", &[1.0]).build().unwrap();
        assert!(LearnedRateDescent::new(&t, LR_SEGMENT).is_err());
    }
}
