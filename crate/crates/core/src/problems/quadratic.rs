//! Quadratic bilevel problems with every derivative in closed form: the scalar
//! toy `L = (w − λ)²`, the one-dimensional learnable-step-size problem, and
//! general instances backed by [`QuadraticInner`].

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dynamics::{DynamicsSpec, ZeroInit, LR_SEGMENT};
use crate::error::{Error, Result};
use crate::model::{
    assemble_problem, BilevelProblem, HyperVector, InnerObjective, NoData, OuterObjective, Splits,
    Vector,
};
use crate::oracle::QuadraticInner;

/// `L_λ(w) = wᵀA(λ)w − 2b(λ)ᵀw` as an inner objective.
pub struct QuadraticObjective {
    q: Arc<QuadraticInner>,
}

impl QuadraticObjective {
    pub fn new(q: Arc<QuadraticInner>) -> Self {
        Self { q }
    }
}

impl InnerObjective<NoData> for QuadraticObjective {
    fn param_dim(&self) -> usize {
        self.q.dim()
    }

    fn hyper_dim(&self) -> usize {
        self.q.hyper_dim()
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, _data: &NoData) -> f64 {
        w.dot(&(self.q.matrix(hyper) * w)) - 2.0 * self.q.rhs(hyper).dot(w)
    }

    fn grad(&self, w: &Vector, hyper: &HyperVector, _data: &NoData) -> Vector {
        (self.q.matrix(hyper) * w - self.q.rhs(hyper)) * 2.0
    }

    fn hvp(&self, _w: &Vector, hyper: &HyperVector, _data: &NoData, v: &Vector) -> Vector {
        self.q.matrix(hyper) * v * 2.0
    }

    fn cross_vjp(&self, w: &Vector, _hyper: &HyperVector, _data: &NoData, v: &Vector) -> Vector {
        let mut out = self.q.hyper_map().transpose() * v * (-2.0);
        for (k, a_k) in self.q.hyper_terms() {
            out[*k] += 2.0 * v.dot(&(a_k * w));
        }
        out
    }

    fn cross_jvp(&self, w: &Vector, _hyper: &HyperVector, _data: &NoData, dhyper: &Vector) -> Vector {
        let mut out = self.q.hyper_map() * dhyper * (-2.0);
        for (k, a_k) in self.q.hyper_terms() {
            out += a_k * w * (2.0 * dhyper[*k]);
        }
        out
    }
}

/// `E(w, λ) = ½wᵀPw + qᵀw + r + ½Σ_k c_k λ_k²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticOuter {
    pub p: DMatrix<f64>,
    pub q: Vector,
    pub r: f64,
    pub hyper_curvature: Vector,
}

impl QuadraticOuter {
    pub fn new(p: DMatrix<f64>, q: Vector, r: f64, hyper_dim: usize) -> Self {
        Self {
            p,
            q,
            r,
            hyper_curvature: Vector::zeros(hyper_dim),
        }
    }

    pub fn with_hyper_curvature(mut self, c: Vector) -> Self {
        self.hyper_curvature = c;
        self
    }
}

impl<D> OuterObjective<D> for QuadraticOuter {
    fn param_dim(&self) -> usize {
        self.q.len()
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_curvature.len()
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, _data: &D) -> f64 {
        let l = hyper.values();
        0.5 * w.dot(&(&self.p * w))
            + self.q.dot(w)
            + self.r
            + 0.5 * l.component_mul(l).dot(&self.hyper_curvature)
    }

    fn grad_w(&self, w: &Vector, _hyper: &HyperVector, _data: &D) -> Vector {
        &self.p * w + &self.q
    }

    fn grad_hyper(&self, _w: &Vector, hyper: &HyperVector, _data: &D) -> Vector {
        hyper.values().component_mul(&self.hyper_curvature)
    }
}

/// Assembles a quadratic problem with zero initialization.
pub fn quadratic_problem(
    q: QuadraticInner,
    outer: QuadraticOuter,
    dynamics: &DynamicsSpec,
    template: HyperVector,
    horizon: usize,
) -> Result<BilevelProblem<NoData>> {
    let d = q.dim();
    let m = template.len();
    let dynamics = dynamics.build::<NoData>(&template)?;
    assemble_problem(
        Arc::new(QuadraticObjective::new(Arc::new(q))),
        Arc::new(outer),
        dynamics,
        Arc::new(ZeroInit::new(d, m)),
        horizon,
        Splits::new(NoData, NoData),
        template,
    )
}

/// `L_λ(w) = (w − λ)²`, `E(w) = (w − 1)²`, `w₀ = 0`.
pub fn scalar_toy(lambda: f64, dynamics: &DynamicsSpec, horizon: usize) -> Result<BilevelProblem<NoData>> {
    let mut builder = HyperVector::builder().segment("lambda", &[lambda]);
    if let Some(theta) = dynamics.initial_log_rate() {
        builder = builder.segment(LR_SEGMENT, &[theta]);
    }
    let template = builder.build()?;
    let m = template.len();
    let mut b_map = DMatrix::zeros(1, m);
    b_map[(0, 0)] = 1.0;
    let q = QuadraticInner::new(
        DMatrix::from_element(1, 1, 1.0),
        Vec::new(),
        Vector::zeros(1),
        b_map,
        &template,
    )?;
    let outer = QuadraticOuter::new(
        DMatrix::from_element(1, 1, 2.0),
        Vector::from_element(1, -2.0),
        1.0,
        m,
    );
    quadratic_problem(q, outer, dynamics, template, horizon)
}

/// One-dimensional `L(w) = (a/2)w² + c·w` with the step size as the only
/// hyperparameter (log-domain, segment `lr`), and outer objective `E = L`.
/// With `T = 1` and `w₀ = 0`, `f₁(η) = (a/2)η²c² − ηc²`, minimized at `η = 1/a`.
pub fn learned_rate_problem(a: f64, c: f64, eta0: f64, horizon: usize) -> Result<BilevelProblem<NoData>> {
    if a.is_nan() || a <= 0.0 {
        return Err(Error::BadParams(format!("curvature must be positive, got {a}")));
    }
    let spec = DynamicsSpec::HyperLr { eta: eta0 };
    let template = HyperVector::builder()
        .segment(LR_SEGMENT, &[eta0.ln()])
        .build()?;
    let q = QuadraticInner::new(
        DMatrix::from_element(1, 1, a / 2.0),
        Vec::new(),
        Vector::from_element(1, -c / 2.0),
        DMatrix::zeros(1, 1),
        &template,
    )?;
    let outer = QuadraticOuter::new(DMatrix::from_element(1, 1, a), Vector::from_element(1, c), 0.0, 1);
    quadratic_problem(q, outer, &spec, template, horizon)
}
