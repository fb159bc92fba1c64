//! Ridge regression with the penalty strength as hyperparameter:
//! inner `‖X_tr w − y_tr‖² + λ‖w‖²`, outer mean squared validation error.

use std::sync::Arc;

use crate::dynamics::{DynamicsSpec, ZeroInit, LR_SEGMENT};
use crate::error::Result;
use crate::model::{
    assemble_problem, BilevelProblem, HyperVector, InnerObjective, OuterObjective, Splits, Vector,
};
use crate::oracle::QuadraticInner;
use crate::problems::data::RegressionData;

pub const REG_SEGMENT: &str = "reg";
/// Lower bound of the penalty box; keeps the inner problem strongly convex.
pub const REG_LOWER: f64 = 1e-8;

pub struct RidgeInner {
    features: usize,
    reg_index: usize,
    hyper_dim: usize,
}

impl InnerObjective<RegressionData> for RidgeInner {
    fn param_dim(&self) -> usize {
        self.features
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_dim
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, data: &RegressionData) -> f64 {
        let r = &data.x * w - &data.y;
        r.norm_squared() + hyper.values()[self.reg_index] * w.norm_squared()
    }

    fn grad(&self, w: &Vector, hyper: &HyperVector, data: &RegressionData) -> Vector {
        let r = &data.x * w - &data.y;
        (data.x.tr_mul(&r) + w * hyper.values()[self.reg_index]) * 2.0
    }

    fn hvp(&self, _w: &Vector, hyper: &HyperVector, data: &RegressionData, v: &Vector) -> Vector {
        (data.x.tr_mul(&(&data.x * v)) + v * hyper.values()[self.reg_index]) * 2.0
    }

    fn cross_vjp(&self, w: &Vector, _hyper: &HyperVector, _data: &RegressionData, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.hyper_dim);
        out[self.reg_index] = 2.0 * w.dot(v);
        out
    }

    fn cross_jvp(&self, w: &Vector, _hyper: &HyperVector, _data: &RegressionData, dhyper: &Vector) -> Vector {
        w * (2.0 * dhyper[self.reg_index])
    }
}

/// `‖X_val w − y_val‖² / n_val`
pub struct ValidationMse {
    features: usize,
    hyper_dim: usize,
}

impl OuterObjective<RegressionData> for ValidationMse {
    fn param_dim(&self) -> usize {
        self.features
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_dim
    }

    fn value(&self, w: &Vector, _hyper: &HyperVector, data: &RegressionData) -> f64 {
        (&data.x * w - &data.y).norm_squared() / data.y.len() as f64
    }

    fn grad_w(&self, w: &Vector, _hyper: &HyperVector, data: &RegressionData) -> Vector {
        let r = &data.x * w - &data.y;
        data.x.tr_mul(&r) * (2.0 / data.y.len() as f64)
    }

    fn grad_hyper(&self, _w: &Vector, _hyper: &HyperVector, _data: &RegressionData) -> Vector {
        Vector::zeros(self.hyper_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSpec {
    pub reg: f64,
    pub dynamics: DynamicsSpec,
    pub horizon: usize,
}

/// Hyperparameter layout: `reg` in `[1e-8, ∞)`, plus `lr` for a learned step.
pub fn ridge_template(reg: f64, dynamics: &DynamicsSpec) -> Result<HyperVector> {
    let mut b = HyperVector::builder().bounded_segment(REG_SEGMENT, &[reg], REG_LOWER, f64::INFINITY);
    if let Some(theta) = dynamics.initial_log_rate() {
        b = b.segment(LR_SEGMENT, &[theta]);
    }
    b.build()
}

pub fn ridge_problem(
    train: RegressionData,
    val: RegressionData,
    spec: &RidgeSpec,
) -> Result<BilevelProblem<RegressionData>> {
    let template = ridge_template(spec.reg, &spec.dynamics)?;
    let d = train.features();
    let m = template.len();
    for j in 0..d {
        if train.x.column(j).iter().all(|&v| v == 0.0) {
            log::warn!("ridge training column {j} is identically zero; relying on the penalty");
        }
    }
    let reg_index = template.segment(REG_SEGMENT).map(|s| s.offset).unwrap_or(0);
    let dynamics = spec.dynamics.build::<RegressionData>(&template)?;
    assemble_problem(
        Arc::new(RidgeInner {
            features: d,
            reg_index,
            hyper_dim: m,
        }),
        Arc::new(ValidationMse {
            features: val.features(),
            hyper_dim: m,
        }),
        dynamics,
        Arc::new(ZeroInit::new(d, m)),
        spec.horizon,
        Splits::new(train, val),
        template,
    )
}

/// The closed-form view of a ridge problem's inner objective.
pub fn ridge_quadratic(problem: &BilevelProblem<RegressionData>) -> Result<QuadraticInner> {
    let train = problem.train();
    QuadraticInner::ridge(&train.x, &train.y, problem.template(), REG_SEGMENT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergrad::{f_value, unroll};
    use crate::oracle::exact_minimizer;
    use nalgebra::DMatrix;

    fn identity_instance(reg: f64, horizon: usize) -> BilevelProblem<RegressionData> {
        let train = RegressionData::new(DMatrix::identity(3, 3), Vector::from_element(3, 1.0)).unwrap();
        let val = RegressionData::new(DMatrix::identity(3, 3), Vector::from_element(3, 1.0)).unwrap();
        let spec = RidgeSpec {
            reg,
            dynamics: DynamicsSpec::Gd { eta: 0.2 },
            horizon,
        };
        ridge_problem(train, val, &spec).unwrap()
    }

    #[test]
    fn identity_design_minimizer_is_half() {
        let p = identity_instance(1.0, 200);
        let w_star = exact_minimizer(&ridge_quadratic(&p).unwrap(), p.template()).unwrap();
        assert!((w_star - Vector::from_element(3, 0.5)).amax() < 1e-15);
        let traj = unroll(&p, p.template(), None).unwrap();
        assert!((&traj.final_state().params - Vector::from_element(3, 0.5)).amax() < 1e-12);
    }

    #[test]
    fn heavy_penalty_shrinks_to_zero() {
        let p = identity_instance(1e6, 0);
        let q = ridge_quadratic(&p).unwrap();
        let w = exact_minimizer(&q, p.template()).unwrap();
        assert!(w.amax() < 1e-5);
        // T = 0 keeps w = 0, so E = ‖y_val‖²/n_val
        assert_eq!(f_value(&p, p.template(), None).unwrap(), 1.0);
    }

    #[test]
    fn gradient_matches_independent_formula() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3, 2.0, -1.0]);
        let y = Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let data = RegressionData::new(x.clone(), y.clone()).unwrap();
        let p = ridge_problem(
            data.clone(),
            data,
            &RidgeSpec {
                reg: 0.7,
                dynamics: DynamicsSpec::Gd { eta: 0.05 },
                horizon: 1,
            },
        )
        .unwrap();
        let w0 = Vector::zeros(2);
        let expect = &w0 - (x.transpose() * (&x * &w0 - &y) * 2.0 + &w0 * 1.4) * 0.05;
        let traj = unroll(&p, p.template(), None).unwrap();
        assert!((&traj.states()[1].params - expect).amax() < 1e-15);
    }
}
