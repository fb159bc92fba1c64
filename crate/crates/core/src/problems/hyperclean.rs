//! Data hyper-cleaning: every training example's loss carries its own weight
//! in `[0, 1]`, and the weights are tuned against an unweighted validation
//! loss so that corrupted examples are pushed towards zero.
//!
//! The ground model is a binary linear classifier with logistic loss. The
//! inner objective adds a fixed `1e-4·‖w‖²` so it stays strongly convex when
//! many weights sit at zero.

use std::sync::Arc;

use crate::dynamics::{DynamicsSpec, ZeroInit, LR_SEGMENT};
use crate::error::{Error, Result};
use crate::model::{
    assemble_problem, BilevelProblem, Dataset, HyperVector, InnerObjective, OuterObjective, Splits,
    Vector,
};
use crate::problems::data::ClassificationData;

pub const WEIGHT_SEGMENT: &str = "weights";
pub const DEFAULT_L2: f64 = 1e-4;

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss of logit `z` for label `y ∈ {0, 1}`.
fn logistic(z: f64, y: usize) -> f64 {
    softplus(z) - if y == 1 { z } else { 0.0 }
}

/// `Σ_i ℓ(x_iᵀw, y_i)`
pub fn cross_entropy(data: &ClassificationData, w: &Vector) -> f64 {
    let z = &data.x * w;
    let mut total = 0.0;
    for i in 0..data.len() {
        total += logistic(z[i], data.labels[i]);
    }
    total
}

/// `Σ_i weights[weight_index[i]] · ℓ(x_iᵀw, y_i)`
pub fn weighted_cross_entropy(data: &ClassificationData, w: &Vector, weights: &[f64]) -> f64 {
    let z = &data.x * w;
    let mut total = 0.0;
    for i in 0..data.len() {
        total += weights[data.weight_index[i]] * logistic(z[i], data.labels[i]);
    }
    total
}

/// Weighted logistic loss plus a fixed ridge term.
pub struct WeightedLogistic {
    features: usize,
    weight_offset: usize,
    weight_count: usize,
    hyper_dim: usize,
    l2: f64,
}

impl WeightedLogistic {
    fn weights<'a>(&self, hyper: &'a HyperVector) -> &'a [f64] {
        &hyper.values().as_slice()[self.weight_offset..self.weight_offset + self.weight_count]
    }

    /// `σ(z_i) − y_i` for every row.
    fn residuals(&self, w: &Vector, data: &ClassificationData) -> Vector {
        let z = &data.x * w;
        Vector::from_fn(data.len(), |i, _| sigmoid(z[i]) - (data.labels[i] == 1) as u8 as f64)
    }
}

impl InnerObjective<ClassificationData> for WeightedLogistic {
    fn param_dim(&self) -> usize {
        self.features
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_dim
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> f64 {
        weighted_cross_entropy(data, w, self.weights(hyper)) + self.l2 * w.norm_squared()
    }

    fn grad(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData) -> Vector {
        let weights = self.weights(hyper);
        let r = self.residuals(w, data);
        let scaled = Vector::from_fn(data.len(), |i, _| weights[data.weight_index[i]] * r[i]);
        data.x.tr_mul(&scaled) + w * (2.0 * self.l2)
    }

    fn hvp(&self, w: &Vector, hyper: &HyperVector, data: &ClassificationData, v: &Vector) -> Vector {
        let weights = self.weights(hyper);
        let z = &data.x * w;
        let xv = &data.x * v;
        let scaled = Vector::from_fn(data.len(), |i, _| {
            let s = sigmoid(z[i]);
            weights[data.weight_index[i]] * s * (1.0 - s) * xv[i]
        });
        data.x.tr_mul(&scaled) + v * (2.0 * self.l2)
    }

    fn cross_vjp(&self, w: &Vector, _hyper: &HyperVector, data: &ClassificationData, v: &Vector) -> Vector {
        let r = self.residuals(w, data);
        let xv = &data.x * v;
        let mut out = Vector::zeros(self.hyper_dim);
        for i in 0..data.len() {
            out[self.weight_offset + data.weight_index[i]] += r[i] * xv[i];
        }
        out
    }

    fn cross_jvp(
        &self,
        w: &Vector,
        _hyper: &HyperVector,
        data: &ClassificationData,
        dhyper: &Vector,
    ) -> Vector {
        let r = self.residuals(w, data);
        let scaled = Vector::from_fn(data.len(), |i, _| {
            dhyper[self.weight_offset + data.weight_index[i]] * r[i]
        });
        data.x.tr_mul(&scaled)
    }
}

/// Mean unweighted logistic loss on the validation split.
pub struct LogisticValidation {
    features: usize,
    hyper_dim: usize,
}

impl OuterObjective<ClassificationData> for LogisticValidation {
    fn param_dim(&self) -> usize {
        self.features
    }

    fn hyper_dim(&self) -> usize {
        self.hyper_dim
    }

    fn value(&self, w: &Vector, _hyper: &HyperVector, data: &ClassificationData) -> f64 {
        cross_entropy(data, w) / data.len() as f64
    }

    fn grad_w(&self, w: &Vector, _hyper: &HyperVector, data: &ClassificationData) -> Vector {
        let z = &data.x * w;
        let r = Vector::from_fn(data.len(), |i, _| sigmoid(z[i]) - (data.labels[i] == 1) as u8 as f64);
        data.x.tr_mul(&r) / data.len() as f64
    }

    fn grad_hyper(&self, _w: &Vector, _hyper: &HyperVector, _data: &ClassificationData) -> Vector {
        Vector::zeros(self.hyper_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCleanSpec {
    /// Initial value of every weight.
    pub initial_weight: f64,
    /// Length of the weight segment; must match what the data references
    /// (one weight per training example unless rows share weights).
    pub weight_count: usize,
    /// Which training examples are corrupted; evaluation only.
    pub mask: Option<Vec<bool>>,
    pub dynamics: DynamicsSpec,
    pub horizon: usize,
    pub l2: f64,
}

impl HyperCleanSpec {
    pub fn new(train: &ClassificationData, dynamics: DynamicsSpec, horizon: usize) -> Self {
        Self {
            initial_weight: 1.0,
            weight_count: train.weight_count(),
            mask: None,
            dynamics,
            horizon,
            l2: DEFAULT_L2,
        }
    }
}

pub fn hyperclean_template(spec: &HyperCleanSpec) -> Result<HyperVector> {
    let mut b = HyperVector::builder().bounded_segment(
        WEIGHT_SEGMENT,
        &vec![spec.initial_weight; spec.weight_count],
        0.0,
        1.0,
    );
    if let Some(theta) = spec.dynamics.initial_log_rate() {
        b = b.segment(LR_SEGMENT, &[theta]);
    }
    b.build()
}

pub fn hyperclean_problem(
    train: ClassificationData,
    val: ClassificationData,
    spec: &HyperCleanSpec,
) -> Result<BilevelProblem<ClassificationData>> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if train.classes != 2 || val.classes != 2 {
        return Err(Error::BadParams("hyper-cleaning uses binary labels".into()));
    }
    if train.weight_count() != spec.weight_count {
        return Err(Error::WeightSegmentMismatch {
            segment: spec.weight_count,
            expected: train.weight_count(),
        });
    }
    if let Some(mask) = &spec.mask {
        if mask.len() != train.len() {
            return Err(Error::DimensionMismatch {
                left: "training set".into(),
                left_dim: train.len(),
                right: "corruption mask".into(),
                right_dim: mask.len(),
            });
        }
    }
    let template = hyperclean_template(spec)?;
    let d = train.features();
    let m = template.len();
    let dynamics = spec.dynamics.build::<ClassificationData>(&template)?;
    assemble_problem(
        Arc::new(WeightedLogistic {
            features: d,
            weight_offset: template.segment(WEIGHT_SEGMENT).map(|s| s.offset).unwrap_or(0),
            weight_count: spec.weight_count,
            hyper_dim: m,
            l2: spec.l2,
        }),
        Arc::new(LogisticValidation {
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

/// Mean learned weight over corrupted and over clean examples.
pub fn weight_separation(hyper: &HyperVector, mask: &[bool]) -> (f64, f64) {
    let w = hyper.segment_values(WEIGHT_SEGMENT).unwrap_or(&[]);
    let mean = |flag: bool| {
        let sel: Vec<f64> = w
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m == flag)
            .map(|(v, _)| *v)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    };
    (mean(true), mean(false))
}
