//! Data model and contracts shared by every other module: the hyperparameter
//! vector with its box, the inner state, the objective and dynamics traits, and
//! the assembled bilevel problem.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;

/// A named, contiguous block of the hyperparameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// The outer variable: a flat vector partitioned into named segments, with
/// per-coordinate box bounds (infinite where unconstrained).
#[derive(Clone, Debug, PartialEq)]
pub struct HyperVector {
    values: Vector,
    segments: Vec<Segment>,
    lower: Vector,
    upper: Vector,
}

#[derive(Default)]
pub struct HyperBuilder {
    values: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    segments: Vec<Segment>,
}

impl HyperBuilder {
    pub fn segment(self, name: &str, values: &[f64]) -> Self {
        self.bounded_segment(name, values, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn bounded_segment(mut self, name: &str, values: &[f64], lower: f64, upper: f64) -> Self {
        self.segments.push(Segment {
            name: name.to_string(),
            offset: self.values.len(),
            len: values.len(),
        });
        self.values.extend_from_slice(values);
        self.lower.extend(std::iter::repeat_n(lower, values.len()));
        self.upper.extend(std::iter::repeat_n(upper, values.len()));
        self
    }

    pub fn build(self) -> Result<HyperVector> {
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.name.is_empty() {
                return Err(Error::Layout("empty segment name".into()));
            }
            if self.segments[..i].iter().any(|s| s.name == seg.name) {
                return Err(Error::Layout(format!("duplicate segment `{}`", seg.name)));
            }
        }
        for k in 0..self.values.len() {
            if self.lower[k].is_nan() || self.upper[k].is_nan() || self.lower[k] > self.upper[k] {
                return Err(Error::Layout(format!("empty box at coordinate {k}")));
            }
        }
        let hyper = HyperVector {
            values: Vector::from_vec(self.values),
            segments: self.segments,
            lower: Vector::from_vec(self.lower),
            upper: Vector::from_vec(self.upper),
        };
        hyper.check_feasible()?;
        Ok(hyper)
    }
}

impl HyperVector {
    pub fn builder() -> HyperBuilder {
        HyperBuilder::default()
    }

    pub fn values(&self) -> &Vector {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn lower(&self) -> &Vector {
        &self.lower
    }

    pub fn upper(&self) -> &Vector {
        &self.upper
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.values.as_slice()[s.range()])
    }

    /// Segment containing coordinate `k`.
    pub fn segment_of(&self, k: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.range().contains(&k))
    }

    /// Same layout and bounds, new values. Feasibility is not checked.
    pub fn with_values(&self, values: Vector) -> Result<HyperVector> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                left: "hyperparameter layout".into(),
                left_dim: self.len(),
                right: "values".into(),
                right_dim: values.len(),
            });
        }
        Ok(HyperVector {
            values,
            ..self.clone()
        })
    }

    pub fn with_segment(&self, name: &str, values: &[f64]) -> Result<HyperVector> {
        let seg = self
            .segment(name)
            .ok_or_else(|| Error::Layout(format!("no segment `{name}`")))?;
        if seg.len != values.len() {
            return Err(Error::DimensionMismatch {
                left: format!("segment `{name}`"),
                left_dim: seg.len,
                right: "values".into(),
                right_dim: values.len(),
            });
        }
        let mut out = self.clone();
        out.values.as_mut_slice()[seg.range()].copy_from_slice(values);
        Ok(out)
    }

    pub fn same_layout(&self, other: &HyperVector) -> bool {
        self.segments == other.segments && self.lower == other.lower && self.upper == other.upper
    }

    pub fn is_feasible(&self) -> bool {
        self.check_feasible().is_ok()
    }

    pub fn check_feasible(&self) -> Result<()> {
        for k in 0..self.len() {
            let v = self.values[k];
            if !(v >= self.lower[k] && v <= self.upper[k]) {
                return Err(Error::Infeasible {
                    coordinate: k,
                    value: v,
                    lower: self.lower[k],
                    upper: self.upper[k],
                });
            }
        }
        Ok(())
    }

    /// Coordinate-wise clamp onto the box.
    pub fn project_box(&self) -> HyperVector {
        let mut out = self.clone();
        for k in 0..out.len() {
            out.values[k] = out.values[k].clamp(self.lower[k], self.upper[k]);
        }
        out
    }

    /// Uniform random point of the box, kept 10% away from each face. Sides
    /// without a finite bound are replaced by `value ± spread`.
    pub fn random_feasible<R: rand::Rng>(&self, spread: f64, rng: &mut R) -> HyperVector {
        let mut out = self.clone();
        for k in 0..out.len() {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            let (a, b) = if lo.is_finite() && hi.is_finite() {
                (lo, hi)
            } else {
                (lo.max(self.values[k] - spread), hi.min(self.values[k] + spread))
            };
            let pad = 0.1 * (b - a);
            out.values[k] = rng.random_range(a + pad..=b - pad);
        }
        out
    }
}

/// Inner variables plus any auxiliary dynamics state (e.g. velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct InnerState {
    pub params: Vector,
    pub aux: Vector,
}

impl InnerState {
    pub fn new(params: Vector, aux: Vector) -> Self {
        Self { params, aux }
    }

    pub fn zeros(param_dim: usize, aux_dim: usize) -> Self {
        Self::new(Vector::zeros(param_dim), Vector::zeros(aux_dim))
    }

    pub fn dim(&self) -> usize {
        self.params.len() + self.aux.len()
    }

    /// `params` followed by `aux`, the layout the adjoint and tangent
    /// recursions operate on.
    pub fn flatten(&self) -> Vector {
        let mut flat = Vector::zeros(self.dim());
        flat.rows_mut(0, self.params.len()).copy_from(&self.params);
        flat.rows_mut(self.params.len(), self.aux.len())
            .copy_from(&self.aux);
        flat
    }

    pub fn from_flat(flat: &Vector, param_dim: usize) -> Self {
        let aux_dim = flat.len() - param_dim;
        Self::new(
            flat.rows(0, param_dim).into_owned(),
            flat.rows(param_dim, aux_dim).into_owned(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(self.aux.iter()).all(|x| x.is_finite())
    }
}

/// Data that can be restricted to a subset of its rows (mini-batches).
pub trait Dataset: Clone + Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Self;
}

/// Placeholder data for problems whose objectives carry everything they need.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoData;

impl Dataset for NoData {
    fn len(&self) -> usize {
        0
    }

    fn select(&self, _rows: &[usize]) -> Self {
        NoData
    }
}

/// The inner (training) objective `L_λ(w)` together with the second-order
/// products the differentiation engines need.
pub trait InnerObjective<D>: Send + Sync {
    fn param_dim(&self) -> usize;
    fn hyper_dim(&self) -> usize;
    fn value(&self, w: &Vector, hyper: &HyperVector, data: &D) -> f64;
    fn grad(&self, w: &Vector, hyper: &HyperVector, data: &D) -> Vector;
    /// `∇²_w L · v`
    fn hvp(&self, w: &Vector, hyper: &HyperVector, data: &D, v: &Vector) -> Vector;
    /// `(∂∇_w L / ∂λ)ᵀ v`, a vector over the hyperparameters.
    fn cross_vjp(&self, w: &Vector, hyper: &HyperVector, data: &D, v: &Vector) -> Vector;
    /// `(∂∇_w L / ∂λ) · dλ`, a vector over the parameters.
    fn cross_jvp(&self, w: &Vector, hyper: &HyperVector, data: &D, dhyper: &Vector) -> Vector;
}

/// The outer (validation / meta-train) objective `E(w, λ)`.
pub trait OuterObjective<D>: Send + Sync {
    fn param_dim(&self) -> usize;
    fn hyper_dim(&self) -> usize;
    fn value(&self, w: &Vector, hyper: &HyperVector, data: &D) -> f64;
    fn grad_w(&self, w: &Vector, hyper: &HyperVector, data: &D) -> Vector;
    /// Explicit dependence on λ; zero for plain validation losses.
    fn grad_hyper(&self, w: &Vector, hyper: &HyperVector, data: &D) -> Vector;
}

/// The initialization map `Φ_0`, producing the initial parameters.
/// Auxiliary state always starts at the dynamics' `initial_aux`.
pub trait InitMap: Send + Sync {
    fn param_dim(&self) -> usize;
    fn params(&self, hyper: &HyperVector) -> Vector;
    /// `(∂Φ_0/∂λ)ᵀ v` for a cotangent over the parameters.
    fn vjp(&self, hyper: &HyperVector, v: &Vector) -> Vector;
    /// `(∂Φ_0/∂λ) · dλ`
    fn jvp(&self, hyper: &HyperVector, dhyper: &Vector) -> Vector;
}

/// One step `Φ_t` of an inner optimization algorithm and its Jacobian
/// products. Cotangents and tangents span the flattened state
/// (`params` then `aux`).
pub trait Dynamics<D>: Send + Sync {
    fn name(&self) -> &str;

    fn aux_dim(&self, param_dim: usize) -> usize;

    fn initial_aux(&self, param_dim: usize) -> Vector {
        Vector::zeros(self.aux_dim(param_dim))
    }

    /// Checks that the dynamics can read what it needs from the layout.
    fn check_layout(&self, _template: &HyperVector) -> Result<()> {
        Ok(())
    }

    fn step(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
    ) -> Result<InnerState>;

    /// `(∂Φ/∂s)ᵀ v`
    fn vjp_state(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector;

    /// `(∂Φ/∂λ)ᵀ v`
    fn vjp_hyper(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        v: &Vector,
    ) -> Vector;

    /// `(∂Φ/∂s) z + (∂Φ/∂λ) dλ`
    fn jvp(
        &self,
        inner: &dyn InnerObjective<D>,
        state: &InnerState,
        hyper: &HyperVector,
        data: &D,
        z: &Vector,
        dhyper: &Vector,
    ) -> Vector;

    /// Effective gradient step size, when the dynamics has one.
    fn step_size(&self, _hyper: &HyperVector) -> Option<f64> {
        None
    }
}

/// How each inner step picks the rows of the training data it sees.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum DataSchedule {
    #[default]
    FullBatch,
    MiniBatch { size: usize, seed: u64 },
}

/// The rows used by one inner step, recorded so the reverse sweep replays the
/// same realized map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSlice {
    Full,
    Rows(Vec<usize>),
}

impl DataSchedule {
    pub fn slice_for_step(&self, step: usize, available: usize) -> DataSlice {
        match *self {
            DataSchedule::FullBatch => DataSlice::Full,
            DataSchedule::MiniBatch { size, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(step as u64);
                let mut rows =
                    rand::seq::index::sample(&mut rng, available, size.min(available)).into_vec();
                rows.sort_unstable();
                DataSlice::Rows(rows)
            }
        }
    }
}

impl DataSlice {
    pub fn apply<'a, D: Dataset>(&self, data: &'a D) -> std::borrow::Cow<'a, D> {
        match self {
            DataSlice::Full => std::borrow::Cow::Borrowed(data),
            DataSlice::Rows(rows) => std::borrow::Cow::Owned(data.select(rows)),
        }
    }
}

/// Training and validation data handles.
pub struct Splits<D> {
    pub train: Arc<D>,
    pub val: Arc<D>,
}

impl<D> Clone for Splits<D> {
    fn clone(&self) -> Self {
        Self {
            train: Arc::clone(&self.train),
            val: Arc::clone(&self.val),
        }
    }
}

impl<D> Splits<D> {
    pub fn new(train: D, val: D) -> Self {
        Self {
            train: Arc::new(train),
            val: Arc::new(val),
        }
    }
}

/// A validated bilevel problem: inner/outer objectives, the unrolled dynamics
/// with its initialization, the unroll length and the data it runs on.
pub struct BilevelProblem<D> {
    inner: Arc<dyn InnerObjective<D>>,
    outer: Arc<dyn OuterObjective<D>>,
    dynamics: Arc<dyn Dynamics<D>>,
    init: Arc<dyn InitMap>,
    horizon: usize,
    splits: Splits<D>,
    schedule: DataSchedule,
    template: HyperVector,
}

impl<D> Clone for BilevelProblem<D> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
            outer: Arc::clone(&self.outer),
            dynamics: Arc::clone(&self.dynamics),
            init: Arc::clone(&self.init),
            horizon: self.horizon,
            splits: self.splits.clone(),
            schedule: self.schedule.clone(),
            template: self.template.clone(),
        }
    }
}

impl<D> std::fmt::Debug for BilevelProblem<D> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("param_dim", &self.inner.param_dim())
            .field("dynamics", &self.dynamics.name())
            .field("horizon", &self.horizon)
            .field("schedule", &self.schedule)
            .field("template", &self.template)
            .finish_non_exhaustive()
    }
}

fn agree(left: &str, left_dim: usize, right: &str, right_dim: usize) -> Result<()> {
    if left_dim == right_dim {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            left: left.into(),
            left_dim,
            right: right.into(),
            right_dim,
        })
    }
}

/// Validates the components against each other and assembles the problem.
/// `template` fixes the hyperparameter layout and serves as the default λ.
pub fn assemble_problem<D: Dataset>(
    inner: Arc<dyn InnerObjective<D>>,
    outer: Arc<dyn OuterObjective<D>>,
    dynamics: Arc<dyn Dynamics<D>>,
    init: Arc<dyn InitMap>,
    horizon: usize,
    splits: Splits<D>,
    template: HyperVector,
) -> Result<BilevelProblem<D>> {
    let d = inner.param_dim();
    agree("inner objective", d, "outer objective", outer.param_dim())?;
    agree("inner objective", d, "initialization", init.param_dim())?;
    agree("inner objective", inner.hyper_dim(), "hyperparameters", template.len())?;
    agree("outer objective", outer.hyper_dim(), "hyperparameters", template.len())?;
    dynamics.check_layout(&template)?;
    Ok(BilevelProblem {
        inner,
        outer,
        dynamics,
        init,
        horizon,
        splits,
        schedule: DataSchedule::FullBatch,
        template,
    })
}

impl<D: Dataset> BilevelProblem<D> {
    pub fn inner(&self) -> &dyn InnerObjective<D> {
        self.inner.as_ref()
    }

    pub fn outer(&self) -> &dyn OuterObjective<D> {
        self.outer.as_ref()
    }

    pub fn dynamics(&self) -> &dyn Dynamics<D> {
        self.dynamics.as_ref()
    }

    pub fn init(&self) -> &dyn InitMap {
        self.init.as_ref()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn train(&self) -> &D {
        &self.splits.train
    }

    pub fn val(&self) -> &D {
        &self.splits.val
    }

    pub fn splits(&self) -> &Splits<D> {
        &self.splits
    }

    pub fn schedule(&self) -> &DataSchedule {
        &self.schedule
    }

    pub fn template(&self) -> &HyperVector {
        &self.template
    }

    pub fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }

    pub fn state_dim(&self) -> usize {
        let d = self.param_dim();
        d + self.dynamics.aux_dim(d)
    }

    pub fn initial_state(&self, hyper: &HyperVector) -> InnerState {
        let d = self.param_dim();
        InnerState::new(self.init.params(hyper), self.dynamics.initial_aux(d))
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Same objectives and dynamics on different data.
    pub fn with_splits(&self, splits: Splits<D>) -> Self {
        Self {
            splits,
            ..self.clone()
        }
    }

    pub fn with_schedule(&self, schedule: DataSchedule) -> Self {
        Self {
            schedule,
            ..self.clone()
        }
    }

    /// Replaces the inner objective (e.g. with an instrumented wrapper).
    pub fn with_inner(&self, inner: Arc<dyn InnerObjective<D>>) -> Result<Self> {
        agree("inner objective", inner.param_dim(), "problem", self.param_dim())?;
        agree("inner objective", inner.hyper_dim(), "hyperparameters", self.template.len())?;
        Ok(Self {
            inner,
            ..self.clone()
        })
    }

    pub fn inner_shared(&self) -> Arc<dyn InnerObjective<D>> {
        Arc::clone(&self.inner)
    }

    pub fn with_template(&self, template: HyperVector) -> Result<Self> {
        if !self.template.same_layout(&template) {
            return Err(Error::Layout("template layout differs".into()));
        }
        Ok(Self {
            template,
            ..self.clone()
        })
    }

    /// Ensures `hyper` has this problem's layout and lies in its box.
    pub fn check_hyper(&self, hyper: &HyperVector) -> Result<()> {
        if !self.template.same_layout(hyper) {
            return Err(Error::Layout(
                "hyperparameter vector does not match the problem layout".into(),
            ));
        }
        hyper.check_feasible()
    }
}

/// Outcome of [`check_transpose_consistency`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransposeReport {
    pub probes: usize,
    pub max_defect: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const TRANSPOSE_TOLERANCE: f64 = 1e-10;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Probes `⟨vjp_state(v), z⟩ + ⟨vjp_hyper(v), dλ⟩ = ⟨v, jvp(z, dλ)⟩` at random
/// states around the problem's inner objective and `hyper`.
pub fn check_transpose_consistency<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    probes: usize,
    seed: u64,
) -> TransposeReport {
    check_with_cotangents(problem, hyper, probes, seed, false)
}

pub(crate) fn check_with_cotangents<D: Dataset>(
    problem: &BilevelProblem<D>,
    hyper: &HyperVector,
    probes: usize,
    seed: u64,
    zero_cotangent: bool,
) -> TransposeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = problem.param_dim();
    let aux = problem.dynamics().aux_dim(d);
    let inner = problem.inner();
    let dynamics = problem.dynamics();
    let data = problem.train();
    let mut max_defect: f64 = 0.0;
    for _ in 0..probes {
        let state = InnerState::new(gaussian(&mut rng, d), gaussian(&mut rng, aux));
        let v = if zero_cotangent {
            Vector::zeros(d + aux)
        } else {
            gaussian(&mut rng, d + aux)
        };
        let z = gaussian(&mut rng, d + aux);
        let dl = gaussian(&mut rng, hyper.len());
        let lhs = dynamics.vjp_state(inner, &state, hyper, data, &v).dot(&z)
            + dynamics.vjp_hyper(inner, &state, hyper, data, &v).dot(&dl);
        let rhs = v.dot(&dynamics.jvp(inner, &state, hyper, data, &z, &dl));
        let defect = (lhs - rhs).abs() / (rhs.abs() + 1e-12);
        max_defect = max_defect.max(defect);
    }
    TransposeReport {
        probes,
        max_defect,
        threshold: TRANSPOSE_TOLERANCE,
        pass: max_defect <= TRANSPOSE_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> HyperVector {
        HyperVector::builder()
            .bounded_segment("weights", &[0.5, 1.0, 0.0], 0.0, 1.0)
            .segment("lr", &[-2.0])
            .bounded_segment("reg", &[1.0], 1e-8, f64::INFINITY)
            .build()
            .unwrap()
    }

    #[test]
    fn segments_partition_the_vector() {
        let h = layout();
        let mut covered = vec![0usize; h.len()];
        for s in h.segments() {
            for k in s.range() {
                covered[k] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(h.segment_values("lr"), Some(&[-2.0][..]));
        assert_eq!(h.segment_of(4).unwrap().name, "reg");
        assert!(h.segment("missing").is_none());
    }

    #[test]
    fn duplicate_segment_rejected() {
        let err = HyperVector::builder()
            .segment("a", &[1.0])
            .segment("a", &[2.0])
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn out_of_box_rejected() {
        let err = HyperVector::builder()
            .bounded_segment("w", &[1.5], 0.0, 1.0)
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Infeasible { coordinate: 0, .. }));
    }

    #[test]
    fn flatten_roundtrip() {
        let s = InnerState::new(Vector::from_vec(vec![1.0, 2.0]), Vector::from_vec(vec![3.0]));
        let flat = s.flatten();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(InnerState::from_flat(&flat, 2), s);
    }

    #[test]
    fn minibatch_slices_are_deterministic() {
        let sched = DataSchedule::MiniBatch { size: 4, seed: 9 };
        assert_eq!(sched.slice_for_step(3, 10), sched.slice_for_step(3, 10));
        assert_ne!(sched.slice_for_step(3, 10), sched.slice_for_step(4, 10));
        match sched.slice_for_step(0, 10) {
            DataSlice::Rows(r) => assert_eq!(r.len(), 4),
            DataSlice::Full => panic!("expected rows"),
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(vals in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let h = layout().with_values(Vector::from_vec(vals)).unwrap();
            let p = h.project_box();
            prop_assert!(p.is_feasible());
            prop_assert_eq!(p.project_box(), p.clone());
        }

        #[test]
        fn segment_lookup_is_a_bijection(lens in proptest::collection::vec(0usize..4, 1..6)) {
            let mut b = HyperVector::builder();
            for (i, &n) in lens.iter().enumerate() {
                b = b.segment(&format!("s{i}"), &vec![0.0; n]);
            }
            let h = b.build().unwrap();
            let total: usize = lens.iter().sum();
            prop_assert_eq!(h.len(), total);
            for k in 0..total {
                let owners = h.segments().iter().filter(|s| s.range().contains(&k)).count();
                prop_assert_eq!(owners, 1);
            }
            for (i, &n) in lens.iter().enumerate() {
                prop_assert_eq!(h.segment(&format!("s{i}")).unwrap().len, n);
            }
        }
    }
}
