//! Call counting for inner objectives.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::error::Result;
use crate::model::{BilevelProblem, Dataset, HyperVector, InnerObjective, Vector};

#[derive(Debug, Default)]
pub struct EvalCounter {
    value: AtomicUsize,
    grad: AtomicUsize,
    hvp: AtomicUsize,
    cross_vjp: AtomicUsize,
    cross_jvp: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub value: usize,
    pub grad: usize,
    pub hvp: usize,
    pub cross_vjp: usize,
    pub cross_jvp: usize,
}

impl EvalCounts {
    /// Hessian-vector plus mixed-derivative products.
    pub fn derivative_products(&self) -> usize {
        self.hvp + self.cross_vjp + self.cross_jvp
    }
}

impl EvalCounter {
    pub fn snapshot(&self) -> EvalCounts {
        EvalCounts {
            value: self.value.load(Ordering::Relaxed),
            grad: self.grad.load(Ordering::Relaxed),
            hvp: self.hvp.load(Ordering::Relaxed),
            cross_vjp: self.cross_vjp.load(Ordering::Relaxed),
            cross_jvp: self.cross_jvp.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.value, &self.grad, &self.hvp, &self.cross_vjp, &self.cross_jvp] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Forwards every call to the wrapped objective and counts it.
pub struct CountingInner<D> {
    inner: Arc<dyn InnerObjective<D>>,
    counter: Arc<EvalCounter>,
}

impl<D> InnerObjective<D> for CountingInner<D> {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }

    fn hyper_dim(&self) -> usize {
        self.inner.hyper_dim()
    }

    fn value(&self, w: &Vector, hyper: &HyperVector, data: &D) -> f64 {
        self.counter.value.fetch_add(1, Ordering::Relaxed);
        self.inner.value(w, hyper, data)
    }

    fn grad(&self, w: &Vector, hyper: &HyperVector, data: &D) -> Vector {
        self.counter.grad.fetch_add(1, Ordering::Relaxed);
        self.inner.grad(w, hyper, data)
    }

    fn hvp(&self, w: &Vector, hyper: &HyperVector, data: &D, v: &Vector) -> Vector {
        self.counter.hvp.fetch_add(1, Ordering::Relaxed);
        self.inner.hvp(w, hyper, data, v)
    }

    fn cross_vjp(&self, w: &Vector, hyper: &HyperVector, data: &D, v: &Vector) -> Vector {
        self.counter.cross_vjp.fetch_add(1, Ordering::Relaxed);
        self.inner.cross_vjp(w, hyper, data, v)
    }

    fn cross_jvp(&self, w: &Vector, hyper: &HyperVector, data: &D, dhyper: &Vector) -> Vector {
        self.counter.cross_jvp.fetch_add(1, Ordering::Relaxed);
        self.inner.cross_jvp(w, hyper, data, dhyper)
    }
}

/// A copy of `problem` whose inner objective counts its evaluations.
pub fn instrument<D: Dataset + 'static>(
    problem: &BilevelProblem<D>,
) -> Result<(BilevelProblem<D>, Arc<EvalCounter>)> {
    let counter = Arc::new(EvalCounter::default());
    let wrapped = CountingInner {
        inner: problem.inner_shared(),
        counter: Arc::clone(&counter),
    };
    Ok((problem.with_inner(Arc::new(wrapped))?, counter))
}
