//! Ground truth for strongly convex quadratic inner problems.
//!
//! Nothing here calls into the hypergradient engines' derivative code: the
//! exact minimizer comes from a dense Cholesky solve and the exact
//! hypergradient from implicit differentiation at that minimizer. The
//! convergence harness is the one place both pipelines meet, to compare them.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hypergrad::reverse_from;
use crate::model::{BilevelProblem, Dataset, HyperVector, OuterObjective, Vector};

/// Inner loss `L_λ(w) = wᵀA(λ)w − 2 b(λ)ᵀw` with
/// `A(λ) = A₀ + Σ_k λ_k A_k` and `b(λ) = b₀ + Bλ`.
/// Its unique minimizer is `A(λ)⁻¹ b(λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticInner {
    base: DMatrix<f64>,
    hyper_terms: Vec<(usize, DMatrix<f64>)>,
    offset: Vector,
    hyper_map: DMatrix<f64>,
}

/// Above this many λ-dependent Hessian terms the box-vertex check is skipped
/// in favour of checking the template point only.
const MAX_VERTEX_TERMS: usize = 12;

impl QuadraticInner {
    /// Validates shapes and symmetry, and checks `λ_min(A(λ)) > 0` over the
    /// box of `template`.
    pub fn new(
        base: DMatrix<f64>,
        hyper_terms: Vec<(usize, DMatrix<f64>)>,
        offset: Vector,
        hyper_map: DMatrix<f64>,
        template: &HyperVector,
    ) -> Result<Self> {
        let d = base.nrows();
        let shape = |name: &str, got: usize, want: usize| -> Result<()> {
            if got == want {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    left: "quadratic dimension".into(),
                    left_dim: want,
                    right: name.into(),
                    right_dim: got,
                })
            }
        };
        shape("A0 columns", base.ncols(), d)?;
        shape("b0", offset.len(), d)?;
        shape("B rows", hyper_map.nrows(), d)?;
        shape("B columns", hyper_map.ncols(), template.len())?;
        for (k, a_k) in &hyper_terms {
            if *k >= template.len() {
                return Err(Error::Layout(format!("Hessian term for coordinate {k} out of range")));
            }
            shape("A_k rows", a_k.nrows(), d)?;
            shape("A_k columns", a_k.ncols(), d)?;
        }
        let q = Self {
            base,
            hyper_terms,
            offset,
            hyper_map,
        };
        if !is_symmetric(&q.base) || q.hyper_terms.iter().any(|(_, a)| !is_symmetric(a)) {
            return Err(Error::NotPositiveDefinite);
        }
        q.check_positive_definite(template)?;
        Ok(q)
    }

    /// Ridge regression: `‖Xw − y‖² + λ‖w‖²`, i.e. `A = XᵀX + λI`, `b = Xᵀy`,
    /// with λ the single entry of `reg_segment`.
    pub fn ridge(
        x: &DMatrix<f64>,
        y: &Vector,
        template: &HyperVector,
        reg_segment: &str,
    ) -> Result<Self> {
        let seg = template
            .segment(reg_segment)
            .ok_or_else(|| Error::Layout(format!("no segment `{reg_segment}`")))?;
        let d = x.ncols();
        Self::new(
            x.transpose() * x,
            vec![(seg.offset, DMatrix::identity(d, d))],
            x.transpose() * y,
            DMatrix::zeros(d, template.len()),
            template,
        )
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn hyper_dim(&self) -> usize {
        self.hyper_map.ncols()
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn hyper_terms(&self) -> &[(usize, DMatrix<f64>)] {
        &self.hyper_terms
    }

    pub fn offset(&self) -> &Vector {
        &self.offset
    }

    pub fn hyper_map(&self) -> &DMatrix<f64> {
        &self.hyper_map
    }

    pub fn matrix(&self, hyper: &HyperVector) -> DMatrix<f64> {
        let mut a = self.base.clone();
        for (k, a_k) in &self.hyper_terms {
            a += a_k * hyper.values()[*k];
        }
        a
    }

    pub fn rhs(&self, hyper: &HyperVector) -> Vector {
        &self.offset + &self.hyper_map * hyper.values()
    }

    /// Eigenvalue range of the inner Hessian `2A(λ)`.
    pub fn hessian_spectrum(&self, hyper: &HyperVector) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.matrix(hyper) * 2.0);
        (eig.eigenvalues.min(), eig.eigenvalues.max())
    }

    /// `A(λ)` is affine in λ so its smallest eigenvalue is concave and attains
    /// its minimum over the box at a vertex. Unbounded directions need `A_k ⪰ 0`.
    fn check_positive_definite(&self, template: &HyperVector) -> Result<()> {
        let min_eig = |a: DMatrix<f64>| SymmetricEigen::new(a).eigenvalues.min();
        if self.hyper_terms.len() > MAX_VERTEX_TERMS {
            return if min_eig(self.matrix(template)) > 0.0 {
                Ok(())
            } else {
                Err(Error::NotPositiveDefinite)
            };
        }
        let mut finite_corners: Vec<(usize, [f64; 2])> = Vec::new();
        let mut fixed = self.base.clone();
        for (k, a_k) in &self.hyper_terms {
            let (lo, hi) = (template.lower()[*k], template.upper()[*k]);
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => finite_corners.push((*k, [lo, hi])),
                (true, false) | (false, true) => {
                    let sign = if lo.is_finite() { 1.0 } else { -1.0 };
                    if min_eig(a_k * sign) < 0.0 {
                        return Err(Error::NotPositiveDefinite);
                    }
                    fixed += a_k * if lo.is_finite() { lo } else { hi };
                }
                (false, false) => {
                    if a_k.amax() > 0.0 {
                        return Err(Error::NotPositiveDefinite);
                    }
                }
            }
        }
        for mask in 0u32..(1u32 << finite_corners.len()) {
            let mut a = fixed.clone();
            for (bit, (k, ends)) in finite_corners.iter().enumerate() {
                let a_k = &self
                    .hyper_terms
                    .iter()
                    .find(|(j, _)| j == k)
                    .expect("term exists")
                    .1;
                a += a_k * ends[((mask >> bit) & 1) as usize];
            }
            if min_eig(a) <= 0.0 {
                return Err(Error::NotPositiveDefinite);
            }
        }
        Ok(())
    }
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1.0);
    (a - a.transpose()).amax() <= 1e-12 * scale
}

fn factor(q: &QuadraticInner, hyper: &HyperVector) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(q.matrix(hyper)).ok_or(Error::NotPositiveDefinite)
}

/// `w*(λ) = A(λ)⁻¹ b(λ)`.
pub fn exact_minimizer(q: &QuadraticInner, hyper: &HyperVector) -> Result<Vector> {
    Ok(factor(q, hyper)?.solve(&q.rhs(hyper)))
}

/// Implicit hypergradient at the exact minimizer:
/// `∂w*/∂λ_k = A⁻¹(B_k − A_k w*)`, `∇f = (∂w*/∂λ)ᵀ ∇_w E + ∇_λ E`.
pub fn exact_hypergrad<D>(
    q: &QuadraticInner,
    outer: &dyn OuterObjective<D>,
    val: &D,
    hyper: &HyperVector,
) -> Result<Vector> {
    let chol = factor(q, hyper)?;
    let w_star = chol.solve(&q.rhs(hyper));
    let mut grad = outer.grad_hyper(&w_star, hyper, val);
    let gw = outer.grad_w(&w_star, hyper, val);
    if gw.iter().all(|&x| x == 0.0) {
        return Ok(grad);
    }
    // A is symmetric, so the adjoint solve A u = ∇_w E replaces one solve per λ_k
    let u = chol.solve(&gw);
    grad += q.hyper_map.transpose() * &u;
    for (k, a_k) in &q.hyper_terms {
        grad[*k] -= u.dot(&(a_k * &w_star));
    }
    Ok(grad)
}

/// `f(λ) = E(w*(λ), λ)` through the closed form.
pub fn exact_value<D>(
    q: &QuadraticInner,
    outer: &dyn OuterObjective<D>,
    val: &D,
    hyper: &HyperVector,
) -> Result<f64> {
    let w = exact_minimizer(q, hyper)?;
    Ok(outer.value(&w, hyper, val))
}

/// Errors at or below this are rounding-dominated and left out of the fit.
pub const ERROR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub horizon: usize,
    pub error: f64,
    pub f_value: f64,
    pub grad_inf_norm: f64,
    pub inner_final_loss: f64,
    pub in_fit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `exp(slope)` of a least-squares fit of `ln error` against `T`.
    pub fitted_ratio: f64,
    /// `1 − η·λ_min(2A)`
    pub theoretical_ratio: f64,
    /// First horizon from which the errors never increase.
    pub monotone_from: usize,
    pub step_size: f64,
    pub hessian_min: f64,
    pub hessian_max: f64,
}

impl ConvergenceTable {
    pub fn relative_ratio_gap(&self) -> f64 {
        (self.fitted_ratio - self.theoretical_ratio).abs() / self.theoretical_ratio
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "horizon,error,f_value,in_fit")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{}", r.horizon, r.error, r.f_value, r.in_fit)?;
        }
        crate::experiment::output::write_atomic(path, &out)
    }
}

/// Measures `‖∇f_T − ∇f‖₂` for each `T` in `horizons` (reverse mode against
/// the implicit hypergradient) and fits the geometric decay rate.
pub fn convergence_harness<D: Dataset>(
    problem: &BilevelProblem<D>,
    q: &QuadraticInner,
    hyper: &HyperVector,
    horizons: &[usize],
) -> Result<ConvergenceTable> {
    let eta = problem
        .dynamics()
        .step_size(hyper)
        .ok_or_else(|| Error::Config("dynamics exposes no step size".into()))?;
    let (h_min, h_max) = q.hessian_spectrum(hyper);
    if eta * h_max >= 2.0 {
        return Err(Error::NonContractive(eta * h_max));
    }
    let exact = exact_hypergrad(q, problem.outer(), problem.val(), hyper)?;

    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for &t in &sorted {
        let res = reverse_from(&problem.with_horizon(t), hyper, None)?;
        rows.push(ConvergenceRow {
            horizon: t,
            error: (&res.grad - &exact).norm(),
            f_value: res.f_value,
            grad_inf_norm: res.grad.amax(),
            inner_final_loss: res.inner_final_loss(),
            in_fit: false,
        });
    }

    let usable: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].error > ERROR_FLOOR).collect();
    let mut start = 0;
    for w in usable.windows(2).enumerate() {
        let (pos, pair) = w;
        if rows[pair[1]].error > rows[pair[0]].error {
            start = pos + 1;
        }
    }
    let fit_idx = &usable[start.min(usable.len())..];
    if fit_idx.len() < 2 {
        return Err(Error::InsufficientData(fit_idx.len()));
    }
    for &i in fit_idx {
        rows[i].in_fit = true;
    }
    let n = fit_idx.len() as f64;
    let xs: Vec<f64> = fit_idx.iter().map(|&i| rows[i].horizon as f64).collect();
    let ys: Vec<f64> = fit_idx.iter().map(|&i| rows[i].error.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;

    Ok(ConvergenceTable {
        monotone_from: rows[fit_idx[0]].horizon,
        rows,
        fitted_ratio: slope.exp(),
        theoretical_ratio: 1.0 - eta * h_min,
        step_size: eta,
        hessian_min: h_min,
        hessian_max: h_max,
    })
}
