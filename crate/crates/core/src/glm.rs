//! Weighted IRLS for a single canonical-link GLM with offsets.
//!
//! The alternating fitter solves thousands of these small problems (the
//! design has `k` or `k + 1` columns), so the engine works on flat row-major
//! buffers and a hand-rolled Cholesky factorization instead of general matrix
//! types. [`fit_glm`] is the public entry point; [`Subproblem`] is the
//! allocation-light form used by the alternating fitter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FpcaError, Result};
use crate::expfam::{Family, FamilySpec};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 20;
/// Bernoulli fits stop once any linear predictor exceeds this in magnitude.
pub const SEPARATION_ETA: f64 = 30.0;
/// A Cholesky pivot below this fraction of the original diagonal marks its
/// column as linearly dependent on the preceding ones.
const ALIAS_TOL: f64 = 1e-12;

/// What to do when the design is rank deficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aliasing {
    /// Fail with [`FpcaError::SingularDesign`].
    Error,
    /// Fix dependent columns at zero and fit the rest. A design with no usable
    /// column is still an error.
    Drop,
}

#[derive(Debug, Clone, Copy)]
pub struct GlmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub aliasing: Aliasing,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            aliasing: Aliasing::Error,
        }
    }
}

/// A GLM with linear predictor `offset + X b` (plus an intercept when requested).
#[derive(Debug, Clone)]
pub struct GlmProblem {
    pub responses: Vec<f64>,
    /// `m x d` design without the intercept column.
    pub covariates: DMatrix<f64>,
    pub offsets: Vec<f64>,
    pub family: FamilySpec,
    pub include_intercept: bool,
    /// Known per-observation dispersion; `None` means unit dispersion.
    pub dispersion: Option<Vec<f64>>,
}

impl GlmProblem {
    pub fn new(responses: Vec<f64>, covariates: DMatrix<f64>, family: FamilySpec) -> Self {
        let m = responses.len();
        Self {
            responses,
            covariates,
            offsets: vec![0.0; m],
            family,
            include_intercept: false,
            dispersion: None,
        }
    }

    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Self {
        self.offsets = offsets;
        self
    }

    pub fn with_intercept(mut self) -> Self {
        self.include_intercept = true;
        self
    }

    pub fn with_dispersion(mut self, dispersion: Vec<f64>) -> Self {
        self.dispersion = Some(dispersion);
        self
    }

    fn n_coefficients(&self) -> usize {
        self.covariates.ncols() + usize::from(self.include_intercept)
    }

    fn validate(&self) -> Result<()> {
        let m = self.responses.len();
        if self.covariates.nrows() != m || self.offsets.len() != m {
            return Err(FpcaError::DimensionMismatch(format!(
                "{m} responses, {} design rows, {} offsets",
                self.covariates.nrows(),
                self.offsets.len()
            )));
        }
        if let Some(d) = &self.dispersion {
            if d.len() != m {
                return Err(FpcaError::DimensionMismatch("dispersion length".into()));
            }
            if d.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return Err(invalid("dispersion values must be positive"));
            }
        }
        if m < self.n_coefficients() {
            return Err(FpcaError::SingularDesign(format!(
                "{m} observations for {} coefficients",
                self.n_coefficients()
            )));
        }
        for &y in &self.responses {
            self.family.check_response(y)?;
        }
        if self.covariates.iter().chain(&self.offsets).any(|v| !v.is_finite()) {
            return Err(invalid("design and offsets must be finite"));
        }
        Ok(())
    }

    fn row_major_design(&self) -> Vec<f64> {
        let d = self.n_coefficients();
        let mut x = Vec::with_capacity(self.responses.len() * d);
        for i in 0..self.responses.len() {
            if self.include_intercept {
                x.push(1.0);
            }
            x.extend(self.covariates.row(i).iter());
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    /// Intercept first (when present), then one coefficient per covariate.
    pub coefficients: Vec<f64>,
    pub include_intercept: bool,
    /// Log-likelihood at the returned coefficients and the problem's dispersion.
    pub loglik: f64,
    /// Sum of unit deviances.
    pub deviance: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Set when a Bernoulli fit stopped at the separation guard.
    pub boundary: bool,
    /// Columns fixed at zero because they were linearly dependent.
    pub aliased: Vec<bool>,
}

/// Fits `problem` by IRLS with step-halving.
pub fn fit_glm(problem: &GlmProblem, tol: f64, max_iter: usize) -> Result<GlmFit> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(invalid("tol must be positive and max_iter at least 1"));
    }
    problem.validate()?;
    let x = problem.row_major_design();
    let weights: Option<Vec<f64>> = problem
        .dispersion
        .as_ref()
        .map(|d| d.iter().map(|v| 1.0 / v).collect());
    let sub = Subproblem {
        family: problem.family,
        y: &problem.responses,
        x: &x,
        d: problem.n_coefficients(),
        offsets: Some(&problem.offsets),
        weights: weights.as_deref(),
    };
    let opts = GlmOptions {
        tol,
        max_iter,
        aliasing: Aliasing::Error,
    };
    let mut fit = sub.solve(None, &opts)?;
    fit.include_intercept = problem.include_intercept;
    Ok(fit)
}

/// `offset + X b` for a fitted model; the intercept is added when the fit has one.
pub fn predict_eta(fit: &GlmFit, covariates: &DMatrix<f64>, offsets: &[f64]) -> Result<Vec<f64>> {
    let shift = usize::from(fit.include_intercept);
    if covariates.ncols() + shift != fit.coefficients.len() {
        return Err(FpcaError::DimensionMismatch(format!(
            "{} covariates for {} coefficients",
            covariates.ncols(),
            fit.coefficients.len()
        )));
    }
    if offsets.len() != covariates.nrows() {
        return Err(FpcaError::DimensionMismatch(format!(
            "{} offsets for {} rows",
            offsets.len(),
            covariates.nrows()
        )));
    }
    let intercept = if fit.include_intercept {
        fit.coefficients[0]
    } else {
        0.0
    };
    Ok((0..covariates.nrows())
        .map(|i| {
            offsets[i]
                + intercept
                + covariates
                    .row(i)
                    .iter()
                    .zip(&fit.coefficients[shift..])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect())
}

/// Result of [`Subproblem::optimize`].
pub(crate) struct Solution {
    pub coefficients: Vec<f64>,
    /// Weighted kernel at `coefficients`.
    pub objective: f64,
    pub eta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub boundary: bool,
    pub aliased: Vec<bool>,
}

/// A GLM over borrowed buffers. `x` is row-major `m x d` and already contains
/// any intercept column; `weights` are `1 / phi_i`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Subproblem<'a> {
    pub family: FamilySpec,
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub d: usize,
    pub offsets: Option<&'a [f64]>,
    pub weights: Option<&'a [f64]>,
}

impl Subproblem<'_> {
    fn m(&self) -> usize {
        self.y.len()
    }

    fn offset(&self, i: usize) -> f64 {
        self.offsets.map_or(0.0, |o| o[i])
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn linear_predictor(&self, b: &[f64], eta: &mut [f64]) {
        let d = self.d;
        for (i, e) in eta.iter_mut().enumerate() {
            let row = &self.x[i * d..(i + 1) * d];
            *e = self.offset(i) + row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Weighted kernel `sum w_i (y_i eta_i - b(eta_i))`; fills `eta`.
    pub(crate) fn objective(&self, b: &[f64], eta: &mut [f64]) -> f64 {
        self.linear_predictor(b, eta);
        let mut acc = 0.0;
        for i in 0..self.m() {
            acc += self.weight(i) * self.family.kernel(self.y[i], eta[i]);
        }
        if acc.is_nan() {
            f64::NEG_INFINITY
        } else {
            acc
        }
    }

    fn saturated_objective(&self) -> f64 {
        (0..self.m())
            .map(|i| self.weight(i) * self.family.saturated_kernel(self.y[i]))
            .sum()
    }

    /// Fills the IRLS normal equations `A b = r` for the working model at `eta`.
    /// With `mu_override` the working weights come from those means instead.
    fn normal_equations(&self, eta: &[f64], mu_override: bool, a: &mut [f64], r: &mut [f64]) {
        let d = self.d;
        a.fill(0.0);
        r.fill(0.0);
        let gaussian = self.family.family() == Family::Gaussian;
        for i in 0..self.m() {
            let w = self.weight(i);
            let (wt, wz) = if gaussian {
                (w, w * (self.y[i] - self.offset(i)))
            } else {
                let (mu, eta_i) = if mu_override {
                    let mu = self.family.initial_mean(self.y[i]);
                    (mu, self.family.link_clamped(mu))
                } else {
                    (self.family.mean(eta[i]), eta[i])
                };
                let v = self.family.variance(mu);
                (w * v, w * (v * (eta_i - self.offset(i)) + (self.y[i] - mu)))
            };
            let row = &self.x[i * d..(i + 1) * d];
            for p in 0..d {
                let xp = row[p] * wt;
                r[p] += row[p] * wz;
                for q in 0..=p {
                    a[p * d + q] += xp * row[q];
                }
            }
        }
        for p in 0..d {
            for q in 0..p {
                a[q * d + p] = a[p * d + q];
            }
        }
    }

    /// Runs IRLS from `start` (or from a data-based working response when
    /// `None`). Every accepted step leaves the objective no lower than before.
    pub(crate) fn optimize(&self, start: Option<&[f64]>, opts: &GlmOptions) -> Result<Solution> {
        let m = self.m();
        let d = self.d;
        let gaussian = self.family.family() == Family::Gaussian;
        let mut sat_cache = None;
        let mut sat = || *sat_cache.get_or_insert_with(|| self.saturated_objective());
        let mut eta = vec![0.0; m];
        let mut a = vec![0.0; d * d];
        let mut r = vec![0.0; d];
        let mut aliased = vec![false; d];
        let mut iterations = 0;
        let mut converged = false;
        let mut boundary = false;

        let (mut b, mut current) = match start {
            Some(s) => {
                let b = s.to_vec();
                let obj = self.objective(&b, &mut eta);
                (b, obj)
            }
            None => {
                self.normal_equations(&eta, true, &mut a, &mut r);
                let mut b = r.clone();
                aliased = cholesky_solve(&mut a, d, &mut b, opts.aliasing)?;
                let mut obj = self.objective(&b, &mut eta);
                let mut h = 0;
                while !obj.is_finite() && h < MAX_HALVINGS {
                    b.iter_mut().for_each(|v| *v *= 0.5);
                    obj = self.objective(&b, &mut eta);
                    h += 1;
                }
                if !obj.is_finite() {
                    return Err(FpcaError::NonConvergence {
                        iterations: 1,
                        last_coefficients: b,
                    });
                }
                iterations = 1;
                if gaussian {
                    converged = true;
                }
                (b, obj)
            }
        };
        if !current.is_finite() {
            return Err(invalid("starting coefficients give a non-finite likelihood"));
        }

        let mut candidate = vec![0.0; d];
        let mut trial = vec![0.0; d];
        while !converged && iterations < opts.max_iter {
            if self.family.family() == Family::Bernoulli
                && eta.iter().any(|e| e.abs() > SEPARATION_ETA)
            {
                boundary = true;
                converged = true;
                break;
            }
            self.normal_equations(&eta, false, &mut a, &mut r);
            candidate.copy_from_slice(&r);
            aliased = cholesky_solve(&mut a, d, &mut candidate, opts.aliasing)?;
            let full = self.objective(&candidate, &mut eta);
            let mut accepted = None;
            // The Gaussian step is the exact minimizer; a shortfall within
            // summation rounding must not freeze the iterate.
            let slack = if gaussian { 64.0 * f64::EPSILON * (current.abs() + 1.0) } else { 0.0 };
            if full >= current - slack {
                accepted = Some((candidate.clone(), full));
            }
            let mut smallest = full;
            if accepted.is_none() {
                let mut step = 1.0;
                for _ in 0..MAX_HALVINGS {
                    step *= 0.5;
                    for ((t, &bv), &cv) in trial.iter_mut().zip(&b).zip(&candidate) {
                        *t = bv + step * (cv - bv);
                    }
                    let obj = self.objective(&trial, &mut eta);
                    smallest = obj;
                    if obj >= current {
                        accepted = Some((trial.clone(), obj));
                        break;
                    }
                }
            }
            iterations += 1;
            let Some((next, next_obj)) = accepted else {
                // Not even a tiny step along the scoring direction improves:
                // the current iterate is the numerical optimum. This happens
                // at rounding level, and when the optimum lies at infinity
                // (a Poisson row of zeros).
                if smallest.is_finite() {
                    self.objective(&b, &mut eta);
                    boundary = self.family.family() != Family::Gaussian
                        && eta.iter().any(|e| e.abs() > SEPARATION_ETA);
                    converged = true;
                    break;
                }
                return Err(FpcaError::NonConvergence {
                    iterations,
                    last_coefficients: b,
                });
            };
            let gain = next_obj - current;
            b = next;
            current = next_obj;
            if gaussian || 2.0 * gain / ((2.0 * (sat() - current)).abs() + 0.1) < opts.tol {
                converged = true;
            }
        }
        // `eta` holds the predictor of the last evaluated trial; refresh it.
        self.objective(&b, &mut eta);
        Ok(Solution {
            coefficients: b,
            objective: current,
            eta,
            iterations,
            converged,
            boundary,
            aliased,
        })
    }

    /// [`Subproblem::optimize`] plus the log-likelihood and deviance at the optimum.
    pub(crate) fn solve(&self, start: Option<&[f64]>, opts: &GlmOptions) -> Result<GlmFit> {
        let sol = self.optimize(start, opts)?;
        let mut loglik = 0.0;
        let mut deviance = 0.0;
        for i in 0..self.m() {
            let phi = 1.0 / self.weight(i);
            loglik += self.family.loglik_unchecked(self.y[i], sol.eta[i], phi);
            deviance += self.family.deviance_from_eta(self.y[i], sol.eta[i]);
        }
        Ok(GlmFit {
            coefficients: sol.coefficients,
            include_intercept: false,
            loglik,
            deviance,
            n_iterations: sol.iterations,
            converged: sol.converged,
            boundary: sol.boundary,
            aliased: sol.aliased,
        })
    }
}

/// Solves `A x = rhs` in place for symmetric positive semi-definite `A`
/// (row-major `d x d`, overwritten by its Cholesky factor). Returns which
/// columns were found dependent and fixed at zero.
pub(crate) fn cholesky_solve(
    a: &mut [f64],
    d: usize,
    rhs: &mut [f64],
    policy: Aliasing,
) -> Result<Vec<bool>> {
    let diag: Vec<f64> = (0..d).map(|j| a[j * d + j]).collect();
    let mut aliased = vec![false; d];
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > ALIAS_TOL * diag[j]) || !(diag[j] > 0.0) {
            if policy == Aliasing::Error {
                return Err(FpcaError::SingularDesign(format!(
                    "column {j} is linearly dependent on the preceding columns"
                )));
            }
            aliased[j] = true;
            for i in j..d {
                a[i * d + j] = 0.0;
            }
            continue;
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in (j + 1)..d {
            let mut t = a[i * d + j];
            for k in 0..j {
                t -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = t / l;
        }
    }
    if aliased.iter().all(|&z| z) {
        return Err(FpcaError::SingularDesign("design has no usable column".into()));
    }
    // Forward substitution L y = rhs.
    for j in 0..d {
        if aliased[j] {
            rhs[j] = 0.0;
            continue;
        }
        let mut t = rhs[j];
        for k in 0..j {
            t -= a[j * d + k] * rhs[k];
        }
        rhs[j] = t / a[j * d + j];
    }
    // Back substitution L^T x = y.
    for j in (0..d).rev() {
        if aliased[j] {
            rhs[j] = 0.0;
            continue;
        }
        let mut t = rhs[j];
        for k in (j + 1)..d {
            t -= a[k * d + j] * rhs[k];
        }
        rhs[j] = t / a[j * d + j];
    }
    Ok(aliased)
}
