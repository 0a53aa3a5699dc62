//! Alternating-GLM fitting of the low-rank model
//!
//! ```text
//! g(mu_ij) = gamma_j + sum_r alpha_ir * beta_jr,   (i, j) in S
//! ```
//!
//! Holding `beta` fixed, every row `i` is an ordinary GLM in `alpha_i` with
//! covariates `beta_j` and offsets `gamma_j`; holding `alpha` fixed, every
//! column `j` is a GLM in `(gamma_j, beta_j)` with covariates `alpha_i`. Each
//! half-step warm-starts IRLS from the current parameters and only accepts
//! steps that do not lower the likelihood, so the log-likelihood is
//! non-decreasing across half-steps.
//!
//! Three variants differ in the column offset and the dispersion layout:
//!
//! | variant     | `gamma_j` | dispersion |
//! |-------------|-----------|------------|
//! | Simple      | absent    | scalar     |
//! | Covariance  | fitted    | scalar     |
//! | Correlation | fitted    | per column |
//!
//! For the correlation variant the working dispersion of column `j` is fixed at
//! the maximum-likelihood variance of that column's observations, which makes
//! the Gaussian full-matrix fit coincide with correlation PCA.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ObservationSet;
use crate::error::{invalid, FpcaError, Result};
use crate::expfam::{DispersionStructure, Family, FamilySpec};
use crate::glm::{Aliasing, GlmOptions, Subproblem};
use crate::rng::seeded;
use crate::selection::degrees_of_freedom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Simple,
    Covariance,
    Correlation,
}

impl ModelVariant {
    pub fn has_gamma(self) -> bool {
        !matches!(self, ModelVariant::Simple)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Simple => "simple",
            ModelVariant::Covariance => "covariance",
            ModelVariant::Correlation => "correlation",
        }
    }

    /// Minimum observations per row and column needed to fit rank `k`.
    pub fn min_coverage(self, k: usize) -> usize {
        if self.has_gamma() {
            k + 2
        } else {
            k + 1
        }
    }

    /// The family specification this variant uses for `family`.
    pub fn family_spec(self, family: Family) -> Result<FamilySpec> {
        match (self, family) {
            (ModelVariant::Correlation, Family::Gaussian) => Ok(FamilySpec::gaussian_per_column()),
            (ModelVariant::Correlation, f) => Err(invalid(format!(
                "the correlation variant needs a family with dispersion (gaussian), got {f}"
            ))),
            (_, f) => Ok(FamilySpec::of(f)),
        }
    }

    fn check_family(self, family: &FamilySpec) -> Result<()> {
        let expected = self.family_spec(family.family())?;
        if expected != *family {
            return Err(invalid(format!(
                "variant {} expects dispersion structure {:?}, got {:?}",
                self.name(),
                expected.dispersion_structure(),
                family.dispersion_structure()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(ModelVariant::Simple),
            "covariance" => Ok(ModelVariant::Covariance),
            "correlation" => Ok(ModelVariant::Correlation),
            other => Err(invalid(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpcaConfig {
    pub k: usize,
    pub n_starts: usize,
    /// Stop when the log-likelihood gain of an outer iteration is at most
    /// `tol` times the current half-deviance.
    pub tol: f64,
    /// When set, also require the root-mean-square change of the linear
    /// predictor over `S` in an outer iteration to be at most `fitted_tol`
    /// times its root-mean-square size. The likelihood rule alone cannot
    /// resolve parameters much beyond the square root of rounding error.
    #[serde(default)]
    pub fitted_tol: Option<f64>,
    pub max_outer_iter: usize,
    pub seed: u64,
}

impl FpcaConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            n_starts: 5,
            tol: 1e-7,
            fitted_tol: None,
            max_outer_iter: 500,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_starts(mut self, n_starts: usize) -> Self {
        self.n_starts = n_starts;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_fitted_tol(mut self, fitted_tol: f64) -> Self {
        self.fitted_tol = Some(fitted_tol);
        self
    }

    pub fn with_max_outer_iter(mut self, max_outer_iter: usize) -> Self {
        self.max_outer_iter = max_outer_iter;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.n_starts == 0 {
            return Err(invalid("n_starts must be at least 1"));
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return Err(invalid("tol must be a finite non-negative number"));
        }
        if let Some(f) = self.fitted_tol {
            if !(f >= 0.0) || !f.is_finite() {
                return Err(invalid("fitted_tol must be a finite non-negative number"));
            }
        }
        if self.max_outer_iter == 0 {
            return Err(invalid("max_outer_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Estimated dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Dispersion {
    /// Families without a dispersion parameter.
    Unit,
    Scalar(f64),
    PerColumn(Vec<f64>),
}

impl Dispersion {
    pub fn for_column(&self, j: usize) -> f64 {
        match self {
            Dispersion::Unit => 1.0,
            Dispersion::Scalar(v) => *v,
            Dispersion::PerColumn(v) => v[j],
        }
    }
}

/// Outcome of one random start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub seed: u64,
    /// Final working log-likelihood, or `None` when the start failed.
    pub objective: Option<f64>,
    pub error: Option<String>,
    pub iterations: usize,
    pub converged: bool,
    /// Working log-likelihood after every half-step (row step, column step, ...).
    #[serde(skip)]
    pub half_step_trace: Vec<f64>,
}

/// A fitted low-rank model.
#[derive(Debug, Clone, PartialEq)]
pub struct FpcaFit {
    pub k: usize,
    pub variant: ModelVariant,
    pub family: FamilySpec,
    pub n_rows: usize,
    pub n_cols: usize,
    /// `n x k` row scores.
    pub alpha: DMatrix<f64>,
    /// `p x k` column coefficients.
    pub beta: DMatrix<f64>,
    /// Column offsets; all zero for the simple variant.
    pub gamma: Vec<f64>,
    pub phi: Dispersion,
    /// Log-likelihood at the fitted parameters and the estimated dispersion.
    pub loglik: f64,
    /// Sum of unit deviances over `S`.
    pub deviance: f64,
    /// Final working log-likelihood (the quantity the alternating fit maximizes).
    pub objective: f64,
    /// Working log-likelihood after each outer iteration of the winning start.
    pub loglik_trace: Vec<f64>,
    pub start_index: usize,
    pub converged: bool,
    pub iterations: usize,
    pub starts: Vec<StartSummary>,
}

impl FpcaFit {
    /// `gamma_j + sum_r alpha_ir beta_jr`.
    pub fn eta(&self, row: usize, col: usize) -> f64 {
        self.gamma[col]
            + (0..self.k)
                .map(|r| self.alpha[(row, r)] * self.beta[(col, r)])
                .sum::<f64>()
    }

    pub fn mean(&self, row: usize, col: usize) -> f64 {
        self.family.mean(self.eta(row, col))
    }

    /// Fitted linear predictor on the whole grid.
    pub fn eta_matrix(&self) -> DMatrix<f64> {
        let mut m = &self.alpha * self.beta.transpose();
        for j in 0..self.n_cols {
            for i in 0..self.n_rows {
                m[(i, j)] += self.gamma[j];
            }
        }
        m
    }

    /// Fitted means on the whole grid.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        self.eta_matrix().map(|e| self.family.mean(e))
    }
}

/// Row- and column-major views of an observation set.
pub(crate) struct Layout {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    row_val: Vec<f64>,
    col_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    col_val: Vec<f64>,
}

impl Layout {
    pub fn new(s: &ObservationSet) -> Self {
        let (n, p) = (s.n_rows(), s.n_cols());
        let (row_ptr, row_idx, row_val) = compress(n, s.entries().iter().map(|e| (e.row, e.col, e.value)));
        let (col_ptr, col_idx, col_val) = compress(p, s.entries().iter().map(|e| (e.col, e.row, e.value)));
        Self {
            n_rows: n,
            n_cols: p,
            row_ptr,
            row_idx,
            row_val,
            col_ptr,
            col_idx,
            col_val,
        }
    }

    /// `(column indices, values)` of row `i`.
    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.row_idx[r.clone()], &self.row_val[r])
    }

    /// `(row indices, values)` of column `j`.
    fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.col_idx[r.clone()], &self.col_val[r])
    }

    /// Linear predictor on every observed cell, in row-major order.
    fn eta(&self, alpha: &DMatrix<f64>, beta: &DMatrix<f64>, gamma: &[f64]) -> Vec<f64> {
        let k = alpha.ncols();
        let mut out = Vec::with_capacity(self.row_idx.len());
        for i in 0..self.n_rows {
            for &j in self.row(i).0 {
                out.push(gamma[j] + (0..k).map(|r| alpha[(i, r)] * beta[(j, r)]).sum::<f64>());
            }
        }
        out
    }
}

fn compress(
    n_major: usize,
    items: impl Iterator<Item = (usize, usize, f64)> + Clone,
) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut ptr = vec![0usize; n_major + 1];
    for (a, _, _) in items.clone() {
        ptr[a + 1] += 1;
    }
    for a in 0..n_major {
        ptr[a + 1] += ptr[a];
    }
    let total = ptr[n_major];
    let mut idx = vec![0usize; total];
    let mut val = vec![0.0; total];
    let mut next = ptr.clone();
    // Sort minor indices within each major slot for a deterministic order.
    let mut buckets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_major];
    for (a, b, v) in items {
        buckets[a].push((b, v));
    }
    for (a, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_by_key(|&(b, _)| b);
        for &(b, v) in bucket.iter() {
            idx[next[a]] = b;
            val[next[a]] = v;
            next[a] += 1;
        }
    }
    (ptr, idx, val)
}

/// Standard-normal `p x k` starting matrix; entries drawn row by row.
pub fn init_beta(p: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    let mut m = DMatrix::zeros(p, k);
    for j in 0..p {
        for r in 0..k {
            m[(j, r)] = StandardNormal.sample(&mut rng);
        }
    }
    m
}

fn inner_options() -> GlmOptions {
    GlmOptions {
        aliasing: Aliasing::Drop,
        ..GlmOptions::default()
    }
}

/// Working quantities shared by both half-steps.
struct Working<'a> {
    layout: &'a Layout,
    family: FamilySpec,
    /// Per-column `1 / phi_j` used while fitting; `None` means unit dispersion.
    col_weights: Option<Vec<f64>>,
    has_gamma: bool,
    /// Sum over S of the eta-free part of the working log-likelihood.
    constant: f64,
    /// Working log-likelihood of the saturated model.
    saturated: f64,
}

impl<'a> Working<'a> {
    fn new(layout: &'a Layout, family: FamilySpec, variant: ModelVariant) -> Result<Self> {
        let col_phi: Option<Vec<f64>> = if variant == ModelVariant::Correlation {
            let mut v = Vec::with_capacity(layout.n_cols);
            for j in 0..layout.n_cols {
                let (_, x) = layout.col(j);
                let m = x.len() as f64;
                let mean = x.iter().sum::<f64>() / m;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                if !(var > 0.0) {
                    return Err(FpcaError::Validation(format!(
                        "column {j} has zero variance; the correlation variant cannot standardize it"
                    )));
                }
                v.push(var);
            }
            Some(v)
        } else {
            None
        };
        let phi_of = |j: usize| col_phi.as_ref().map_or(1.0, |v| v[j]);
        let mut constant = 0.0;
        let mut saturated = 0.0;
        for j in 0..layout.n_cols {
            let phi = phi_of(j);
            let scale = family.kernel_scale(phi);
            for &x in layout.col(j).1 {
                constant += family.constant_term(x, phi);
                saturated += family.saturated_kernel(x) * scale;
            }
        }
        saturated += constant;
        Ok(Self {
            layout,
            family,
            col_weights: col_phi.map(|v| v.iter().map(|p| 1.0 / p).collect()),
            has_gamma: variant.has_gamma(),
            constant,
            saturated,
        })
    }

    fn weight(&self, j: usize) -> f64 {
        self.col_weights.as_ref().map_or(1.0, |w| w[j])
    }

    /// Solves every row GLM; returns new `alpha` and the summed weighted kernel.
    fn row_step(
        &self,
        beta: &DMatrix<f64>,
        gamma: &[f64],
        start: Option<&DMatrix<f64>>,
    ) -> Result<(DMatrix<f64>, f64)> {
        let k = beta.ncols();
        let opts = inner_options();
        let results: Vec<Result<(Vec<f64>, f64)>> = (0..self.layout.n_rows)
            .into_par_iter()
            .with_min_len(16)
            .map(|i| {
                let (cols, y) = self.layout.row(i);
                let mut x = Vec::with_capacity(cols.len() * k);
                let mut offsets = Vec::with_capacity(cols.len());
                for &j in cols {
                    x.extend((0..k).map(|r| beta[(j, r)]));
                    offsets.push(gamma[j]);
                }
                let weights: Option<Vec<f64>> = self
                    .col_weights
                    .as_ref()
                    .map(|_| cols.iter().map(|&j| self.weight(j)).collect());
                let sub = Subproblem {
                    family: self.family,
                    y,
                    x: &x,
                    d: k,
                    offsets: Some(&offsets),
                    weights: weights.as_deref(),
                };
                let warm: Option<Vec<f64>> = start.map(|a| (0..k).map(|r| a[(i, r)]).collect());
                let sol = sub
                    .optimize(warm.as_deref(), &opts)
                    .map_err(|e| FpcaError::Row { row: i, source: Box::new(e) })?;
                Ok((sol.coefficients, sol.objective))
            })
            .collect();
        let mut alpha = DMatrix::zeros(self.layout.n_rows, k);
        let mut total = 0.0;
        for (i, res) in results.into_iter().enumerate() {
            let (coef, obj) = res?;
            for r in 0..k {
                alpha[(i, r)] = coef[r];
            }
            total += obj;
        }
        Ok((alpha, total))
    }

    /// Solves every column GLM; returns new `(beta, gamma)` and the summed weighted kernel.
    fn col_step(
        &self,
        alpha: &DMatrix<f64>,
        start: Option<(&DMatrix<f64>, &[f64])>,
    ) -> Result<(DMatrix<f64>, Vec<f64>, f64)> {
        let k = alpha.ncols();
        let shift = usize::from(self.has_gamma);
        let d = k + shift;
        let opts = inner_options();
        let results: Vec<Result<(Vec<f64>, f64)>> = (0..self.layout.n_cols)
            .into_par_iter()
            .with_min_len(16)
            .map(|j| {
                let (rows, y) = self.layout.col(j);
                let mut x = Vec::with_capacity(rows.len() * d);
                for &i in rows {
                    if self.has_gamma {
                        x.push(1.0);
                    }
                    x.extend((0..k).map(|r| alpha[(i, r)]));
                }
                let weights: Option<Vec<f64>> =
                    self.col_weights.as_ref().map(|w| vec![w[j]; rows.len()]);
                let sub = Subproblem {
                    family: self.family,
                    y,
                    x: &x,
                    d,
                    offsets: None,
                    weights: weights.as_deref(),
                };
                let warm: Option<Vec<f64>> = start.map(|(b, g)| {
                    let mut v = Vec::with_capacity(d);
                    if self.has_gamma {
                        v.push(g[j]);
                    }
                    v.extend((0..k).map(|r| b[(j, r)]));
                    v
                });
                let sol = sub
                    .optimize(warm.as_deref(), &opts)
                    .map_err(|e| FpcaError::Column { col: j, source: Box::new(e) })?;
                Ok((sol.coefficients, sol.objective))
            })
            .collect();
        let mut beta = DMatrix::zeros(self.layout.n_cols, k);
        let mut gamma = vec![0.0; self.layout.n_cols];
        let mut total = 0.0;
        for (j, res) in results.into_iter().enumerate() {
            let (coef, obj) = res?;
            if self.has_gamma {
                gamma[j] = coef[0];
            }
            for r in 0..k {
                beta[(j, r)] = coef[shift + r];
            }
            total += obj;
        }
        Ok((beta, gamma, total))
    }
}

struct Chain {
    alpha: DMatrix<f64>,
    beta: DMatrix<f64>,
    gamma: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
    half_steps: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn run_chain(work: &Working<'_>, config: &FpcaConfig, seed: u64) -> Result<Chain> {
    let mut beta = init_beta(work.layout.n_cols, config.k, seed);
    let mut gamma = vec![0.0; work.layout.n_cols];
    let mut alpha: Option<DMatrix<f64>> = None;
    let mut trace = Vec::new();
    let mut half_steps = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut eta_prev: Option<Vec<f64>> = None;
    for t in 0..config.max_outer_iter {
        let (a, row_obj) = work.row_step(&beta, &gamma, alpha.as_ref())?;
        half_steps.push(row_obj + work.constant);
        let (b, g, col_obj) = work.col_step(&a, Some((&beta, gamma.as_slice())))?;
        let ll = col_obj + work.constant;
        half_steps.push(ll);
        let settled = match config.fitted_tol {
            None => true,
            Some(f) => {
                let eta = work.layout.eta(&a, &b, &g);
                let settled = eta_prev.as_ref().is_some_and(|prev| {
                    let change: f64 = eta.iter().zip(prev).map(|(x, y)| (x - y) * (x - y)).sum();
                    let size: f64 = eta.iter().map(|x| x * x).sum();
                    change <= f * f * size
                });
                eta_prev = Some(eta);
                settled
            }
        };
        alpha = Some(a);
        beta = b;
        gamma = g;
        iterations = t + 1;
        if let Some(&prev) = trace.last() {
            let gain = ll - prev;
            let half_dev = (work.saturated - ll).max(0.0);
            trace.push(ll);
            if settled && (gain.abs() <= config.tol * half_dev || gain == 0.0) {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
    }
    let alpha = alpha.expect("at least one outer iteration runs");
    if alpha.iter().chain(beta.iter()).chain(gamma.iter()).any(|v| !v.is_finite()) {
        return Err(FpcaError::Validation("fit produced non-finite parameters".into()));
    }
    Ok(Chain {
        alpha,
        beta,
        gamma,
        objective: *trace.last().expect("trace is non-empty"),
        trace,
        half_steps,
        converged,
        iterations,
    })
}

/// Fits rank `config.k` from `config.n_starts` random starts (seeds
/// `config.seed + t`) and keeps the start with the highest log-likelihood.
pub fn fit_fpca(
    s: &ObservationSet,
    variant: ModelVariant,
    family: FamilySpec,
    config: &FpcaConfig,
) -> Result<FpcaFit> {
    config.validate()?;
    variant.check_family(&family)?;
    for e in s.entries() {
        family.check_response(e.value)?;
    }
    let k = config.k;
    if k > s.n_rows().min(s.n_cols()) {
        return Err(invalid(format!(
            "k = {k} exceeds min(n, p) = {}",
            s.n_rows().min(s.n_cols())
        )));
    }
    s.check_coverage(variant.min_coverage(k))?;
    let layout = Layout::new(s);
    let work = Working::new(&layout, family, variant)?;

    let seeds: Vec<u64> = (0..config.n_starts as u64)
        .map(|t| config.seed.wrapping_add(t))
        .collect();
    let chains: Vec<Result<Chain>> = seeds
        .par_iter()
        .map(|&seed| run_chain(&work, config, seed))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for (t, c) in chains.iter().enumerate() {
        if let Ok(c) = c {
            match best {
                Some((_, b)) if c.objective <= b + 1e-10 => {}
                _ => best = Some((t, c.objective)),
            }
        }
    }
    let starts: Vec<StartSummary> = chains
        .iter()
        .zip(&seeds)
        .map(|(c, &seed)| match c {
            Ok(c) => StartSummary {
                seed,
                objective: Some(c.objective),
                error: None,
                iterations: c.iterations,
                converged: c.converged,
                half_step_trace: c.half_steps.clone(),
            },
            Err(e) => StartSummary {
                seed,
                objective: None,
                error: Some(e.to_string()),
                iterations: 0,
                converged: false,
                half_step_trace: Vec::new(),
            },
        })
        .collect();
    let Some((start_index, _)) = best else {
        let msgs = chains
            .into_iter()
            .filter_map(|c| c.err().map(|e| e.to_string()))
            .collect();
        return Err(FpcaError::AllStartsFailed(msgs));
    };
    let chain = chains
        .into_iter()
        .nth(start_index)
        .expect("winner index is in range")
        .expect("winner succeeded");

    let (mut alpha, beta, mut gamma) = (chain.alpha, chain.beta, chain.gamma);
    if variant.has_gamma() {
        center_scores(&mut alpha, &beta, &mut gamma);
    }
    let mut fit = FpcaFit {
        k,
        variant,
        family,
        n_rows: s.n_rows(),
        n_cols: s.n_cols(),
        alpha,
        beta,
        gamma,
        phi: Dispersion::Unit,
        loglik: 0.0,
        deviance: 0.0,
        objective: chain.objective,
        loglik_trace: chain.trace,
        start_index,
        converged: chain.converged,
        iterations: chain.iterations,
        starts,
    };
    fit.phi = estimate_dispersion(s, &fit, variant, family)?;
    fit.loglik = loglik_at(s, &fit, &fit.phi);
    fit.deviance = s
        .entries()
        .iter()
        .map(|e| family.deviance_from_eta(e.value, fit.eta(e.row, e.col)))
        .sum();
    Ok(fit)
}

/// Moves the column means of `alpha` into `gamma`. The fitted predictor is
/// unchanged on every cell; with a full Gaussian grid this puts the column
/// means of the data in `gamma`.
pub fn center_scores(alpha: &mut DMatrix<f64>, beta: &DMatrix<f64>, gamma: &mut [f64]) {
    let n = alpha.nrows();
    if n == 0 {
        return;
    }
    for r in 0..alpha.ncols() {
        let mean = alpha.column(r).sum() / n as f64;
        for i in 0..n {
            alpha[(i, r)] -= mean;
        }
        for (j, g) in gamma.iter_mut().enumerate() {
            *g += beta[(j, r)] * mean;
        }
    }
}

/// Log-likelihood of `fit` over `s` at the given dispersion. A zero dispersion
/// (exact fit) is evaluated at the smallest positive double.
pub fn loglik_at(s: &ObservationSet, fit: &FpcaFit, phi: &Dispersion) -> f64 {
    s.entries()
        .iter()
        .map(|e| {
            let p = phi.for_column(e.col).max(f64::MIN_POSITIVE);
            fit.family.loglik_unchecked(e.value, fit.eta(e.row, e.col), p)
        })
        .sum()
}

/// Moment estimate of the dispersion from the residuals of `fit`.
pub fn estimate_dispersion(
    s: &ObservationSet,
    fit: &FpcaFit,
    variant: ModelVariant,
    family: FamilySpec,
) -> Result<Dispersion> {
    if fit.alpha.iter().chain(fit.beta.iter()).chain(fit.gamma.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("fit contains non-finite parameters"));
    }
    let size = s.len() as f64;
    let df = degrees_of_freedom(fit.k, s.n_rows(), s.n_cols(), variant)? as f64;
    match family.dispersion_structure() {
        DispersionStructure::None => Ok(Dispersion::Unit),
        DispersionStructure::Scalar => {
            let denom = size - df;
            if !(denom > 0.0) {
                return Err(FpcaError::Saturated(format!(
                    "|S| = {size} does not exceed df = {df}"
                )));
            }
            let num: f64 = s
                .entries()
                .iter()
                .map(|e| {
                    let eta = fit.eta(e.row, e.col);
                    let mu = family.mean(eta);
                    let r = e.value - mu;
                    match family.family() {
                        Family::QuasiPoisson => r * r / mu.max(crate::expfam::BOUNDARY_EPS),
                        _ => r * r,
                    }
                })
                .sum();
            let floor = match family.family() {
                Family::Gaussian => dispersion_floor(s.entries().iter().map(|e| e.value)),
                _ => f64::EPSILON,
            };
            Ok(Dispersion::Scalar((num / denom).max(floor)))
        }
        DispersionStructure::PerColumn => {
            let cover = s.col_coverage();
            let mut rss = vec![0.0; s.n_cols()];
            let mut by_col = vec![Vec::new(); s.n_cols()];
            for e in s.entries() {
                let r = e.value - family.mean(fit.eta(e.row, e.col));
                rss[e.col] += r * r;
                by_col[e.col].push(e.value);
            }
            let mut out = Vec::with_capacity(s.n_cols());
            for j in 0..s.n_cols() {
                let c = cover[j] as f64;
                let denom = c - df * c / size;
                if !(denom > 0.0) {
                    return Err(FpcaError::Saturated(format!(
                        "column {j}: effective residual count {denom} is not positive"
                    )));
                }
                out.push((rss[j] / denom).max(dispersion_floor(by_col[j].iter().copied())));
            }
            Ok(Dispersion::PerColumn(out))
        }
    }
}

/// Smallest reportable Gaussian variance: machine epsilon times the mean
/// square of the data. Residuals below this level are rounding noise, and
/// scoring candidates at a smaller variance would rank them by that noise.
fn dispersion_floor(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        count += 1;
    }
    let ms = if count == 0 { 0.0 } else { sum / count as f64 };
    (f64::EPSILON * ms).max(f64::MIN_POSITIVE)
}

/// One row half-step with unit working dispersion: each row's GLM with
/// covariates `beta_j` and offsets `gamma_j`.
pub fn row_step(
    s: &ObservationSet,
    beta: &DMatrix<f64>,
    gamma: &[f64],
    family: FamilySpec,
) -> Result<DMatrix<f64>> {
    check_shapes(s, beta.nrows(), gamma.len())?;
    if beta.iter().chain(gamma).any(|v| !v.is_finite()) {
        return Err(invalid("beta and gamma must be finite"));
    }
    let layout = Layout::new(s);
    let work = Working::new(&layout, family, ModelVariant::Simple)?;
    Ok(work.row_step(beta, gamma, None)?.0)
}

/// One column half-step: each column's GLM with covariates `alpha_i`, plus an
/// intercept `gamma_j` when the variant has one.
pub fn col_step(
    s: &ObservationSet,
    alpha: &DMatrix<f64>,
    variant: ModelVariant,
    family: FamilySpec,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if alpha.nrows() != s.n_rows() {
        return Err(FpcaError::DimensionMismatch(format!(
            "alpha has {} rows, grid has {}",
            alpha.nrows(),
            s.n_rows()
        )));
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(invalid("alpha must be finite"));
    }
    let layout = Layout::new(s);
    let work = Working::new(&layout, family, variant)?;
    let (beta, gamma, _) = work.col_step(alpha, None)?;
    Ok((beta, gamma))
}

fn check_shapes(s: &ObservationSet, beta_rows: usize, gamma_len: usize) -> Result<()> {
    if beta_rows != s.n_cols() || gamma_len != s.n_cols() {
        return Err(FpcaError::DimensionMismatch(format!(
            "beta has {beta_rows} rows and gamma {gamma_len} entries for {} columns",
            s.n_cols()
        )));
    }
    Ok(())
}
