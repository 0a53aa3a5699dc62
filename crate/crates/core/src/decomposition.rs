//! Identifiable summaries of a fit: orthonormal components, explained deviance,
//! and predictions for arbitrary cells.
//!
//! The factors `alpha`, `beta` of a fit are only defined up to an invertible
//! `k x k` transform, but their product is not. Components are therefore read
//! off the singular value decomposition of `alpha * beta^T`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::aglm::{center_scores, FpcaFit, ModelVariant};
use crate::dataset::ObservationSet;
use crate::error::{FpcaError, Result};
use crate::expfam::FamilySpec;

/// Components whose scale is below this fraction of the largest are dropped.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `n x k`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `p x k`, orthonormal columns.
    pub v: DMatrix<f64>,
    /// Non-increasing positive scales.
    pub d: Vec<f64>,
    pub gamma: Vec<f64>,
    pub variant: ModelVariant,
}

impl Decomposition {
    pub fn k(&self) -> usize {
        self.d.len()
    }

    /// `u * diag(d)`, the component scores.
    pub fn scores(&self) -> DMatrix<f64> {
        let mut s = self.u.clone();
        for (r, &d) in self.d.iter().enumerate() {
            s.column_mut(r).scale_mut(d);
        }
        s
    }

    /// Linear predictor using only the leading `m` components.
    pub fn eta(&self, row: usize, col: usize, m: usize) -> f64 {
        self.gamma[col]
            + (0..m.min(self.k()))
                .map(|r| self.d[r] * self.u[(row, r)] * self.v[(col, r)])
                .sum::<f64>()
    }
}

/// Compact SVD of `alpha * beta^T`, computed from thin QR factors of `alpha`
/// and `beta` and the SVD of the small `k x k` core. Each `u_r` is signed so
/// that its largest-magnitude entry (first one on ties) is positive.
pub fn orthogonalize(fit: &FpcaFit) -> Result<Decomposition> {
    if fit.alpha.iter().chain(fit.beta.iter()).any(|v| !v.is_finite()) {
        return Err(FpcaError::Validation("fit contains non-finite factors".into()));
    }
    let mut alpha = fit.alpha.clone();
    let mut gamma = fit.gamma.clone();
    if fit.variant.has_gamma() {
        center_scores(&mut alpha, &fit.beta, &mut gamma);
    }
    let qa = alpha.clone().qr();
    let qb = fit.beta.clone().qr();
    let core = qa.r() * qb.r().transpose();
    let svd = core.svd(true, true);
    let w = svd.u.expect("left vectors requested");
    let zt = svd.v_t.expect("right vectors requested");
    let u_all = qa.q() * w;
    let v_all = qb.q() * zt.transpose();

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let d1 = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    if !(d1 > 0.0) {
        return Err(FpcaError::NullDecomposition);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] >= RANK_TOL * d1)
        .collect();

    let (n, p, k) = (alpha.nrows(), fit.beta.nrows(), keep.len());
    let mut u = DMatrix::zeros(n, k);
    let mut v = DMatrix::zeros(p, k);
    let mut d = Vec::with_capacity(k);
    for (r, &c) in keep.iter().enumerate() {
        let mut lead = 0;
        for i in 1..n {
            if u_all[(i, c)].abs() > u_all[(lead, c)].abs() {
                lead = i;
            }
        }
        let sign = if u_all[(lead, c)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            u[(i, r)] = sign * u_all[(i, c)];
        }
        for j in 0..p {
            v[(j, r)] = sign * v_all[(j, c)];
        }
        d.push(svd.singular_values[c]);
    }
    Ok(Decomposition {
        u,
        v,
        d,
        gamma,
        variant: fit.variant,
    })
}

/// Deviance explained by nested reconstructions with `m = 0..=k` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedReport {
    /// Deviance of the intercept-only model: one grand mean for the simple
    /// variant, one mean per column otherwise.
    pub null_deviance: f64,
    /// `deviance[m]` for `m = 1..=k` at index `m - 1`.
    pub deviance: Vec<f64>,
    /// `cumulative[m] = 1 - D_m / D_0`, with `cumulative[0] = 0`.
    pub cumulative: Vec<f64>,
    /// `cumulative[m] - cumulative[m - 1]` for `m = 1..=k`.
    pub increments: Vec<f64>,
    /// Whether `D_m` is non-increasing in `m`.
    pub monotone: bool,
}

pub fn explained_g2(
    s: &ObservationSet,
    decomp: &Decomposition,
    family: FamilySpec,
) -> Result<ExplainedReport> {
    if s.n_rows() != decomp.u.nrows() || s.n_cols() != decomp.v.nrows() {
        return Err(FpcaError::DimensionMismatch(format!(
            "decomposition is {}x{}, data grid is {}x{}",
            decomp.u.nrows(),
            decomp.v.nrows(),
            s.n_rows(),
            s.n_cols()
        )));
    }
    if s.is_empty() {
        return Err(FpcaError::NoObservations);
    }
    for e in s.entries() {
        family.check_response(e.value)?;
    }
    let null_eta: Vec<f64> = if decomp.variant.has_gamma() {
        let mut sum = vec![0.0; s.n_cols()];
        let mut count = vec![0usize; s.n_cols()];
        for e in s.entries() {
            sum[e.col] += e.value;
            count[e.col] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(&t, &c)| if c == 0 { 0.0 } else { family.link_clamped(t / c as f64) })
            .collect()
    } else {
        let mean = s.entries().iter().map(|e| e.value).sum::<f64>() / s.len() as f64;
        vec![family.link_clamped(mean); s.n_cols()]
    };
    let null_deviance: f64 = s
        .entries()
        .iter()
        .map(|e| family.deviance_from_eta(e.value, null_eta[e.col]))
        .sum();
    if !(null_deviance > 0.0) {
        return Err(FpcaError::DegenerateNull);
    }
    let k = decomp.k();
    let deviance: Vec<f64> = (1..=k)
        .map(|m| {
            s.entries()
                .iter()
                .map(|e| family.deviance_from_eta(e.value, decomp.eta(e.row, e.col, m)))
                .sum()
        })
        .collect();
    let mut cumulative = vec![0.0];
    cumulative.extend(deviance.iter().map(|dm| 1.0 - dm / null_deviance));
    let increments = cumulative.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = deviance.windows(2).all(|w| w[1] <= w[0]);
    Ok(ExplainedReport {
        null_deviance,
        deviance,
        cumulative,
        increments,
        monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedCell {
    pub row: usize,
    pub col: usize,
    pub eta: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub cells: Vec<PredictedCell>,
}

/// Fitted predictor and mean for each requested cell, observed or not.
pub fn predict_cells(fit: &FpcaFit, cells: &[(usize, usize)]) -> Result<PredictionSet> {
    let mut out = Vec::with_capacity(cells.len());
    for &(row, col) in cells {
        if row >= fit.n_rows || col >= fit.n_cols {
            return Err(FpcaError::IndexOutOfRange {
                row,
                col,
                n_rows: fit.n_rows,
                n_cols: fit.n_cols,
            });
        }
        let eta = fit.eta(row, col);
        out.push(PredictedCell {
            row,
            col,
            eta,
            mu: fit.family.mean(eta),
        });
    }
    Ok(PredictionSet { cells: out })
}

/// Every cell of the grid, row by row.
pub fn all_cells(n_rows: usize, n_cols: usize) -> Vec<(usize, usize)> {
    (0..n_rows)
        .flat_map(|i| (0..n_cols).map(move |j| (i, j)))
        .collect()
}
