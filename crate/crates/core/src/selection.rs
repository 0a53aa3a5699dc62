//! Rank selection by penalized likelihood and by train/test cross-validation.
//!
//! The penalized criterion is `GIC(k) = -2 loglik_k + kappa * df_k`, with
//! `kappa = 2` for AIC and `kappa = log |S|` for BIC. When the family carries a
//! dispersion parameter, every candidate is scored at one shared estimate taken
//! from a deliberately over-ranked reference fit.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aglm::{fit_fpca, loglik_at, Dispersion, FpcaConfig, FpcaFit, ModelVariant};
use crate::dataset::{random_split_with_coverage, ObservationSet};
use crate::error::{invalid, FpcaError, Result};
use crate::expfam::FamilySpec;

/// Slack allowed when checking that larger ranks do not lower the likelihood.
pub const MONOTONE_SLACK: f64 = 1e-6;

/// Mean test deviances within this fraction of the largest one are tied.
pub const CV_TIE_TOL: f64 = 1e-10;

/// Free parameters of a rank-`k` fit: `k(n + p - k)`, plus `p` when the
/// variant has column offsets.
pub fn degrees_of_freedom(k: usize, n: usize, p: usize, variant: ModelVariant) -> Result<usize> {
    if k > n.min(p) {
        return Err(invalid(format!("k = {k} exceeds min(n, p) = {}", n.min(p))));
    }
    let base = k * (n + p - k);
    Ok(if variant.has_gamma() { base + p } else { base })
}

pub fn gic(loglik: f64, kappa: f64, df: usize) -> f64 {
    -2.0 * loglik + kappa * df as f64
}

/// Penalty weight of a GIC rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "kappa")]
pub enum KappaRule {
    Aic,
    Bic,
    Custom(f64),
}

impl KappaRule {
    pub fn kappa(self, n_obs: usize) -> f64 {
        match self {
            KappaRule::Aic => 2.0,
            KappaRule::Bic => (n_obs as f64).ln(),
            KappaRule::Custom(k) => k,
        }
    }
}

/// Any rank-selection rule accepted by the CLI and the simulation harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionRule {
    Gic(KappaRule),
    Cv,
}

impl SelectionRule {
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionRule::Gic(KappaRule::Aic) => f.write_str("aic"),
            SelectionRule::Gic(KappaRule::Bic) => f.write_str("bic"),
            SelectionRule::Gic(KappaRule::Custom(k)) => write!(f, "gic:{k}"),
            SelectionRule::Cv => f.write_str("cv"),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "aic" => Ok(SelectionRule::Gic(KappaRule::Aic)),
            "bic" => Ok(SelectionRule::Gic(KappaRule::Bic)),
            "cv" => Ok(SelectionRule::Cv),
            other => {
                let Some(rest) = other.strip_prefix("gic:") else {
                    return Err(invalid(format!(
                        "unknown rule '{s}' (expected bic, aic, gic:<kappa> or cv)"
                    )));
                };
                let kappa: f64 = rest
                    .parse()
                    .map_err(|_| invalid(format!("bad kappa in '{s}'")))?;
                if !(kappa > 0.0) || !kappa.is_finite() {
                    return Err(invalid("kappa must be positive"));
                }
                Ok(SelectionRule::Gic(KappaRule::Custom(kappa)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GicRow {
    pub k: usize,
    pub loglik: f64,
    pub df: usize,
    pub gic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GicResult {
    pub rule: String,
    pub kappa: f64,
    /// Shared dispersion used for every row; `None` for families without one.
    pub phi_reference: Option<Dispersion>,
    pub k_ref: Option<usize>,
    pub table: Vec<GicRow>,
    pub chosen_k: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub k: usize,
    pub mean_g2_test: f64,
    pub g2_test: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub q: f64,
    pub n_repetitions: usize,
    /// Seed of the accepted split in each repetition.
    pub split_seeds: Vec<u64>,
    /// Number of test cells in each repetition.
    pub test_sizes: Vec<usize>,
    pub table: Vec<CvRow>,
    pub chosen_k: usize,
}

/// Largest rank whose coverage requirement `s` meets.
pub fn coverage_bound(s: &ObservationSet, variant: ModelVariant) -> usize {
    let cover = s.min_coverage();
    let slack = variant.min_coverage(0);
    cover.saturating_sub(slack).min(s.n_rows().min(s.n_cols()))
}

/// `1..=min(10, coverage bound)`.
pub fn default_candidates(s: &ObservationSet, variant: ModelVariant) -> Vec<usize> {
    (1..=coverage_bound(s, variant).min(10)).collect()
}

/// `max(candidates) + 2`, capped by the coverage bound.
pub fn default_k_ref(s: &ObservationSet, variant: ModelVariant, candidates: &[usize]) -> usize {
    let top = candidates.iter().copied().max().unwrap_or(1);
    (top + 2).min(coverage_bound(s, variant)).max(top)
}

/// Candidate fits plus the log-likelihood each one is scored with.
#[derive(Debug, Clone)]
pub struct CandidateFits {
    pub fits: Vec<FpcaFit>,
    /// Log-likelihood of each fit, at the shared dispersion when there is one.
    pub logliks: Vec<f64>,
    pub phi_reference: Option<Dispersion>,
    pub k_ref: Option<usize>,
    pub warnings: Vec<String>,
}

fn check_candidates(candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(invalid("candidate list is empty"));
    }
    if candidates.contains(&0) {
        return Err(invalid("candidate ranks must be at least 1"));
    }
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

fn fit_candidate(
    s: &ObservationSet,
    variant: ModelVariant,
    family: FamilySpec,
    k: usize,
    config: &FpcaConfig,
) -> Result<FpcaFit> {
    let cfg = FpcaConfig { k, ..*config };
    fit_fpca(s, variant, family, &cfg).map_err(|e| FpcaError::Candidate {
        k,
        source: Box::new(e),
    })
}

/// Fits every candidate rank (and the reference rank when the family has a
/// dispersion parameter) and scores them on a common footing.
///
/// A candidate whose likelihood falls more than [`MONOTONE_SLACK`] below the
/// next smaller candidate is refitted once with twice as many starts, and a
/// warning is recorded.
pub fn fit_candidates(
    s: &ObservationSet,
    variant: ModelVariant,
    family: FamilySpec,
    candidates: &[usize],
    k_ref: Option<usize>,
    config: &FpcaConfig,
) -> Result<CandidateFits> {
    let ks = check_candidates(candidates)?;
    let k_ref = if family.has_dispersion() {
        let kr = k_ref.unwrap_or_else(|| default_k_ref(s, variant, &ks));
        if kr < *ks.last().expect("non-empty") {
            return Err(invalid(format!(
                "k_ref = {kr} is smaller than the largest candidate {}",
                ks.last().expect("non-empty")
            )));
        }
        Some(kr)
    } else {
        None
    };

    let mut jobs: Vec<usize> = ks.clone();
    if let Some(kr) = k_ref {
        if !ks.contains(&kr) {
            jobs.push(kr);
        }
    }
    let results: Vec<Result<FpcaFit>> = jobs
        .par_iter()
        .map(|&k| fit_candidate(s, variant, family, k, config))
        .collect();
    let mut all = Vec::with_capacity(results.len());
    for r in results {
        all.push(r?);
    }
    let phi_reference = k_ref.map(|kr| {
        all.iter()
            .find(|f| f.k == kr)
            .expect("reference rank was fitted")
            .phi
            .clone()
    });
    all.truncate(ks.len());
    let mut fits = all;

    let score = |fit: &FpcaFit| match &phi_reference {
        Some(phi) => loglik_at(s, fit, phi),
        None => fit.loglik,
    };
    let mut logliks: Vec<f64> = fits.iter().map(score).collect();
    let mut warnings = Vec::new();
    for idx in 1..fits.len() {
        if logliks[idx] < logliks[idx - 1] - MONOTONE_SLACK {
            let k = fits[idx].k;
            warnings.push(format!(
                "log-likelihood at k={k} ({:.6}) is below k={} ({:.6}); refitting with {} starts",
                logliks[idx],
                fits[idx - 1].k,
                logliks[idx - 1],
                config.n_starts * 2
            ));
            let retry_cfg = FpcaConfig {
                n_starts: config.n_starts * 2,
                ..*config
            };
            let retry = fit_candidate(s, variant, family, k, &retry_cfg)?;
            let ll = score(&retry);
            if ll > logliks[idx] {
                logliks[idx] = ll;
                fits[idx] = retry;
            }
            if logliks[idx] < logliks[idx - 1] - MONOTONE_SLACK {
                warnings.push(format!("k={k} is still below k={} after the retry", fits[idx - 1].k));
            }
        }
    }
    Ok(CandidateFits {
        fits,
        logliks,
        phi_reference,
        k_ref,
        warnings,
    })
}

/// Scores already-fitted candidates with a GIC rule.
pub fn gic_from_fits(
    s: &ObservationSet,
    variant: ModelVariant,
    fits: &CandidateFits,
    rule: KappaRule,
) -> Result<GicResult> {
    let kappa = rule.kappa(s.len());
    if !(kappa > 0.0) {
        return Err(invalid("kappa must be positive"));
    }
    let mut table = Vec::with_capacity(fits.fits.len());
    for (fit, &loglik) in fits.fits.iter().zip(&fits.logliks) {
        let df = degrees_of_freedom(fit.k, s.n_rows(), s.n_cols(), variant)?;
        table.push(GicRow {
            k: fit.k,
            loglik,
            df,
            gic: gic(loglik, kappa, df),
        });
    }
    let chosen_k = argmin(table.iter().map(|r| (r.k, r.gic)));
    Ok(GicResult {
        rule: SelectionRule::Gic(rule).name(),
        kappa,
        phi_reference: fits.phi_reference.clone(),
        k_ref: fits.k_ref,
        table,
        chosen_k,
        warnings: fits.warnings.clone(),
    })
}

/// First `k` attaining the minimum value; NaN scores never win.
fn argmin(rows: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut first = None;
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in rows {
        first.get_or_insert(k);
        if !v.is_nan() && best.map_or(true, |(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|b| b.0).or(first).expect("at least one candidate")
}

pub fn select_k_gic(
    s: &ObservationSet,
    variant: ModelVariant,
    family: FamilySpec,
    candidates: &[usize],
    rule: KappaRule,
    k_ref: Option<usize>,
    config: &FpcaConfig,
) -> Result<GicResult> {
    let fits = fit_candidates(s, variant, family, candidates, k_ref, config)?;
    gic_from_fits(s, variant, &fits, rule)
}

/// Repeated train/test cross-validation. Repetition `r` splits with seed
/// `config.seed + r`; each candidate is fitted on the training cells and scored
/// by the summed deviance of the test cells.
pub fn select_k_cv(
    s: &ObservationSet,
    variant: ModelVariant,
    family: FamilySpec,
    candidates: &[usize],
    q: f64,
    n_repetitions: usize,
    config: &FpcaConfig,
) -> Result<CvResult> {
    let ks = check_candidates(candidates)?;
    if n_repetitions == 0 {
        return Err(invalid("n_repetitions must be at least 1"));
    }
    let need = variant.min_coverage(*ks.last().expect("non-empty"));
    let splits = (0..n_repetitions as u64)
        .map(|r| random_split_with_coverage(s, q, config.seed.wrapping_add(r), need))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(usize, usize)> = (0..n_repetitions)
        .flat_map(|r| ks.iter().map(move |&k| (r, k)))
        .collect();
    let scores: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(r, k)| {
            let split = &splits[r];
            let fit = fit_candidate(&split.train, variant, family, k, config)?;
            Ok(split
                .test
                .entries()
                .iter()
                .map(|e| family.deviance_from_eta(e.value, fit.eta(e.row, e.col)))
                .sum())
        })
        .collect();
    let mut g2 = vec![vec![0.0; n_repetitions]; ks.len()];
    for (&(r, k), v) in tasks.iter().zip(scores) {
        let idx = ks.iter().position(|&c| c == k).expect("task rank is a candidate");
        g2[idx][r] = v?;
    }
    let table: Vec<CvRow> = ks
        .iter()
        .zip(g2)
        .map(|(&k, g2_test)| CvRow {
            k,
            mean_g2_test: g2_test.iter().sum::<f64>() / n_repetitions as f64,
            g2_test,
        })
        .collect();
    // Scores that differ by rounding only (exact low-rank data) count as ties,
    // which go to the smaller rank.
    let best = table.iter().map(|r| r.mean_g2_test).fold(f64::INFINITY, f64::min);
    let worst = table.iter().map(|r| r.mean_g2_test).fold(0.0, f64::max);
    let chosen_k = table
        .iter()
        .find(|r| r.mean_g2_test <= best + CV_TIE_TOL * worst)
        .map_or_else(|| argmin(table.iter().map(|r| (r.k, r.mean_g2_test))), |r| r.k);
    Ok(CvResult {
        q,
        n_repetitions,
        split_seeds: splits.iter().map(|s| s.seed).collect(),
        test_sizes: splits.iter().map(|s| s.test.len()).collect(),
        table,
        chosen_k,
    })
}
