//! Monte Carlo harness: data from the covariance model
//!
//! ```text
//! x_ij = mu_j + sum_r alpha_ir beta_jr + eps_ij
//! mu_j ~ N(mu_mean, mu_sd^2),  alpha_ir, beta_jr ~ N(0, 1),  eps_ij ~ N(0, noise_sd^2)
//! ```
//!
//! with each cell hidden independently with probability `tau`. Every
//! replication draws from its own seed, so a report does not depend on the
//! order or the thread count in which replications run.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aglm::{fit_fpca, FpcaConfig, FpcaFit, ModelVariant};
use crate::dataset::{apply_missing_mechanism, ObservationSet};
use crate::error::{invalid, FpcaError, Result};
use crate::expfam::FamilySpec;
use crate::rng::{derive_seed, seeded};
use crate::selection::{fit_candidates, gic_from_fits, select_k_cv, SelectionRule};

/// Attempts at drawing a mask that leaves enough cells in every row and column.
pub const MAX_MASK_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    pub p: usize,
    pub k_true: usize,
    pub tau: f64,
    pub noise_sd: f64,
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub n_replications: usize,
    pub seed: u64,
    /// Observations every row and column of the masked set must keep.
    pub min_coverage: usize,
    pub cv_q: f64,
    pub cv_reps: usize,
}

impl SimDesign {
    pub fn new(n: usize, p: usize, k_true: usize, tau: f64) -> Self {
        Self {
            n,
            p,
            k_true,
            tau,
            noise_sd: 0.1,
            mu_mean: 0.5,
            mu_sd: 2.0,
            n_replications: 100,
            seed: 0,
            min_coverage: (k_true + 4).min(n.min(p)),
            cv_q: 0.2,
            cv_reps: 10,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replications(mut self, n_replications: usize) -> Self {
        self.n_replications = n_replications;
        self
    }

    pub fn with_noise_sd(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    /// `1..=k_true + 2`, capped at `min(n, p)`.
    pub fn default_candidates(&self) -> Vec<usize> {
        (1..=(self.k_true + 2).min(self.n.min(self.p))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if self.k_true == 0 || self.k_true > self.n.min(self.p) {
            return Err(invalid(format!("k_true must lie in 1..={}", self.n.min(self.p))));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(invalid("tau must lie in [0, 1)"));
        }
        if !(self.noise_sd >= 0.0) || !(self.mu_sd >= 0.0) || !self.mu_mean.is_finite() {
            return Err(invalid("noise_sd and mu_sd must be non-negative, mu_mean finite"));
        }
        if self.n_replications == 0 {
            return Err(invalid("n_replications must be at least 1"));
        }
        if !(self.cv_q > 0.0 && self.cv_q < 1.0) || self.cv_reps == 0 {
            return Err(invalid("cv_q must lie in (0, 1) and cv_reps be at least 1"));
        }
        Ok(())
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, replication: usize) -> u64 {
        derive_seed(self.seed, replication as u64)
    }
}

/// Generating parameters of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub mu: Vec<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub full: ObservationSet,
    pub masked: ObservationSet,
    pub truth: SimTruth,
}

impl SimData {
    /// Cells of the full grid that the mask removed.
    pub fn hidden(&self) -> Vec<(usize, usize, f64)> {
        let kept: HashSet<(usize, usize)> =
            self.masked.entries().iter().map(|e| (e.row, e.col)).collect();
        self.full
            .entries()
            .iter()
            .filter(|e| !kept.contains(&(e.row, e.col)))
            .map(|e| (e.row, e.col, e.value))
            .collect()
    }
}

/// Draws replication `replication` of `design`. Values are drawn in the order
/// `mu`, `alpha` (row by row), `beta` (row by row), noise (row by row).
pub fn generate_dataset(design: &SimDesign, replication: usize) -> Result<SimData> {
    design.validate()?;
    let (n, p, k) = (design.n, design.p, design.k_true);
    let seed = design.replication_seed(replication);
    let mut rng = seeded(seed);
    let normal = |mean: f64, sd: f64| Normal::new(mean, sd).map_err(|e| invalid(e.to_string()));
    let mu_dist = normal(design.mu_mean, design.mu_sd)?;
    let noise = normal(0.0, design.noise_sd)?;
    let mu: Vec<f64> = (0..p).map(|_| mu_dist.sample(&mut rng)).collect();
    let mut alpha = DMatrix::zeros(n, k);
    for i in 0..n {
        for r in 0..k {
            alpha[(i, r)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut beta = DMatrix::zeros(p, k);
    for j in 0..p {
        for r in 0..k {
            beta[(j, r)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut values = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            let signal: f64 = (0..k).map(|r| alpha[(i, r)] * beta[(j, r)]).sum();
            values.push(mu[j] + signal + noise.sample(&mut rng));
        }
    }
    let full = ObservationSet::from_dense(n, p, &values)?;
    let mut last = None;
    for attempt in 0..MAX_MASK_DRAWS {
        let masked = apply_missing_mechanism(&full, design.tau, derive_seed(seed, 1 + attempt as u64))?;
        match masked.check_coverage(design.min_coverage) {
            Ok(()) => {
                return Ok(SimData {
                    full,
                    masked,
                    truth: SimTruth { mu, alpha, beta },
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(FpcaError::Coverage(format!(
        "no mask met coverage {} after {MAX_MASK_DRAWS} draws ({})",
        design.min_coverage,
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: String,
    pub chosen_k: usize,
    pub correct: bool,
    /// Root mean squared error over the hidden cells at the chosen rank.
    pub rmsep_hidden: f64,
    /// Root mean test deviance per cell at the chosen rank (cross-validation only).
    pub rmsep_cv_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub n_hidden: usize,
    pub outcomes: Vec<RuleOutcome>,
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: String,
    /// Correct selections over all replications; failed replications count as incorrect.
    pub percent_correct: f64,
    /// Mean over the successful replications.
    pub mean_rmsep_hidden: Option<f64>,
    pub sd_rmsep_hidden: Option<f64>,
    pub mean_rmsep_cv_test: Option<f64>,
    pub replications: usize,
    pub failures: usize,
    /// How often each rank was chosen.
    pub chosen_k_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: SimDesign,
    pub candidates: Vec<usize>,
    pub rules: Vec<String>,
    pub summary: Vec<RuleSummary>,
    pub replications: Vec<ReplicationRecord>,
}

impl SimReport {
    pub fn rule(&self, name: &str) -> Option<&RuleSummary> {
        self.summary.iter().find(|s| s.rule == name)
    }

    /// One row per rule, in the layout of the recovery and RMSEP tables.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| FpcaError::Io(e.into());
        w.write_record([
            "tau",
            "n",
            "p",
            "k_true",
            "rule",
            "percent_correct",
            "mean_rmsep_hidden",
            "mean_rmsep_cv_test",
            "replications",
            "failures",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for s in &self.summary {
            w.write_record([
                format!("{:?}", self.design.tau),
                self.design.n.to_string(),
                self.design.p.to_string(),
                self.design.k_true.to_string(),
                s.rule.clone(),
                format!("{:?}", s.percent_correct),
                opt(s.mean_rmsep_hidden),
                opt(s.mean_rmsep_cv_test),
                s.replications.to_string(),
                s.failures.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rmsep(fit: &FpcaFit, hidden: &[(usize, usize, f64)]) -> f64 {
    if hidden.is_empty() {
        return 0.0;
    }
    let sse: f64 = hidden
        .iter()
        .map(|&(i, j, x)| {
            let r = x - fit.mean(i, j);
            r * r
        })
        .sum();
    (sse / hidden.len() as f64).sqrt()
}

fn run_replication(
    design: &SimDesign,
    replication: usize,
    rules: &[SelectionRule],
    candidates: &[usize],
    config: &FpcaConfig,
) -> Result<ReplicationRecord> {
    let data = generate_dataset(design, replication)?;
    let seed = design.replication_seed(replication);
    let cfg = FpcaConfig {
        seed: derive_seed(seed, 0x5eed),
        ..*config
    };
    let variant = ModelVariant::Covariance;
    let family = FamilySpec::gaussian();
    let hidden = data.hidden();
    let mut warnings = Vec::new();
    let mut cache: BTreeMap<usize, FpcaFit> = BTreeMap::new();

    let gic_fits = if rules.iter().any(|r| matches!(r, SelectionRule::Gic(_))) {
        let fits = fit_candidates(&data.masked, variant, family, candidates, None, &cfg)?;
        warnings.extend(fits.warnings.iter().cloned());
        for f in &fits.fits {
            cache.insert(f.k, f.clone());
        }
        Some(fits)
    } else {
        None
    };

    let mut outcomes = Vec::with_capacity(rules.len());
    for rule in rules {
        let (chosen_k, cv_rmsep) = match rule {
            SelectionRule::Gic(kappa) => {
                let fits = gic_fits.as_ref().expect("fitted above");
                (gic_from_fits(&data.masked, variant, fits, *kappa)?.chosen_k, None)
            }
            SelectionRule::Cv => {
                let cv = select_k_cv(&data.masked, variant, family, candidates, design.cv_q, design.cv_reps, &cfg)?;
                let row = cv.table.iter().find(|r| r.k == cv.chosen_k).expect("chosen rank is in the table");
                let cells: usize = cv.test_sizes.iter().sum();
                let total: f64 = row.g2_test.iter().sum();
                (cv.chosen_k, Some((total / cells as f64).sqrt()))
            }
        };
        if !cache.contains_key(&chosen_k) {
            let fit = fit_fpca(&data.masked, variant, family, &FpcaConfig { k: chosen_k, ..cfg })?;
            cache.insert(chosen_k, fit);
        }
        outcomes.push(RuleOutcome {
            rule: rule.name(),
            chosen_k,
            correct: chosen_k == design.k_true,
            rmsep_hidden: rmsep(&cache[&chosen_k], &hidden),
            rmsep_cv_test: cv_rmsep,
        });
    }
    Ok(ReplicationRecord {
        replication,
        seed,
        n_hidden: hidden.len(),
        outcomes,
        error: None,
        warnings,
    })
}

/// Runs every replication of `design`, scoring each rule on the same data.
/// Fits are Gaussian with the covariance variant; candidate fits are shared
/// between the penalized rules.
pub fn run_simulation(
    design: &SimDesign,
    rules: &[SelectionRule],
    candidates: &[usize],
    config: &FpcaConfig,
) -> Result<SimReport> {
    design.validate()?;
    if rules.is_empty() {
        return Err(invalid("at least one rule is required"));
    }
    if !candidates.contains(&design.k_true) {
        return Err(invalid(format!("candidates {candidates:?} must include k_true = {}", design.k_true)));
    }
    let records: Vec<ReplicationRecord> = (0..design.n_replications)
        .into_par_iter()
        .map(|r| {
            run_replication(design, r, rules, candidates, config).unwrap_or_else(|e| ReplicationRecord {
                replication: r,
                seed: design.replication_seed(r),
                n_hidden: 0,
                outcomes: Vec::new(),
                error: Some(e.to_string()),
                warnings: Vec::new(),
            })
        })
        .collect();

    let summary = rules
        .iter()
        .map(|rule| {
            let name = rule.name();
            let outcomes: Vec<&RuleOutcome> = records
                .iter()
                .filter_map(|rec| rec.outcomes.iter().find(|o| o.rule == name))
                .collect();
            let failures = records.len() - outcomes.len();
            let correct = outcomes.iter().filter(|o| o.correct).count();
            let mut counts = BTreeMap::new();
            for o in &outcomes {
                *counts.entry(o.chosen_k).or_insert(0) += 1;
            }
            let hidden: Vec<f64> = outcomes.iter().map(|o| o.rmsep_hidden).collect();
            let cv: Vec<f64> = outcomes.iter().filter_map(|o| o.rmsep_cv_test).collect();
            RuleSummary {
                rule: name,
                percent_correct: 100.0 * correct as f64 / records.len() as f64,
                mean_rmsep_hidden: mean(&hidden),
                sd_rmsep_hidden: sd(&hidden),
                mean_rmsep_cv_test: mean(&cv),
                replications: records.len(),
                failures,
                chosen_k_counts: counts,
            }
        })
        .collect();
    Ok(SimReport {
        design: design.clone(),
        candidates: candidates.to_vec(),
        rules: rules.iter().map(SelectionRule::name).collect(),
        summary,
        replications: records,
    })
}

/// Rank-recovery study: how often each rule picks `k_true`.
pub fn run_k_recovery(
    design: &SimDesign,
    rules: &[SelectionRule],
    candidates: &[usize],
) -> Result<SimReport> {
    run_simulation(design, rules, candidates, &FpcaConfig::new(1))
}

/// Hidden-cell prediction error at the rank chosen by `rule`.
pub fn run_rmsep(design: &SimDesign, rule: SelectionRule) -> Result<SimReport> {
    run_simulation(design, &[rule], &design.default_candidates(), &FpcaConfig::new(1))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}
