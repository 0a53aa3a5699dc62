//! Low-rank exponential-family decomposition of data observed on an arbitrary
//! subset of an `n x p` grid.
//!
//! The model links each observed cell to a rank-`k` predictor,
//! `g(mu_ij) = gamma_j + sum_r alpha_ir beta_jr`, and is fitted by alternating
//! row-wise and column-wise GLMs. Around the fitter sit rank selection
//! ([`selection`]), identifiable reporting and prediction ([`decomposition`]),
//! and a simulation harness ([`simulate`]).
//!
//! ```
//! use fpca::{fit_fpca, FamilySpec, FpcaConfig, ModelVariant, ObservationSet};
//!
//! let x = [1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0];
//! let s = ObservationSet::from_dense(3, 3, &x).unwrap();
//! let fit = fit_fpca(&s, ModelVariant::Simple, FamilySpec::gaussian(), &FpcaConfig::new(1)).unwrap();
//! assert!(fit.deviance < 1e-12);
//! ```

pub mod aglm;
pub mod cli;
pub mod dataset;
pub mod decomposition;
pub mod error;
pub mod expfam;
pub mod glm;
pub mod rng;
pub mod selection;
pub mod simulate;

#[cfg(test)]
mod test_support;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}

pub use aglm::{col_step, estimate_dispersion, fit_fpca, init_beta, row_step, Dispersion, FpcaConfig, FpcaFit, ModelVariant};
pub use dataset::{ObservationSet, Rect, SplitSet};
pub use decomposition::{explained_g2, orthogonalize, predict_cells, Decomposition, ExplainedReport, PredictionSet};
pub use error::{FpcaError, Result};
pub use expfam::{DispersionStructure, Family, FamilySpec};
pub use glm::{fit_glm, predict_eta, GlmFit, GlmProblem};
pub use selection::{degrees_of_freedom, gic, select_k_cv, select_k_gic, CvResult, GicResult, KappaRule, SelectionRule};
pub use simulate::{generate_dataset, run_k_recovery, run_rmsep, SimDesign, SimReport};
