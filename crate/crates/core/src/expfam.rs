//! Exponential-family building blocks.
//!
//! Every family is used with its canonical link, so the linear predictor `eta`
//! is the canonical parameter and the inverse link is `b'(eta)`. Each cell's
//! log-likelihood is written as
//!
//! ```text
//! l(x; eta, phi) = [x * eta - b(eta)] / a(phi) + c(x, phi)
//! ```
//!
//! with `a(phi) = phi` for families that carry a dispersion and `a(phi) = 1`
//! otherwise. Quasi-Poisson reuses the Poisson terms and divides the whole
//! log-likelihood by `phi`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, FpcaError, Result};

/// Means closer than this to a boundary of the mean domain are clamped before
/// taking logarithms.
pub const BOUNDARY_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
    QuasiPoisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
            Family::QuasiPoisson => "quasipoisson",
        }
    }

    pub fn link_name(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Poisson | Family::QuasiPoisson => "log",
            Family::Bernoulli => "logit",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = FpcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            "quasipoisson" | "quasi-poisson" => Ok(Family::QuasiPoisson),
            other => Err(invalid(format!("unknown family '{other}'"))),
        }
    }
}

/// How the dispersion parameter varies over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionStructure {
    None,
    Scalar,
    PerColumn,
}

/// A distribution family together with its canonical link and dispersion layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FamilySpec {
    family: Family,
    dispersion: DispersionStructure,
}

impl FamilySpec {
    /// Validates the family/dispersion pairing.
    pub fn new(family: Family, dispersion: DispersionStructure) -> Result<Self> {
        let ok = match family {
            Family::Poisson | Family::Bernoulli => dispersion == DispersionStructure::None,
            Family::QuasiPoisson => dispersion == DispersionStructure::Scalar,
            Family::Gaussian => matches!(
                dispersion,
                DispersionStructure::Scalar | DispersionStructure::PerColumn
            ),
        };
        if !ok {
            return Err(invalid(format!(
                "family {family} does not support dispersion structure {dispersion:?}"
            )));
        }
        Ok(Self { family, dispersion })
    }

    /// The family with its default dispersion structure.
    pub fn of(family: Family) -> Self {
        let dispersion = match family {
            Family::Poisson | Family::Bernoulli => DispersionStructure::None,
            Family::Gaussian | Family::QuasiPoisson => DispersionStructure::Scalar,
        };
        Self { family, dispersion }
    }

    pub fn gaussian() -> Self {
        Self::of(Family::Gaussian)
    }

    pub fn gaussian_per_column() -> Self {
        Self {
            family: Family::Gaussian,
            dispersion: DispersionStructure::PerColumn,
        }
    }

    pub fn poisson() -> Self {
        Self::of(Family::Poisson)
    }

    pub fn bernoulli() -> Self {
        Self::of(Family::Bernoulli)
    }

    pub fn quasi_poisson() -> Self {
        Self::of(Family::QuasiPoisson)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dispersion_structure(&self) -> DispersionStructure {
        self.dispersion
    }

    pub fn has_dispersion(&self) -> bool {
        self.dispersion != DispersionStructure::None
    }

    /// Canonical link `g(mu)`.
    pub fn link(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(match self.family {
            Family::Gaussian => mu,
            Family::Poisson | Family::QuasiPoisson => mu.ln(),
            Family::Bernoulli => mu.ln() - (-mu).ln_1p(),
        })
    }

    /// Inverse canonical link `h(eta) = b'(eta)`.
    pub fn inv_link(&self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(invalid(format!("linear predictor must be finite, got {eta}")));
        }
        Ok(self.mean(eta))
    }

    /// One summand of the log-likelihood.
    pub fn loglik_term(&self, x: f64, eta: f64, phi: f64) -> Result<f64> {
        self.check_response(x)?;
        if !eta.is_finite() {
            return Err(invalid(format!("linear predictor must be finite, got {eta}")));
        }
        self.check_phi(phi)?;
        Ok(self.loglik_unchecked(x, eta, phi))
    }

    /// Log-likelihood of the saturated model (`mu = x`) for one cell.
    pub fn saturated_loglik_term(&self, x: f64, phi: f64) -> Result<f64> {
        self.check_response(x)?;
        self.check_phi(phi)?;
        Ok(self.saturated_loglik_unchecked(x, phi))
    }

    /// Unit deviance `2 [l(x; x) - l(x; mu)]` at unit dispersion.
    pub fn deviance_term(&self, x: f64, mu: f64) -> Result<f64> {
        self.check_response(x)?;
        if !mu.is_finite() {
            return Err(FpcaError::Domain(format!("mean must be finite, got {mu}")));
        }
        match self.family {
            Family::Gaussian => Ok((x - mu) * (x - mu)),
            Family::Poisson | Family::QuasiPoisson => {
                if mu < 0.0 || (mu == 0.0 && x > 0.0) {
                    return Err(FpcaError::Domain(format!(
                        "poisson mean {mu} incompatible with observation {x}"
                    )));
                }
                Ok(2.0 * (xlogy_ratio(x, mu) - (x - mu)))
            }
            Family::Bernoulli => {
                if !(0.0..=1.0).contains(&mu)
                    || (mu == 0.0 && x == 1.0)
                    || (mu == 1.0 && x == 0.0)
                {
                    return Err(FpcaError::Domain(format!(
                        "bernoulli mean {mu} incompatible with observation {x}"
                    )));
                }
                Ok(2.0 * (xlogy_ratio(x, mu) + xlogy_ratio(1.0 - x, 1.0 - mu)))
            }
        }
    }

    /// Variance function `V(mu) = b''(h^{-1}(mu))`.
    pub fn variance_function(&self, mu: f64) -> Result<f64> {
        self.check_mean(mu)?;
        Ok(self.variance(mu))
    }

    /// Checks that `x` lies in the support of the family.
    pub fn check_response(&self, x: f64) -> Result<()> {
        let ok = match self.family {
            Family::Gaussian => x.is_finite(),
            Family::Poisson | Family::QuasiPoisson => {
                x.is_finite() && x >= 0.0 && x.fract() == 0.0
            }
            Family::Bernoulli => x == 0.0 || x == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FpcaError::Domain(format!(
                "observation {x} is outside the support of the {} family",
                self.family
            )))
        }
    }

    fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self.family {
            Family::Gaussian => mu.is_finite(),
            Family::Poisson | Family::QuasiPoisson => mu.is_finite() && mu > 0.0,
            Family::Bernoulli => mu > 0.0 && mu < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FpcaError::Domain(format!(
                "mean {mu} is outside the mean domain of the {} family",
                self.family
            )))
        }
    }

    fn check_phi(&self, phi: f64) -> Result<()> {
        if self.has_dispersion() && !(phi.is_finite() && phi > 0.0) {
            return Err(invalid(format!("dispersion must be positive, got {phi}")));
        }
        Ok(())
    }

    // ---- unchecked kernels used by the solvers ----

    pub(crate) fn mean(&self, eta: f64) -> f64 {
        match self.family {
            Family::Gaussian => eta,
            Family::Poisson | Family::QuasiPoisson => eta.exp(),
            Family::Bernoulli => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    pub(crate) fn variance(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => 1.0,
            Family::Poisson | Family::QuasiPoisson => mu,
            Family::Bernoulli => mu * (1.0 - mu),
        }
    }

    /// `x * eta - b(eta)`.
    pub(crate) fn kernel(&self, x: f64, eta: f64) -> f64 {
        match self.family {
            Family::Gaussian => x * eta - 0.5 * eta * eta,
            Family::Poisson | Family::QuasiPoisson => x * eta - eta.exp(),
            Family::Bernoulli => x * eta - softplus(eta),
        }
    }

    /// `kernel` evaluated at the saturated canonical parameter.
    pub(crate) fn saturated_kernel(&self, x: f64) -> f64 {
        match self.family {
            Family::Gaussian => 0.5 * x * x,
            Family::Poisson | Family::QuasiPoisson => xlogy_ratio(x, 1.0) - x,
            Family::Bernoulli => 0.0,
        }
    }

    /// `c(x, phi)` for the non-quasi families.
    fn log_normalizer(&self, x: f64, phi: f64) -> f64 {
        match self.family {
            Family::Gaussian => -0.5 * x * x / phi - 0.5 * (2.0 * PI * phi).ln(),
            Family::Poisson | Family::QuasiPoisson => -ln_gamma(x + 1.0),
            Family::Bernoulli => 0.0,
        }
    }

    /// Scale applied to the kernel: `1 / a(phi)`.
    pub(crate) fn kernel_scale(&self, phi: f64) -> f64 {
        match self.family {
            Family::Gaussian | Family::QuasiPoisson => 1.0 / phi,
            Family::Poisson | Family::Bernoulli => 1.0,
        }
    }

    /// The part of the log-likelihood that does not depend on `eta`.
    pub(crate) fn constant_term(&self, x: f64, phi: f64) -> f64 {
        match self.family {
            Family::QuasiPoisson => self.log_normalizer(x, phi) / phi,
            _ => self.log_normalizer(x, phi),
        }
    }

    pub(crate) fn loglik_unchecked(&self, x: f64, eta: f64, phi: f64) -> f64 {
        match self.family {
            Family::QuasiPoisson => {
                let poisson = x * eta - eta.exp() - ln_gamma(x + 1.0);
                poisson / phi
            }
            _ => self.kernel(x, eta) * self.kernel_scale(phi) + self.log_normalizer(x, phi),
        }
    }

    pub(crate) fn saturated_loglik_unchecked(&self, x: f64, phi: f64) -> f64 {
        match self.family {
            Family::QuasiPoisson => (self.saturated_kernel(x) - ln_gamma(x + 1.0)) / phi,
            _ => self.saturated_kernel(x) * self.kernel_scale(phi) + self.log_normalizer(x, phi),
        }
    }

    /// Unit deviance computed from the linear predictor; avoids forming `mu`
    /// at the edge of the mean domain.
    pub(crate) fn deviance_from_eta(&self, x: f64, eta: f64) -> f64 {
        (2.0 * (self.saturated_kernel(x) - self.kernel(x, eta))).max(0.0)
    }

    /// Starting mean for IRLS when no coefficients are available.
    pub(crate) fn initial_mean(&self, x: f64) -> f64 {
        match self.family {
            Family::Gaussian => x,
            Family::Poisson | Family::QuasiPoisson => x + 0.1,
            Family::Bernoulli => (x + 0.5) / 2.0,
        }
    }

    /// Link evaluated with boundary clamping; never fails for means produced
    /// by `initial_mean` or `mean`.
    pub(crate) fn link_clamped(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => mu,
            Family::Poisson | Family::QuasiPoisson => mu.max(BOUNDARY_EPS).ln(),
            Family::Bernoulli => {
                let m = mu.clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS);
                m.ln() - (-m).ln_1p()
            }
        }
    }
}

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} link)", self.family, self.family.link_name())
    }
}

/// `x * ln(x / y)` with the convention `0 * ln(0 / y) = 0`.
fn xlogy_ratio(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// `ln(1 + e^eta)` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}
