use serde::{Deserialize, Serialize};

use crate::model::ConstraintMode;
use crate::splines::{BasisSpec, ISplineBasis, SplineError};

/// Everything needed to fit a model, persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub basis: BasisConfig,
    pub constraint: ConstraintMode,
    pub prior: PriorConfig,
    pub mcmc: McmcConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            constraint: ConstraintMode::default(),
            prior: PriorConfig::default(),
            mcmc: McmcConfig::default(),
        }
    }
}

/// I-spline basis settings. Interior knots default to equal spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub degree: usize,
    /// `M`, the number of non-constant basis functions.
    pub num_basis: usize,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub interior_knots: Option<Vec<f64>>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            num_basis: 4,
            tau_lower: 0.1,
            tau_upper: 0.9,
            interior_knots: None,
        }
    }
}

impl BasisConfig {
    pub fn build(&self) -> Result<ISplineBasis, SplineError> {
        match &self.interior_knots {
            Some(knots) => ISplineBasis::new(BasisSpec {
                degree: self.degree,
                tau_lower: self.tau_lower,
                tau_upper: self.tau_upper,
                interior_knots: knots.clone(),
            }),
            None => ISplineBasis::equally_spaced(self.degree, self.num_basis, self.tau_lower, self.tau_upper),
        }
    }
}

/// Prior settings. Location-type scales are multiples of the response
/// scale, which defaults to the standard deviation of the training
/// responses; the location centre defaults to their median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Range of the exponential spatial correlation.
    pub correlation_range: f64,
    /// Prior sd of `μ*_{0,p}`, in response-scale units.
    pub location_sd: f64,
    /// Prior mean of `μ*_{m,p}` (`m ≥ 1`) relative to `ln(scale)`.
    pub log_coef_mean: f64,
    /// Prior sd of `μ*_{m,p}` (`m ≥ 1`).
    pub log_coef_sd: f64,
    /// Half-normal scale of `η` and `λ` for the location fields, in
    /// response-scale units.
    pub location_gp_scale: f64,
    /// Half-normal scale of `η` and `λ` for the log-coefficient fields.
    pub log_coef_gp_scale: f64,
    /// Half-normal scale of the tail scales `σ`, in response-scale units.
    pub sigma_scale: f64,
    /// Shapes are bounded below by `-alpha_max`.
    pub alpha_max: f64,
    /// Shapes are bounded above by `min(alpha_cap, shape bound)`.
    pub alpha_cap: f64,
    pub response_center: Option<f64>,
    pub response_scale: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            correlation_range: 1.0,
            location_sd: 10.0,
            log_coef_mean: 0.0,
            log_coef_sd: 3.0,
            location_gp_scale: 1.0,
            log_coef_gp_scale: 1.0,
            sigma_scale: 1.0,
            alpha_max: 5.0,
            alpha_cap: 0.5,
            response_center: None,
            response_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    /// Defaults to half of `iterations`.
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 20_000,
            burn_in: None,
            thin: 10,
            seed: 1,
        }
    }
}

impl McmcConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 2)
    }
}
