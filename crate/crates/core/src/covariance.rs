//! Log-Gaussian-process priors on the basis coefficients and the implied
//! moments of the coefficients and of the response.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::splines::ISplineBasis;

/// Site coordinates in a shared projected system.
pub type Coord = [f64; 2];

/// Diagonal jitter used when factorizing correlation matrices.
pub const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("correlation range must be positive and finite, got {0}")]
    NonPositiveRange(f64),

    #[error("variance parameter must be >= 0 and finite, got {0}")]
    InvalidVariance(f64),

    #[error("response moments need a tail-free basis (tau_lower = 0, tau_upper = 1), got [{tau_lower}, {tau_upper}]")]
    TailsPresent { tau_lower: f64, tau_upper: f64 },

    #[error("cross-covariance needs two distinct sites")]
    SameSite,

    #[error("index (m = {m}, p = {p}) outside prior of shape {n_basis} x {n_cols}")]
    IndexOutOfRange {
        m: usize,
        p: usize,
        n_basis: usize,
        n_cols: usize,
    },

    #[error("expected {expected} predictors, got {got}")]
    PredictorLength { expected: usize, got: usize },

    #[error("correlation matrix is not positive definite even with jitter")]
    NotPositiveDefinite,
}

/// Distance between sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &Coord, b: &Coord) -> f64 {
        match self {
            Metric::Euclidean => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
        }
    }
}

/// Spatial correlation family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Correlation {
    Exponential { range: f64 },
}

impl Correlation {
    pub fn exponential(range: f64) -> Result<Self, CovarianceError> {
        if !(range > 0.0 && range.is_finite()) {
            return Err(CovarianceError::NonPositiveRange(range));
        }
        Ok(Correlation::Exponential { range })
    }

    pub fn validate(&self) -> Result<(), CovarianceError> {
        match *self {
            Correlation::Exponential { range } => Self::exponential(range).map(|_| ()),
        }
    }

    /// Correlation at distance `d`.
    pub fn at_distance(&self, d: f64) -> f64 {
        match *self {
            Correlation::Exponential { range } => (-d / range).exp(),
        }
    }
}

/// Hyperparameters of one latent field `θ*_{m,p}(·)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// `μ*`
    pub mean_latent: f64,
    /// `η²`
    pub spatial_var: f64,
    /// `λ²`
    pub nugget_var: f64,
}

impl GpHyper {
    pub fn new(mean_latent: f64, spatial_var: f64, nugget_var: f64) -> Result<Self, CovarianceError> {
        let h = Self {
            mean_latent,
            spatial_var,
            nugget_var,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), CovarianceError> {
        for v in [self.spatial_var, self.nugget_var] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CovarianceError::InvalidVariance(v));
            }
        }
        Ok(())
    }

    /// `Var[θ*(s)] = η² + λ²`
    pub fn marginal_var(&self) -> f64 {
        self.spatial_var + self.nugget_var
    }
}

/// Independent GP priors on every latent field `θ*_{m,p}`, sharing one
/// correlation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogGpPrior {
    n_basis: usize,
    n_cols: usize,
    /// Laid out `[m][p]`.
    hyper: Vec<GpHyper>,
    pub correlation: Correlation,
    #[serde(default)]
    pub metric: Metric,
}

impl LogGpPrior {
    /// Same hyperparameters for every field.
    pub fn uniform(
        n_basis: usize,
        n_cols: usize,
        hyper: GpHyper,
        correlation: Correlation,
    ) -> Result<Self, CovarianceError> {
        Self::from_fields(n_basis, n_cols, vec![hyper; n_basis * n_cols], correlation)
    }

    pub fn from_fields(
        n_basis: usize,
        n_cols: usize,
        hyper: Vec<GpHyper>,
        correlation: Correlation,
    ) -> Result<Self, CovarianceError> {
        correlation.validate()?;
        for h in &hyper {
            h.validate()?;
        }
        assert_eq!(hyper.len(), n_basis * n_cols, "hyperparameter table shape");
        Ok(Self {
            n_basis,
            n_cols,
            hyper,
            correlation,
            metric: Metric::Euclidean,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    fn check(&self, m: usize, p: usize) -> Result<usize, CovarianceError> {
        if m >= self.n_basis || p >= self.n_cols {
            return Err(CovarianceError::IndexOutOfRange {
                m,
                p,
                n_basis: self.n_basis,
                n_cols: self.n_cols,
            });
        }
        Ok(m * self.n_cols + p)
    }

    pub fn hyper(&self, m: usize, p: usize) -> Result<&GpHyper, CovarianceError> {
        let i = self.check(m, p)?;
        Ok(&self.hyper[i])
    }

    pub fn set_hyper(&mut self, m: usize, p: usize, h: GpHyper) -> Result<(), CovarianceError> {
        h.validate()?;
        let i = self.check(m, p)?;
        self.hyper[i] = h;
        Ok(())
    }

    pub fn distance(&self, s: &Coord, s2: &Coord) -> f64 {
        self.metric.distance(s, s2)
    }

    /// `C(s, s2)`
    pub fn correlation(&self, s: &Coord, s2: &Coord) -> f64 {
        self.correlation.at_distance(self.distance(s, s2))
    }

    /// `E[θ_{m,p}(s)]`: `exp(μ* + (η² + λ²)/2)` for `m ≥ 1`, and `μ*` for
    /// the Gaussian row `m = 0`.
    pub fn theta_mean(&self, m: usize, p: usize) -> Result<f64, CovarianceError> {
        let h = self.hyper(m, p)?;
        Ok(if m == 0 {
            h.mean_latent
        } else {
            (h.mean_latent + 0.5 * h.marginal_var()).exp()
        })
    }

    /// `Cov[θ_{m,p}(s), θ_{m,p}(s2)]`. For `m ≥ 1` this is
    /// `μ²(exp(η² C) − 1)`, with `η² + λ²` in the exponent at zero distance;
    /// for `m = 0` it is `η² C` (plus `λ²` at zero distance).
    pub fn theta_cov(&self, m: usize, p: usize, s: &Coord, s2: &Coord) -> Result<f64, CovarianceError> {
        let h = self.hyper(m, p)?;
        let d = self.distance(s, s2);
        let latent = if d == 0.0 {
            h.marginal_var()
        } else {
            h.spatial_var * self.correlation.at_distance(d)
        };
        if m == 0 {
            return Ok(latent);
        }
        let mu = self.theta_mean(m, p)?;
        Ok(mu * mu * latent.exp_m1())
    }

    fn check_tail_free(basis: &ISplineBasis) -> Result<(), CovarianceError> {
        if basis.tau_lower() > 0.0 || basis.tau_upper() < 1.0 {
            return Err(CovarianceError::TailsPresent {
                tau_lower: basis.tau_lower(),
                tau_upper: basis.tau_upper(),
            });
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<(), CovarianceError> {
        if x.len() + 1 != self.n_cols {
            return Err(CovarianceError::PredictorLength {
                expected: self.n_cols - 1,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `E[Y | x] = Σ_m Σ_p E[θ_{m,p}] x_p G_m` with `x_0 = 1`.
    pub fn y_mean(&self, x: &[f64], basis: &ISplineBasis) -> Result<f64, CovarianceError> {
        Self::check_tail_free(basis)?;
        self.check_x(x)?;
        let g = basis.integrals();
        let mut acc = 0.0;
        for (m, &gm) in g.iter().enumerate().take(self.n_basis) {
            for p in 0..self.n_cols {
                let xp = if p == 0 { 1.0 } else { x[p - 1] };
                acc += self.theta_mean(m, p)? * xp * gm;
            }
        }
        Ok(acc)
    }

    /// `Cov[Y(s), Y(s2)] = Σ_m Σ_p G_m² x_p(s) x_p(s2) Cov[θ_{m,p}(s), θ_{m,p}(s2)]`
    /// for distinct sites.
    pub fn y_cov(
        &self,
        x_s: &[f64],
        x_s2: &[f64],
        s: &Coord,
        s2: &Coord,
        basis: &ISplineBasis,
    ) -> Result<f64, CovarianceError> {
        Self::check_tail_free(basis)?;
        self.check_x(x_s)?;
        self.check_x(x_s2)?;
        if self.distance(s, s2) == 0.0 {
            return Err(CovarianceError::SameSite);
        }
        let g = basis.integrals();
        let mut acc = 0.0;
        for (m, &gm) in g.iter().enumerate().take(self.n_basis) {
            for p in 0..self.n_cols {
                let (a, b) = if p == 0 { (1.0, 1.0) } else { (x_s[p - 1], x_s2[p - 1]) };
                if a == 0.0 || b == 0.0 {
                    continue;
                }
                acc += gm * gm * a * b * self.theta_cov(m, p, s, s2)?;
            }
        }
        Ok(acc)
    }

    /// Correlation matrix `C` over `sites`.
    pub fn correlation_matrix(&self, sites: &[Coord]) -> DMatrix<f64> {
        let n = sites.len();
        DMatrix::from_fn(n, n, |i, j| self.correlation(&sites[i], &sites[j]))
    }

    /// Latent covariance `η² C + λ² I` for field `(m, p)`.
    pub fn latent_cov(&self, m: usize, p: usize, sites: &[Coord]) -> Result<DMatrix<f64>, CovarianceError> {
        let h = *self.hyper(m, p)?;
        let mut c = self.correlation_matrix(sites) * h.spatial_var;
        for i in 0..sites.len() {
            c[(i, i)] += h.nugget_var;
        }
        Ok(c)
    }
}

/// Lower Cholesky factor, retrying with diagonal jitter.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<DMatrix<f64>, CovarianceError> {
    let scale = (0..a.nrows()).map(|i| a[(i, i)]).fold(0.0f64, f64::max).max(1.0);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::Cholesky::new(b) {
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { CHOLESKY_JITTER * scale } else { jitter * 10.0 };
    }
    Err(CovarianceError::NotPositiveDefinite)
}

/// Multivariate normal log density of `z ~ N(mean, L Lᵀ)` given the lower
/// Cholesky factor `l`.
pub fn mvn_log_density(z: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let n = z.len();
    let diff = z - mean;
    let w = l
        .solve_lower_triangular(&diff)
        .expect("Cholesky factor has a nonzero diagonal");
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - log_det - 0.5 * w.norm_squared()
}
