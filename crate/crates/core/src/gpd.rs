//! Generalized Pareto tail increments of the quantile function.
//!
//! The lower tail below `tau_L` adds `-(σ/α)[(τ/τ_L)^(-α) - 1]` to the
//! lower location, the upper tail above `tau_U` adds
//! `(σ/α)[((1-τ)/(1-τ_U))^(-α) - 1]` to the upper location. For `α → 0` both
//! reduce to logarithms. Increments vanish at the threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this `|α|` the logarithmic limit is used.
pub const LOG_BRANCH_ALPHA: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpdError {
    #[error("tail scale must be finite and >= 0, got {0}")]
    NegativeScale(f64),

    #[error("tail shape must be finite, got {0}")]
    InvalidShape(f64),

    #[error("threshold {0} invalid for this tail side")]
    InvalidThreshold(f64),

    #[error("tau = {tau} is on the wrong side of threshold {threshold}")]
    WrongSide { tau: f64, threshold: f64 },

    #[error("derivative order must be >= 1")]
    ZeroOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    Lower,
    Upper,
}

/// Result of inverting a tail increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailInverse {
    Tau(f64),
    /// The increment lies beyond the finite end of a bounded tail.
    OutsideSupport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub side: TailSide,
    pub alpha: f64,
    pub sigma: f64,
    pub threshold: f64,
}

impl TailSpec {
    pub fn new(side: TailSide, alpha: f64, sigma: f64, threshold: f64) -> Result<Self, GpdError> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(GpdError::NegativeScale(sigma));
        }
        if !alpha.is_finite() {
            return Err(GpdError::InvalidShape(alpha));
        }
        let ok = match side {
            TailSide::Lower => threshold > 0.0 && threshold <= 1.0,
            TailSide::Upper => (0.0..1.0).contains(&threshold),
        };
        if !ok {
            return Err(GpdError::InvalidThreshold(threshold));
        }
        Ok(Self {
            side,
            alpha,
            sigma,
            threshold,
        })
    }

    pub fn lower(alpha: f64, sigma: f64, tau_lower: f64) -> Result<Self, GpdError> {
        Self::new(TailSide::Lower, alpha, sigma, tau_lower)
    }

    pub fn upper(alpha: f64, sigma: f64, tau_upper: f64) -> Result<Self, GpdError> {
        Self::new(TailSide::Upper, alpha, sigma, tau_upper)
    }

    /// The mean of the tail exists.
    pub fn has_finite_mean(&self) -> bool {
        self.alpha < 1.0
    }

    pub fn has_finite_variance(&self) -> bool {
        self.alpha < 0.5
    }

    /// Finite end of support (`α < 0`) or unbounded.
    pub fn is_bounded(&self) -> bool {
        self.alpha < 0.0 || self.sigma == 0.0
    }

    fn check(&self, tau: f64) -> Result<(), GpdError> {
        let ok = match self.side {
            TailSide::Lower => (0.0..=self.threshold).contains(&tau),
            TailSide::Upper => tau >= self.threshold && tau <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(GpdError::WrongSide {
                tau,
                threshold: self.threshold,
            })
        }
    }

    /// Quantile increment relative to the threshold location. At `τ = 0`
    /// (lower) or `τ = 1` (upper) an unbounded tail returns a signed
    /// infinity.
    pub fn increment(&self, tau: f64) -> Result<f64, GpdError> {
        self.check(tau)?;
        Ok(match self.side {
            TailSide::Lower => lower_increment(self.alpha, self.sigma, self.threshold, tau),
            TailSide::Upper => upper_increment(self.alpha, self.sigma, self.threshold, tau),
        })
    }

    /// `order`-th derivative of the increment with respect to `τ`.
    pub fn increment_deriv(&self, tau: f64, order: usize) -> Result<f64, GpdError> {
        if order == 0 {
            return Err(GpdError::ZeroOrder);
        }
        self.check(tau)?;
        Ok(match self.side {
            TailSide::Lower => lower_deriv(self.alpha, self.sigma, self.threshold, tau, order),
            TailSide::Upper => upper_deriv(self.alpha, self.sigma, self.threshold, tau, order),
        })
    }

    /// Limit of the increment at the far end (`τ → 0` or `τ → 1`).
    pub fn support_limit(&self) -> f64 {
        match self.side {
            TailSide::Lower => lower_increment(self.alpha, self.sigma, self.threshold, 0.0),
            TailSide::Upper => upper_increment(self.alpha, self.sigma, self.threshold, 1.0),
        }
    }

    /// Solve `increment(τ) = delta` for `τ`.
    pub fn invert(&self, delta: f64) -> TailInverse {
        match self.side {
            TailSide::Lower => lower_inverse(self.alpha, self.sigma, self.threshold, delta),
            TailSide::Upper => upper_inverse(self.alpha, self.sigma, self.threshold, delta),
        }
    }
}

/// `∏_{i=1}^{q-1} (-α - i)`
fn rising_tail_product(alpha: f64, order: usize) -> f64 {
    (1..order).map(|i| -alpha - i as f64).product()
}

/// `(σ/α)[r^(-α) - 1]` evaluated stably, with the log limit for small `α`.
fn scaled_power(alpha: f64, sigma: f64, log_r: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    if alpha.abs() < LOG_BRANCH_ALPHA {
        -sigma * log_r
    } else {
        sigma * (-alpha * log_r).exp_m1() / alpha
    }
}

pub(crate) fn lower_increment(alpha: f64, sigma: f64, tau_l: f64, tau: f64) -> f64 {
    -scaled_power(alpha, sigma, (tau / tau_l).ln())
}

pub(crate) fn upper_increment(alpha: f64, sigma: f64, tau_u: f64, tau: f64) -> f64 {
    scaled_power(alpha, sigma, ((1.0 - tau) / (1.0 - tau_u)).ln())
}

pub(crate) fn lower_deriv(alpha: f64, sigma: f64, tau_l: f64, tau: f64, order: usize) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let q = order as i32;
    sigma * tau.powi(-q) * (alpha * (tau_l / tau).ln()).exp() * rising_tail_product(alpha, order)
}

pub(crate) fn upper_deriv(alpha: f64, sigma: f64, tau_u: f64, tau: f64, order: usize) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let q = order as i32;
    let v = 1.0 - tau;
    let sign = if order % 2 == 1 { 1.0 } else { -1.0 };
    sign * sigma
        * v.powi(-q)
        * (alpha * ((1.0 - tau_u) / v).ln()).exp()
        * rising_tail_product(alpha, order)
}

/// `order`-th derivative of the lower-tail increment at `τ_L` itself:
/// `σ τ_L^{-q} ∏_{i=1}^{q-1}(-α-i)`.
pub(crate) fn lower_deriv_at_threshold(alpha: f64, sigma: f64, tau_l: f64, order: usize) -> f64 {
    sigma * tau_l.powi(-(order as i32)) * rising_tail_product(alpha, order)
}

pub(crate) fn upper_deriv_at_threshold(alpha: f64, sigma: f64, tau_u: f64, order: usize) -> f64 {
    let sign = if order % 2 == 1 { 1.0 } else { -1.0 };
    sign * sigma * (1.0 - tau_u).powi(-(order as i32)) * rising_tail_product(alpha, order)
}

/// `ln r` solving `(σ/α)[r^(-α) - 1] = d`, or `None` past a bounded end.
fn log_ratio_for(alpha: f64, sigma: f64, d: f64) -> Option<f64> {
    if alpha.abs() < LOG_BRANCH_ALPHA {
        return Some(-d / sigma);
    }
    let z = alpha * d / sigma;
    if z <= -1.0 {
        return None;
    }
    Some(-z.ln_1p() / alpha)
}

pub(crate) fn lower_inverse(alpha: f64, sigma: f64, tau_l: f64, delta: f64) -> TailInverse {
    if delta >= 0.0 {
        return TailInverse::Tau(tau_l);
    }
    if sigma == 0.0 {
        return TailInverse::OutsideSupport;
    }
    // increment = -(σ/α)[r^(-α) - 1] with r = τ/τ_L
    match log_ratio_for(alpha, sigma, -delta) {
        Some(lr) => TailInverse::Tau(tau_l * lr.exp()),
        None => TailInverse::OutsideSupport,
    }
}

pub(crate) fn upper_inverse(alpha: f64, sigma: f64, tau_u: f64, delta: f64) -> TailInverse {
    if delta <= 0.0 {
        return TailInverse::Tau(tau_u);
    }
    if sigma == 0.0 {
        return TailInverse::OutsideSupport;
    }
    match log_ratio_for(alpha, sigma, delta) {
        Some(lr) => TailInverse::Tau(1.0 - (1.0 - tau_u) * lr.exp()),
        None => TailInverse::OutsideSupport,
    }
}
