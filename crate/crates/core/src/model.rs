//! Quantile function assembly, inversion, density and smoothness constraints.
//!
//! For site `s` and predictors `x ∈ ℝ₊^P` the quantile function is
//! `Q(τ|s,x) = Σ_p x_p β_p(τ,s)` with `x_0 ≡ 1`, and each `β_p` is a
//! generalized Pareto lower tail below `τ_L`, the I-spline combination
//! `Σ_m θ_{m,p} I_m(τ)` on `[τ_L, τ_U]`, and a generalized Pareto upper tail
//! above `τ_U`. Shapes are shared across predictors at a site, so `Q` itself
//! has the same form with scales `Σ_p x_p σ_{·,p}`.
//!
//! Constraints are enforced by reparameterization: the coefficients that
//! pin the density's continuity (and derivatives) at the thresholds are
//! recomputed from the tail parameters and never sampled directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpd::{self, GpdError, TailInverse, TailSide};
use crate::splines::{BasisSpec, ISplineBasis, SplineError};

/// Newton/bisection stopping rule on `τ`.
const INVERT_TAU_TOL: f64 = 1e-12;
const INVERT_MAX_ITER: usize = 200;
/// Relative slack when deciding that a derived coefficient is negative.
const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Spline(#[from] SplineError),

    #[error(transparent)]
    Gpd(#[from] GpdError),

    #[error("tau = {0} must lie in (0, 1)")]
    TauOutOfRange(f64),

    #[error("predictor {index} is negative ({value}); predictors must be >= 0")]
    NegativePredictor { index: usize, value: f64 },

    #[error("expected {expected} predictors, got {got}")]
    PredictorLength { expected: usize, got: usize },

    #[error("site {site} out of range (model has {n_sites} sites)")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("derivative at threshold tau = {0} needs an explicit side")]
    AmbiguousThreshold(f64),

    #[error("quantile function is flat on [{lower}, {upper}]; value is not invertible")]
    FlatRegion { lower: f64, upper: f64 },

    #[error(
        "{side:?} shape {alpha} makes derived coefficient theta[{index}] negative at site {site}, column {column} (first-order bound {bound})"
    )]
    InfeasibleShape {
        side: TailSide,
        site: usize,
        column: usize,
        index: usize,
        alpha: f64,
        bound: f64,
    },

    #[error("differentiability of order {order} needs basis degree > {needed}, got {degree}")]
    BasisOrderTooLow {
        order: usize,
        degree: usize,
        needed: usize,
    },

    #[error("order-{order} constraints at both thresholds need M >= {needed} basis functions, got {m}")]
    OverlappingConstraints { order: usize, m: usize, needed: usize },

    #[error("invalid coefficient at site {site}, m = {m}, column {column}: {value}")]
    InvalidCoefficient {
        site: usize,
        m: usize,
        column: usize,
        value: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("constraint equation violated at site {site}, m = {m}, column {column}: {have} vs {want}")]
    ConstraintViolated {
        site: usize,
        m: usize,
        column: usize,
        have: f64,
        want: f64,
    },
}

/// Which side of a threshold a one-sided derivative is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "order", rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    Continuous,
    /// Density differentiable to this order at active thresholds.
    Differentiable(usize),
}

impl Default for ConstraintMode {
    fn default() -> Self {
        ConstraintMode::Differentiable(1)
    }
}

impl ConstraintMode {
    /// Order of smoothness imposed, `None` when unconstrained.
    pub fn order(self) -> Option<usize> {
        match self {
            ConstraintMode::None => None,
            ConstraintMode::Continuous => Some(0),
            ConstraintMode::Differentiable(q) => Some(q),
        }
    }

    /// Basis indices whose coefficients are derived from tail parameters.
    pub fn derived_indices(self, basis: &ISplineBasis) -> Vec<usize> {
        let Some(q) = self.order() else {
            return Vec::new();
        };
        let m = basis.num_nonconstant();
        let mut out = Vec::new();
        if basis.tau_lower() > 0.0 {
            out.extend(1..=(q + 1).min(m));
        }
        if basis.tau_upper() < 1.0 {
            for i in m.saturating_sub(q).max(1)..=m {
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Coefficients `θ_{m,p}(s)` and their latent values `θ*_{m,p}(s)`.
///
/// `θ_{0,p} = θ*_{0,p}` and `θ_{m,p} = exp(θ*_{m,p})` for `m > 0`; a derived
/// coefficient equal to zero has latent value `-∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    n_sites: usize,
    n_basis: usize,
    n_cols: usize,
    latent: Vec<f64>,
    coef: Vec<f64>,
}

impl ThetaField {
    fn idx(&self, site: usize, m: usize, p: usize) -> usize {
        (site * self.n_basis + m) * self.n_cols + p
    }

    pub fn zeros(n_sites: usize, n_basis: usize, n_cols: usize) -> Self {
        let len = n_sites * n_basis * n_cols;
        let mut f = Self {
            n_sites,
            n_basis,
            n_cols,
            latent: vec![0.0; len],
            coef: vec![0.0; len],
        };
        for s in 0..n_sites {
            for m in 1..n_basis {
                for p in 0..n_cols {
                    f.set_latent(s, m, p, 0.0);
                }
            }
        }
        f
    }

    /// Build from latent values laid out `[site][m][p]`.
    pub fn from_latent(
        n_sites: usize,
        n_basis: usize,
        n_cols: usize,
        latent: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if latent.len() != n_sites * n_basis * n_cols {
            return Err(ModelError::Dimension(format!(
                "latent field has {} entries, expected {}",
                latent.len(),
                n_sites * n_basis * n_cols
            )));
        }
        let mut f = Self {
            n_sites,
            n_basis,
            n_cols,
            coef: vec![0.0; latent.len()],
            latent,
        };
        for s in 0..n_sites {
            for m in 0..n_basis {
                for p in 0..n_cols {
                    let v = f.latent[f.idx(s, m, p)];
                    let ok = if m == 0 { v.is_finite() } else { v < f64::INFINITY && !v.is_nan() };
                    if !ok {
                        return Err(ModelError::InvalidCoefficient {
                            site: s,
                            m,
                            column: p,
                            value: v,
                        });
                    }
                    let i = f.idx(s, m, p);
                    f.coef[i] = if m == 0 { v } else { v.exp() };
                }
            }
        }
        Ok(f)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// `M + 1`, including the constant function.
    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    /// `P + 1`, including the intercept column.
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn coef(&self, site: usize, m: usize, p: usize) -> f64 {
        self.coef[self.idx(site, m, p)]
    }

    pub fn latent(&self, site: usize, m: usize, p: usize) -> f64 {
        self.latent[self.idx(site, m, p)]
    }

    pub fn latent_values(&self) -> &[f64] {
        &self.latent
    }

    pub fn set_latent(&mut self, site: usize, m: usize, p: usize, value: f64) {
        let i = self.idx(site, m, p);
        self.latent[i] = value;
        self.coef[i] = if m == 0 { value } else { value.exp() };
    }

    /// Set the natural-scale coefficient; for `m > 0` it must be `>= 0`.
    pub fn set_coef(&mut self, site: usize, m: usize, p: usize, value: f64) {
        let i = self.idx(site, m, p);
        self.coef[i] = value;
        self.latent[i] = if m == 0 { value } else { value.ln() };
    }
}

/// Tail parameters at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTails {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    /// One scale per column, intercept first.
    pub sigma_lower: Vec<f64>,
    pub sigma_upper: Vec<f64>,
}

impl SiteTails {
    pub fn uniform(n_cols: usize, alpha: f64, sigma: f64) -> Self {
        Self {
            alpha_lower: alpha,
            alpha_upper: alpha,
            sigma_lower: vec![sigma; n_cols],
            sigma_upper: vec![sigma; n_cols],
        }
    }
}

/// First-order differentiability bounds on the tail shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeBounds {
    /// Upper bound on `α_L`; `+∞` when there is no lower tail.
    pub lower: f64,
    /// Upper bound on `α_U`; `+∞` when there is no upper tail.
    pub upper: f64,
}

/// Largest tail shapes compatible with a first-order differentiable density.
///
/// Lower: `-1 - τ_L I_1''(τ_L) / I_1'(τ_L)`. Upper (mirror image):
/// `-1 + (1-τ_U) I_M''(τ_U) / I_M'(τ_U)`.
pub fn shape_upper_bound(basis: &ISplineBasis) -> ShapeBounds {
    let m = basis.num_nonconstant();
    let tl = basis.tau_lower();
    let tu = basis.tau_upper();
    let lower = if tl > 0.0 {
        let d1 = basis.ispline_deriv_unchecked(1, tl, 1);
        let d2 = basis.ispline_deriv_unchecked(1, tl, 2);
        -1.0 - tl * d2 / d1
    } else {
        f64::INFINITY
    };
    let upper = if tu < 1.0 {
        let d1 = basis.ispline_deriv_unchecked(m, tu, 1);
        let d2 = basis.ispline_deriv_unchecked(m, tu, 2);
        -1.0 + (1.0 - tu) * d2 / d1
    } else {
        f64::INFINITY
    };
    ShapeBounds { lower, upper }
}

/// Outcome of inverting `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inversion {
    Tau(f64),
    /// `y` is below the finite lower end of support.
    BelowSupport,
    /// `y` is above the finite upper end of support.
    AboveSupport,
}

/// The quantile function for one site and predictor vector (or one column).
#[derive(Debug, Clone)]
pub struct QuantileCurve<'a> {
    basis: &'a ISplineBasis,
    coef: Vec<f64>,
    alpha_lower: f64,
    alpha_upper: f64,
    sigma_lower: f64,
    sigma_upper: f64,
}

impl<'a> QuantileCurve<'a> {
    pub fn new(
        basis: &'a ISplineBasis,
        coef: Vec<f64>,
        alpha_lower: f64,
        alpha_upper: f64,
        sigma_lower: f64,
        sigma_upper: f64,
    ) -> Self {
        Self {
            basis,
            coef,
            alpha_lower,
            alpha_upper,
            sigma_lower,
            sigma_upper,
        }
    }

    pub fn basis(&self) -> &ISplineBasis {
        self.basis
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    fn has_lower_tail(&self) -> bool {
        self.basis.tau_lower() > 0.0
    }

    fn has_upper_tail(&self) -> bool {
        self.basis.tau_upper() < 1.0
    }

    /// `Q(τ_L)`
    pub fn lower_location(&self) -> f64 {
        self.coef[0]
    }

    /// `Q(τ_U) = Σ_m θ_m`
    pub fn upper_location(&self) -> f64 {
        self.coef.iter().sum()
    }

    fn center(&self, tau: f64) -> f64 {
        let piece = self.basis.locate(tau);
        let u = tau - self.basis.piece_left(piece);
        let mut acc = self.coef[0];
        for (m, &c) in self.coef.iter().enumerate().skip(1) {
            if c != 0.0 {
                acc += c * eval_poly(self.basis.piece_ispline(piece, m), u);
            }
        }
        acc
    }

    fn center_deriv(&self, tau: f64, order: usize) -> f64 {
        if order > self.basis.degree() {
            return 0.0;
        }
        let mut acc = 0.0;
        for (m, &c) in self.coef.iter().enumerate().skip(1) {
            if c != 0.0 {
                acc += c * self.basis.ispline_deriv_unchecked(m, tau, order);
            }
        }
        acc
    }

    /// `Q(τ)`; `τ = 0` or `1` give the (possibly infinite) support ends.
    pub fn eval(&self, tau: f64) -> f64 {
        let tl = self.basis.tau_lower();
        let tu = self.basis.tau_upper();
        if tau < tl {
            self.coef[0] + gpd::lower_increment(self.alpha_lower, self.sigma_lower, tl, tau)
        } else if tau > tu {
            self.upper_location()
                + gpd::upper_increment(self.alpha_upper, self.sigma_upper, tu, tau)
        } else {
            self.center(tau)
        }
    }

    /// `order`-th derivative of `Q`. At an active threshold `side` selects
    /// the tail (`Left` at `τ_L`, `Right` at `τ_U`) or the spline piece.
    pub fn deriv(&self, tau: f64, order: usize, side: Side) -> f64 {
        let tl = self.basis.tau_lower();
        let tu = self.basis.tau_upper();
        let in_lower = self.has_lower_tail() && (tau < tl || (tau == tl && side == Side::Left));
        let in_upper = self.has_upper_tail() && (tau > tu || (tau == tu && side == Side::Right));
        if in_lower {
            gpd::lower_deriv(self.alpha_lower, self.sigma_lower, tl, tau, order)
        } else if in_upper {
            gpd::upper_deriv(self.alpha_upper, self.sigma_upper, tu, tau, order)
        } else {
            self.center_deriv(tau.clamp(tl, tu), order)
        }
    }

    fn is_threshold(&self, tau: f64) -> bool {
        (self.has_lower_tail() && tau == self.basis.tau_lower())
            || (self.has_upper_tail() && tau == self.basis.tau_upper())
    }

    /// `Q'(τ)`, refusing to guess at a threshold.
    pub fn derivative(&self, tau: f64, side: Option<Side>) -> Result<f64, ModelError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(ModelError::TauOutOfRange(tau));
        }
        let side = match side {
            Some(s) => s,
            None if self.is_threshold(tau) => return Err(ModelError::AmbiguousThreshold(tau)),
            None => Side::Right,
        };
        Ok(self.deriv(tau, 1, side))
    }

    /// Solve `Q(τ) = y`.
    pub fn invert(&self, y: f64) -> Result<Inversion, ModelError> {
        self.invert_from(y, None)
    }

    /// As [`invert`](Self::invert), starting Newton from `hint` when it falls
    /// in the bracketing piece.
    pub fn invert_from(&self, y: f64, hint: Option<f64>) -> Result<Inversion, ModelError> {
        let tl = self.basis.tau_lower();
        let tu = self.basis.tau_upper();
        let y_lo = self.lower_location();
        let y_hi = self.upper_location();

        if y < y_lo {
            if !self.has_lower_tail() {
                return Ok(Inversion::BelowSupport);
            }
            return Ok(
                match gpd::lower_inverse(self.alpha_lower, self.sigma_lower, tl, y - y_lo) {
                    TailInverse::Tau(t) if t > 0.0 => Inversion::Tau(t),
                    _ => Inversion::BelowSupport,
                },
            );
        }
        if y > y_hi {
            if !self.has_upper_tail() {
                return Ok(Inversion::AboveSupport);
            }
            return Ok(
                match gpd::upper_inverse(self.alpha_upper, self.sigma_upper, tu, y - y_hi) {
                    TailInverse::Tau(t) if t < 1.0 => Inversion::Tau(t),
                    _ => Inversion::AboveSupport,
                },
            );
        }
        // flat tails touching the threshold value
        if y == y_lo && self.has_lower_tail() && self.sigma_lower == 0.0 {
            let upper = self.flat_upper_end(y);
            return Err(ModelError::FlatRegion { lower: 0.0, upper });
        }
        if y == y_hi && self.has_upper_tail() && self.sigma_upper == 0.0 {
            let lower = self.flat_lower_end(y);
            return Err(ModelError::FlatRegion { lower, upper: 1.0 });
        }

        let tau = self.invert_center(y, hint);
        if self.center_deriv(tau, 1) == 0.0 {
            let (a, b) = (self.flat_lower_end(y), self.flat_upper_end(y));
            if b - a > 1e-9 {
                return Err(ModelError::FlatRegion { lower: a, upper: b });
            }
        }
        Ok(Inversion::Tau(tau))
    }

    /// Bracketed Newton on the polynomial piece containing `y`.
    fn invert_center(&self, y: f64, hint: Option<f64>) -> f64 {
        let breaks = self.basis.breaks();
        let nb = breaks.len();
        let mut values = [0.0f64; 2];
        let mut piece = self.basis.num_pieces() - 1;
        let mut prev = self.break_value(0);
        if y <= prev {
            return breaks[0];
        }
        for b in 1..nb {
            let v = self.break_value(b);
            if y <= v {
                piece = b - 1;
                values = [prev, v];
                break;
            }
            prev = v;
            values = [prev, v];
        }
        let left = self.basis.piece_left(piece);
        let h = self.basis.piece_right(piece) - left;
        let deg = self.basis.degree();
        // combined polynomial for this piece
        let mut poly = [0.0f64; 16];
        let poly = if deg < poly.len() {
            for (m, &c) in self.coef.iter().enumerate() {
                if m == 0 {
                    poly[0] += c;
                    continue;
                }
                if c == 0.0 {
                    continue;
                }
                for (n, &pc) in self.basis.piece_ispline(piece, m).iter().enumerate() {
                    poly[n] += c * pc;
                }
            }
            &poly[..=deg]
        } else {
            unreachable!("degree above 15 is not supported")
        };

        let (mut lo, mut hi) = (0.0, h);
        let span = values[1] - values[0];
        let mut u = match hint {
            Some(t) if t > left && t < left + h => t - left,
            _ if span > 0.0 => ((y - values[0]) / span * h).clamp(0.0, h),
            _ => 0.5 * h,
        };
        for _ in 0..INVERT_MAX_ITER {
            let (f, df) = eval_poly_and_deriv(poly, u);
            let r = f - y;
            if r == 0.0 {
                break;
            }
            if r < 0.0 {
                lo = u;
            } else {
                hi = u;
            }
            let newton = u - r / df;
            let next = if df > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            let step = (next - u).abs();
            u = next;
            if step <= INVERT_TAU_TOL * 1e-2 || hi - lo <= INVERT_TAU_TOL * 1e-3 {
                break;
            }
        }
        (left + u).clamp(left, left + h)
    }

    fn break_value(&self, b: usize) -> f64 {
        let vals = self.basis.break_values(b);
        self.coef.iter().zip(vals).map(|(c, v)| c * v).sum()
    }

    /// `inf{τ : Q(τ) >= y}` over the spline range (or 0 for a flat lower tail).
    fn flat_lower_end(&self, y: f64) -> f64 {
        let tl = self.basis.tau_lower();
        if self.has_lower_tail() && self.sigma_lower == 0.0 && y <= self.lower_location() {
            return 0.0;
        }
        let (mut a, mut b) = (tl, self.basis.tau_upper());
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.center(mid) >= y {
                b = mid;
            } else {
                a = mid;
            }
        }
        b
    }

    /// `sup{τ : Q(τ) <= y}` over the spline range (or 1 for a flat upper tail).
    fn flat_upper_end(&self, y: f64) -> f64 {
        if self.has_upper_tail() && self.sigma_upper == 0.0 && y >= self.upper_location() {
            return 1.0;
        }
        let (mut a, mut b) = (self.basis.tau_lower(), self.basis.tau_upper());
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.center(mid) <= y {
                a = mid;
            } else {
                b = mid;
            }
        }
        a
    }

    /// `f(y) = 1 / Q'(Q⁻¹(y))`, zero outside a bounded support.
    pub fn density(&self, y: f64) -> Result<f64, ModelError> {
        Ok(self.density_with_tau(y, None)?.0)
    }

    /// Density together with the inverted level (if inside the support).
    pub(crate) fn density_with_tau(
        &self,
        y: f64,
        hint: Option<f64>,
    ) -> Result<(f64, Option<f64>), ModelError> {
        match self.invert_from(y, hint)? {
            Inversion::BelowSupport | Inversion::AboveSupport => Ok((0.0, None)),
            Inversion::Tau(t) => {
                // at a threshold image the side is decided by where y lies
                let side = if y < self.lower_location() {
                    Side::Left
                } else if y > self.upper_location() {
                    Side::Right
                } else if t >= self.basis.tau_upper() {
                    Side::Left
                } else {
                    Side::Right
                };
                let d = self.deriv(t, 1, side);
                Ok((1.0 / d, Some(t)))
            }
        }
    }
}

fn eval_poly(coef: &[f64], u: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * u + c)
}

fn eval_poly_and_deriv(coef: &[f64], u: f64) -> (f64, f64) {
    let mut f = 0.0;
    let mut df = 0.0;
    for &c in coef.iter().rev() {
        df = df * u + f;
        f = f * u + c;
    }
    (f, df)
}

/// A complete spatial quantile regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct QuantileModel {
    basis: ISplineBasis,
    theta: ThetaField,
    tails: Vec<SiteTails>,
    constraint: ConstraintMode,
}

impl QuantileModel {
    /// Assemble and validate a model. Constraints are not applied; see
    /// [`enforce_constraints`](Self::enforce_constraints).
    pub fn new(
        basis: ISplineBasis,
        theta: ThetaField,
        tails: Vec<SiteTails>,
        constraint: ConstraintMode,
    ) -> Result<Self, ModelError> {
        let model = Self {
            basis,
            theta,
            tails,
            constraint,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n_basis = self.basis.num_nonconstant() + 1;
        if self.theta.n_basis() != n_basis {
            return Err(ModelError::Dimension(format!(
                "theta has {} basis rows, basis needs {}",
                self.theta.n_basis(),
                n_basis
            )));
        }
        if self.tails.len() != self.theta.n_sites() {
            return Err(ModelError::Dimension(format!(
                "{} tail records for {} sites",
                self.tails.len(),
                self.theta.n_sites()
            )));
        }
        let n_cols = self.theta.n_cols();
        for (s, t) in self.tails.iter().enumerate() {
            if t.sigma_lower.len() != n_cols || t.sigma_upper.len() != n_cols {
                return Err(ModelError::Dimension(format!(
                    "site {s}: tail scales need {n_cols} columns"
                )));
            }
            if !t.alpha_lower.is_finite() {
                return Err(GpdError::InvalidShape(t.alpha_lower).into());
            }
            if !t.alpha_upper.is_finite() {
                return Err(GpdError::InvalidShape(t.alpha_upper).into());
            }
            for &sg in t.sigma_lower.iter().chain(&t.sigma_upper) {
                if !(sg.is_finite() && sg >= 0.0) {
                    return Err(GpdError::NegativeScale(sg).into());
                }
            }
        }
        for s in 0..self.theta.n_sites() {
            for m in 0..n_basis {
                for p in 0..n_cols {
                    let c = self.theta.coef(s, m, p);
                    let bad = !c.is_finite() || (m > 0 && c < 0.0);
                    if bad {
                        return Err(ModelError::InvalidCoefficient {
                            site: s,
                            m,
                            column: p,
                            value: c,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn basis(&self) -> &ISplineBasis {
        &self.basis
    }

    pub fn theta(&self) -> &ThetaField {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut ThetaField {
        &mut self.theta
    }

    pub fn tails(&self) -> &[SiteTails] {
        &self.tails
    }

    pub fn site_tails_mut(&mut self, site: usize) -> &mut SiteTails {
        &mut self.tails[site]
    }

    pub fn constraint(&self) -> ConstraintMode {
        self.constraint
    }

    pub fn n_sites(&self) -> usize {
        self.theta.n_sites()
    }

    /// Number of predictors `P` (excluding the intercept).
    pub fn n_predictors(&self) -> usize {
        self.theta.n_cols() - 1
    }

    fn check_site(&self, site: usize) -> Result<(), ModelError> {
        if site >= self.n_sites() {
            return Err(ModelError::SiteOutOfRange {
                site,
                n_sites: self.n_sites(),
            });
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.n_predictors() {
            return Err(ModelError::PredictorLength {
                expected: self.n_predictors(),
                got: x.len(),
            });
        }
        for (i, &v) in x.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::NegativePredictor {
                    index: i + 1,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Quantile curve for predictors `x` (length `P`) at `site`.
    pub fn curve(&self, site: usize, x: &[f64]) -> Result<QuantileCurve<'_>, ModelError> {
        self.check_site(site)?;
        self.check_x(x)?;
        let mut curve = QuantileCurve::new(&self.basis, Vec::new(), 0.0, 0.0, 0.0, 0.0);
        self.fill_curve(&mut curve, site, x);
        Ok(curve)
    }

    /// Refill `curve` in place (no validation); used on hot paths.
    pub(crate) fn fill_curve(&self, curve: &mut QuantileCurve<'_>, site: usize, x: &[f64]) {
        let n_basis = self.theta.n_basis();
        let n_cols = self.theta.n_cols();
        curve.coef.clear();
        curve.coef.resize(n_basis, 0.0);
        let t = &self.tails[site];
        let mut sl = t.sigma_lower[0];
        let mut su = t.sigma_upper[0];
        for m in 0..n_basis {
            curve.coef[m] = self.theta.coef(site, m, 0);
        }
        for p in 1..n_cols {
            let xp = x[p - 1];
            if xp == 0.0 {
                continue;
            }
            for m in 0..n_basis {
                curve.coef[m] += xp * self.theta.coef(site, m, p);
            }
            sl += xp * t.sigma_lower[p];
            su += xp * t.sigma_upper[p];
        }
        curve.alpha_lower = t.alpha_lower;
        curve.alpha_upper = t.alpha_upper;
        curve.sigma_lower = sl;
        curve.sigma_upper = su;
    }

    /// The coefficient function `β_p(·, s)` as a curve.
    pub fn column_curve(&self, site: usize, p: usize) -> Result<QuantileCurve<'_>, ModelError> {
        self.check_site(site)?;
        if p >= self.theta.n_cols() {
            return Err(ModelError::Dimension(format!("column {p} out of range")));
        }
        let coef = (0..self.theta.n_basis())
            .map(|m| self.theta.coef(site, m, p))
            .collect();
        let t = &self.tails[site];
        Ok(QuantileCurve::new(
            &self.basis,
            coef,
            t.alpha_lower,
            t.alpha_upper,
            t.sigma_lower[p],
            t.sigma_upper[p],
        ))
    }

    /// `β_p(τ, s)`
    pub fn beta(&self, p: usize, tau: f64, site: usize) -> Result<f64, ModelError> {
        check_tau(tau)?;
        Ok(self.column_curve(site, p)?.eval(tau))
    }

    /// `Q(τ | s, x)`
    pub fn q_eval(&self, tau: f64, x: &[f64], site: usize) -> Result<f64, ModelError> {
        check_tau(tau)?;
        Ok(self.curve(site, x)?.eval(tau))
    }

    /// `Q'(τ | s, x)`; at an active threshold `side` must be given.
    pub fn q_deriv(
        &self,
        tau: f64,
        x: &[f64],
        site: usize,
        side: Option<Side>,
    ) -> Result<f64, ModelError> {
        self.curve(site, x)?.derivative(tau, side)
    }

    pub fn q_invert(&self, y: f64, x: &[f64], site: usize) -> Result<Inversion, ModelError> {
        self.curve(site, x)?.invert(y)
    }

    pub fn density(&self, y: f64, x: &[f64], site: usize) -> Result<f64, ModelError> {
        self.curve(site, x)?.density(y)
    }

    /// Density continuity at both active thresholds (order-zero smoothness).
    pub fn apply_continuity(&self) -> Result<QuantileModel, ModelError> {
        self.apply_mode(ConstraintMode::Continuous)
    }

    /// Density differentiable to order `q` at both active thresholds.
    pub fn apply_differentiability(&self, q: usize) -> Result<QuantileModel, ModelError> {
        let mode = if q == 0 {
            ConstraintMode::Continuous
        } else {
            ConstraintMode::Differentiable(q)
        };
        self.apply_mode(mode)
    }

    fn apply_mode(&self, mode: ConstraintMode) -> Result<QuantileModel, ModelError> {
        let mut out = self.clone();
        out.constraint = mode;
        out.enforce_constraints()?;
        Ok(out)
    }

    /// Recompute the derived coefficients of every site for the model's
    /// constraint mode.
    pub fn enforce_constraints(&mut self) -> Result<(), ModelError> {
        let Some(q) = self.constraint.order() else {
            return Ok(());
        };
        check_constraint_shape(&self.basis, q)?;
        if self.basis.tau_lower() == 0.0 {
            log::warn!("tau_lower = 0: no lower tail junction, lower constraint skipped");
        }
        if self.basis.tau_upper() == 1.0 {
            log::warn!("tau_upper = 1: no upper tail junction, upper constraint skipped");
        }
        for s in 0..self.n_sites() {
            self.enforce_site(s)?;
        }
        Ok(())
    }

    /// Recompute derived coefficients at one site.
    pub fn enforce_site(&mut self, site: usize) -> Result<(), ModelError> {
        let Some(q) = self.constraint.order() else {
            return Ok(());
        };
        let derived = derive_site(&self.basis, &self.theta, &self.tails[site], site, q)?;
        for (m, p, v) in derived {
            self.theta.set_coef(site, m, p, v);
        }
        Ok(())
    }

    /// Check that the constraint equations hold to relative tolerance `tol`.
    pub fn check_constraints(&self, tol: f64) -> Result<(), ModelError> {
        let Some(q) = self.constraint.order() else {
            return Ok(());
        };
        check_constraint_shape(&self.basis, q)?;
        for s in 0..self.n_sites() {
            for (m, p, want) in derive_site(&self.basis, &self.theta, &self.tails[s], s, q)? {
                let have = self.theta.coef(s, m, p);
                if (have - want).abs() > tol * want.abs().max(1e-300) && (have - want).abs() > tol {
                    return Err(ModelError::ConstraintViolated {
                        site: s,
                        m,
                        column: p,
                        have,
                        want,
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), ModelError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(ModelError::TauOutOfRange(tau))
    }
}

fn check_constraint_shape(basis: &ISplineBasis, q: usize) -> Result<(), ModelError> {
    if q > 0 && basis.degree() <= q + 1 {
        return Err(ModelError::BasisOrderTooLow {
            order: q,
            degree: basis.degree(),
            needed: q + 1,
        });
    }
    let m = basis.num_nonconstant();
    let both = basis.tau_lower() > 0.0 && basis.tau_upper() < 1.0;
    let needed = if both { 2 * (q + 1) } else { q + 1 };
    if m < needed {
        return Err(ModelError::OverlappingConstraints { order: q, m, needed });
    }
    Ok(())
}

/// Derived `(m, p, θ)` triples at one site, computed order by order.
fn derive_site(
    basis: &ISplineBasis,
    theta: &ThetaField,
    tails: &SiteTails,
    site: usize,
    q: usize,
) -> Result<Vec<(usize, usize, f64)>, ModelError> {
    let n_cols = theta.n_cols();
    let m_max = basis.num_nonconstant();
    let tl = basis.tau_lower();
    let tu = basis.tau_upper();
    let bounds = shape_upper_bound(basis);
    let mut out = Vec::with_capacity(2 * (q + 1) * n_cols);
    let mut local = vec![0.0; m_max + 1];

    if tl > 0.0 {
        for p in 0..n_cols {
            let (alpha, sigma) = (tails.alpha_lower, tails.sigma_lower[p]);
            local[1] = sigma / (tl * basis.ispline_deriv_unchecked(1, tl, 1));
            out.push((1, p, local[1]));
            for r in 1..=q {
                let order = r + 1;
                let target = gpd::lower_deriv_at_threshold(alpha, sigma, tl, order);
                let mut rest = 0.0;
                let mut scale = target.abs();
                for (m, &th) in local.iter().enumerate().take(r + 1).skip(1) {
                    let term = th * basis.ispline_deriv_unchecked(m, tl, order);
                    rest += term;
                    scale += term.abs();
                }
                let denom = basis.ispline_deriv_unchecked(order, tl, order);
                let value = settle(
                    (target - rest) / denom,
                    scale / denom.abs(),
                    || ModelError::InfeasibleShape {
                        side: TailSide::Lower,
                        site,
                        column: p,
                        index: order,
                        alpha,
                        bound: bounds.lower,
                    },
                )?;
                local[order] = value;
                out.push((order, p, value));
            }
        }
    }
    if tu < 1.0 {
        for p in 0..n_cols {
            let (alpha, sigma) = (tails.alpha_upper, tails.sigma_upper[p]);
            local[m_max] = sigma / ((1.0 - tu) * basis.ispline_deriv_unchecked(m_max, tu, 1));
            out.push((m_max, p, local[m_max]));
            for r in 1..=q {
                let order = r + 1;
                let target = gpd::upper_deriv_at_threshold(alpha, sigma, tu, order);
                let mut rest = 0.0;
                let mut scale = target.abs();
                for (m, &th) in local.iter().enumerate().skip(m_max + 1 - r) {
                    let term = th * basis.ispline_deriv_unchecked(m, tu, order);
                    rest += term;
                    scale += term.abs();
                }
                let idx = m_max - r;
                let denom = basis.ispline_deriv_unchecked(idx, tu, order);
                let value = settle(
                    (target - rest) / denom,
                    scale / denom.abs(),
                    || ModelError::InfeasibleShape {
                        side: TailSide::Upper,
                        site,
                        column: p,
                        index: idx,
                        alpha,
                        bound: bounds.upper,
                    },
                )?;
                local[idx] = value;
                out.push((idx, p, value));
            }
        }
    }
    Ok(out)
}

/// Round tiny negative cancellation error to zero; reject genuine negatives.
fn settle(
    value: f64,
    scale: f64,
    err: impl FnOnce() -> ModelError,
) -> Result<f64, ModelError> {
    if !value.is_finite() {
        return Err(err());
    }
    if value >= 0.0 {
        Ok(value)
    } else if -value <= FEASIBILITY_TOL * scale {
        Ok(0.0)
    } else {
        Err(err())
    }
}

/// JSON persistence layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    basis: BasisSpec,
    constraint: ConstraintMode,
    n_sites: usize,
    n_predictors: usize,
    /// `theta_star[site][m][p]`; `null` encodes a zero derived coefficient.
    theta_star: Vec<Vec<Vec<Option<f64>>>>,
    tails: Vec<SiteTails>,
}

impl From<QuantileModel> for ModelDocument {
    fn from(m: QuantileModel) -> Self {
        let th = &m.theta;
        let theta_star = (0..th.n_sites())
            .map(|s| {
                (0..th.n_basis())
                    .map(|b| {
                        (0..th.n_cols())
                            .map(|p| Some(th.latent(s, b, p)).filter(|v| v.is_finite()))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        ModelDocument {
            basis: m.basis.spec().clone(),
            constraint: m.constraint,
            n_sites: th.n_sites(),
            n_predictors: th.n_cols() - 1,
            theta_star,
            tails: m.tails,
        }
    }
}

impl TryFrom<ModelDocument> for QuantileModel {
    type Error = ModelError;

    fn try_from(doc: ModelDocument) -> Result<Self, Self::Error> {
        let basis = ISplineBasis::new(doc.basis)?;
        let n_basis = basis.num_nonconstant() + 1;
        let n_cols = doc.n_predictors + 1;
        let mut latent = Vec::with_capacity(doc.n_sites * n_basis * n_cols);
        if doc.theta_star.len() != doc.n_sites {
            return Err(ModelError::Dimension("theta_star site count".into()));
        }
        for rows in &doc.theta_star {
            if rows.len() != n_basis || rows.iter().any(|r| r.len() != n_cols) {
                return Err(ModelError::Dimension("theta_star shape".into()));
            }
            for row in rows {
                latent.extend(row.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
            }
        }
        let theta = ThetaField::from_latent(doc.n_sites, n_basis, n_cols, latent)?;
        let model = QuantileModel::new(basis, theta, doc.tails, doc.constraint)?;
        model.check_constraints(1e-10)?;
        Ok(model)
    }
}

impl ISplineBasis {
    /// Coefficients `θ_1..θ_M` with `Σ θ_m I_m(τ) = τ - τ_L` on the basis
    /// range (`θ_m = (t_{m+k} - t_m) / k`). Index 0 is returned as 0.
    pub fn linear_coefficients(&self) -> Vec<f64> {
        let k = self.degree();
        let t = self.knots();
        let mut out = vec![0.0];
        out.extend((1..=self.num_nonconstant()).map(|m| (t[m + k] - t[m]) / k as f64));
        out
    }
}
