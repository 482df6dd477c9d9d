//! Normalized B-spline (M-spline) and I-spline bases on the quantile level.
//!
//! The basis lives on `[tau_lower, tau_upper]` with a knot sequence whose
//! boundary values are each repeated `degree + 1` times:
//!
//! ```text
//! t_0 = ... = t_k = tau_lower < t_{k+1} < ... < t_M < t_{M+1} = ... = t_{M+1+k} = tau_upper
//! ```
//!
//! `B_m` (for `m = 1..=M`) is the order-`k` B-spline on knots `t_m..=t_{m+k}`,
//! **normalized to unit integral** (the M-spline convention). This is the only
//! normalization under which `I_m(tau) = ∫ B_m` rises from exactly 0 at
//! `tau_lower` to exactly 1 at `tau_upper`, which the upper-tail location
//! `Σ_m θ_m` of the quantile model relies on. `I_m` is therefore a piecewise
//! polynomial of degree `k`. `B_0 ≡ 0` and `I_0 ≡ 1`.
//!
//! Every basis function is converted to explicit polynomial pieces at
//! construction, so values, derivatives of any order, and integrals are exact
//! polynomial operations afterwards.
//!
//! Evaluation at an interior knot uses the piece to the right of the knot;
//! at `tau_upper` the last piece (a left limit) is used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("degree must be at least 2, got {0}")]
    InvalidDegree(usize),

    #[error("thresholds must satisfy 0 <= tau_lower < tau_upper <= 1, got ({0}, {1})")]
    InvalidThresholds(f64, f64),

    #[error("interior knots must be strictly increasing inside ({lower}, {upper})")]
    InvalidKnots { lower: f64, upper: f64 },

    #[error("basis index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("tau = {tau} outside [{lower}, {upper}]")]
    TauOutOfRange { tau: f64, lower: f64, upper: f64 },

    #[error("derivative order {order} not supported for degree {degree} (need 1 <= order <= degree)")]
    UnsupportedOrder { order: usize, degree: usize },
}

/// Serializable description of a basis: enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub interior_knots: Vec<f64>,
}

impl BasisSpec {
    /// Interior knots equally spaced in `(tau_lower, tau_upper)`, sized so the
    /// basis has `num_nonconstant` non-constant functions.
    pub fn equally_spaced(
        degree: usize,
        num_nonconstant: usize,
        tau_lower: f64,
        tau_upper: f64,
    ) -> Result<Self, SplineError> {
        if degree < 2 {
            return Err(SplineError::InvalidDegree(degree));
        }
        if num_nonconstant < degree {
            return Err(SplineError::InvalidKnots {
                lower: tau_lower,
                upper: tau_upper,
            });
        }
        let n_interior = num_nonconstant - degree;
        let width = tau_upper - tau_lower;
        let interior_knots = (1..=n_interior)
            .map(|i| tau_lower + width * i as f64 / (n_interior + 1) as f64)
            .collect();
        Ok(Self {
            degree,
            tau_lower,
            tau_upper,
            interior_knots,
        })
    }
}

/// Polynomial piece of every basis function on one knot interval, in the
/// local variable `u = tau - left`.
#[derive(Debug, Clone)]
struct Piece {
    left: f64,
    right: f64,
    /// `mspline[m]` has `degree` coefficients (degree `k - 1` polynomial).
    mspline: Vec<Vec<f64>>,
    /// `ispline[m]` has `degree + 1` coefficients.
    ispline: Vec<Vec<f64>>,
}

/// I-spline basis with `M` non-constant functions plus the constant `I_0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "BasisSpec", into = "BasisSpec")]
pub struct ISplineBasis {
    spec: BasisSpec,
    knots: Vec<f64>,
    num_nonconstant: usize,
    pieces: Vec<Piece>,
    /// Distinct breakpoints `tau_lower, interior..., tau_upper`.
    breaks: Vec<f64>,
    /// `break_values[b][m] = I_m(breaks[b])`.
    break_values: Vec<Vec<f64>>,
    integrals: Vec<f64>,
}

impl PartialEq for ISplineBasis {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl TryFrom<BasisSpec> for ISplineBasis {
    type Error = SplineError;

    fn try_from(spec: BasisSpec) -> Result<Self, Self::Error> {
        ISplineBasis::new(spec)
    }
}

impl From<ISplineBasis> for BasisSpec {
    fn from(b: ISplineBasis) -> Self {
        b.spec
    }
}

fn poly_eval(coef: &[f64], u: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * u + c)
}

/// `order`-th derivative of a polynomial in ascending-coefficient form.
fn poly_deriv_eval(coef: &[f64], u: f64, order: usize) -> f64 {
    if order == 0 {
        return poly_eval(coef, u);
    }
    let mut acc = 0.0;
    for n in (order..coef.len()).rev() {
        let falling: f64 = ((n - order + 1)..=n).map(|j| j as f64).product();
        acc = acc * u + coef[n] * falling;
    }
    acc
}

/// `(a + b u) * p(u)`
fn poly_mul_linear(p: &[f64], a: f64, b: f64, out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (i, &c) in p.iter().enumerate() {
        if i < out_len {
            out[i] += a * c;
        }
        if i + 1 < out_len {
            out[i + 1] += b * c;
        }
    }
    out
}

impl ISplineBasis {
    pub fn new(spec: BasisSpec) -> Result<Self, SplineError> {
        let k = spec.degree;
        if k < 2 {
            return Err(SplineError::InvalidDegree(k));
        }
        let (lo, hi) = (spec.tau_lower, spec.tau_upper);
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(SplineError::InvalidThresholds(lo, hi));
        }
        let mut prev = lo;
        for &t in &spec.interior_knots {
            if !(t.is_finite() && t > prev && t < hi) {
                return Err(SplineError::InvalidKnots {
                    lower: lo,
                    upper: hi,
                });
            }
            prev = t;
        }

        let num_nonconstant = spec.interior_knots.len() + k;
        let mut knots = vec![lo; k + 1];
        knots.extend_from_slice(&spec.interior_knots);
        knots.extend(std::iter::repeat_n(hi, k + 1));

        let mut breaks = vec![lo];
        breaks.extend_from_slice(&spec.interior_knots);
        breaks.push(hi);

        // Non-empty knot intervals are [t_j, t_{j+1}) for j = k..=M.
        let mut pieces = Vec::with_capacity(num_nonconstant - k + 1);
        for j in k..=num_nonconstant {
            pieces.push(Self::build_piece(&knots, j, k, num_nonconstant));
        }

        // Integrate the M-spline pieces cumulatively to get I-spline pieces.
        let mut running = vec![0.0; num_nonconstant + 1];
        for piece in pieces.iter_mut() {
            let h = piece.right - piece.left;
            let mut ispline = vec![vec![0.0; k + 1]; num_nonconstant + 1];
            ispline[0][0] = 1.0;
            for m in 1..=num_nonconstant {
                let ms = &piece.mspline[m];
                let ip = &mut ispline[m];
                ip[0] = running[m];
                for (n, &c) in ms.iter().enumerate() {
                    ip[n + 1] = c / (n + 1) as f64;
                }
                running[m] = poly_eval(ip, h);
            }
            piece.ispline = ispline;
        }

        let mut basis = Self {
            spec,
            knots,
            num_nonconstant,
            pieces,
            breaks,
            break_values: Vec::new(),
            integrals: Vec::new(),
        };
        basis.break_values = basis
            .breaks
            .iter()
            .map(|&b| {
                (0..=num_nonconstant)
                    .map(|m| basis.ispline_unchecked(m, b))
                    .collect()
            })
            .collect();
        basis.integrals = (0..=num_nonconstant)
            .map(|m| basis.unit_integral(m))
            .collect();
        Ok(basis)
    }

    /// Default layout: interior knots equally spaced.
    pub fn equally_spaced(
        degree: usize,
        num_nonconstant: usize,
        tau_lower: f64,
        tau_upper: f64,
    ) -> Result<Self, SplineError> {
        Self::new(BasisSpec::equally_spaced(
            degree,
            num_nonconstant,
            tau_lower,
            tau_upper,
        )?)
    }

    /// Cox-de Boor recursion carried out on polynomial coefficients over the
    /// single interval `[t_j, t_{j+1})`.
    fn build_piece(knots: &[f64], j: usize, k: usize, m_max: usize) -> Piece {
        let left = knots[j];
        let right = knots[j + 1];
        let n_fun = knots.len() - 1;
        // order 1
        let mut cur: Vec<Vec<f64>> = (0..n_fun)
            .map(|i| if i == j { vec![1.0] } else { vec![0.0] })
            .collect();
        for r in 2..=k {
            let mut next = Vec::with_capacity(n_fun);
            for i in 0..n_fun.saturating_sub(r - 1) {
                let mut poly = vec![0.0; r];
                let d1 = knots[i + r - 1] - knots[i];
                if d1 > 0.0 {
                    let a = (left - knots[i]) / d1;
                    let p = poly_mul_linear(&cur[i], a, 1.0 / d1, r);
                    poly.iter_mut().zip(p).for_each(|(x, y)| *x += y);
                }
                let d2 = knots[i + r] - knots[i + 1];
                if d2 > 0.0 && i + 1 < cur.len() {
                    let a = (knots[i + r] - left) / d2;
                    let p = poly_mul_linear(&cur[i + 1], a, -1.0 / d2, r);
                    poly.iter_mut().zip(p).for_each(|(x, y)| *x += y);
                }
                next.push(poly);
            }
            cur = next;
        }
        let mut mspline = vec![vec![0.0; k]; m_max + 1];
        for (m, slot) in mspline.iter_mut().enumerate().skip(1) {
            let span = knots[m + k] - knots[m];
            let scale = k as f64 / span;
            let mut p = cur[m].clone();
            p.resize(k, 0.0);
            *slot = p.into_iter().map(|c| c * scale).collect();
        }
        Piece {
            left,
            right,
            mspline,
            ispline: Vec::new(),
        }
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn degree(&self) -> usize {
        self.spec.degree
    }

    pub fn tau_lower(&self) -> f64 {
        self.spec.tau_lower
    }

    pub fn tau_upper(&self) -> f64 {
        self.spec.tau_upper
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.spec.interior_knots
    }

    /// `M`, the number of non-constant I-splines.
    pub fn num_nonconstant(&self) -> usize {
        self.num_nonconstant
    }

    /// Full knot sequence, boundary values repeated `degree + 1` times.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub(crate) fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub(crate) fn break_values(&self, b: usize) -> &[f64] {
        &self.break_values[b]
    }

    pub(crate) fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    pub(crate) fn piece_left(&self, piece: usize) -> f64 {
        self.pieces[piece].left
    }

    pub(crate) fn piece_right(&self, piece: usize) -> f64 {
        self.pieces[piece].right
    }

    pub(crate) fn piece_ispline(&self, piece: usize, m: usize) -> &[f64] {
        &self.pieces[piece].ispline[m]
    }

    /// Index of the polynomial piece used for `tau` (right-continuous, with
    /// `tau_upper` mapped to the last piece). Assumes `tau` is in range.
    pub(crate) fn locate(&self, tau: f64) -> usize {
        let last = self.pieces.len() - 1;
        // first piece whose right end is > tau
        let idx = self.pieces.partition_point(|p| p.right <= tau);
        idx.min(last)
    }

    fn check_tau(&self, tau: f64) -> Result<(), SplineError> {
        if tau.is_nan() || tau < self.spec.tau_lower || tau > self.spec.tau_upper {
            return Err(SplineError::TauOutOfRange {
                tau,
                lower: self.spec.tau_lower,
                upper: self.spec.tau_upper,
            });
        }
        Ok(())
    }

    fn check_index(&self, m: usize) -> Result<(), SplineError> {
        if m > self.num_nonconstant {
            return Err(SplineError::IndexOutOfRange {
                index: m,
                max: self.num_nonconstant,
            });
        }
        Ok(())
    }

    /// Normalized B-spline `B_m(tau)`; `B_0` is identically zero.
    pub fn bspline(&self, m: usize, tau: f64) -> Result<f64, SplineError> {
        self.check_index(m)?;
        self.check_tau(tau)?;
        Ok(self.bspline_unchecked(m, tau))
    }

    pub(crate) fn bspline_unchecked(&self, m: usize, tau: f64) -> f64 {
        if m == 0 {
            return 0.0;
        }
        let p = &self.pieces[self.locate(tau)];
        poly_eval(&p.mspline[m], tau - p.left)
    }

    /// I-spline `I_m(tau)`; `I_0 ≡ 1`.
    pub fn ispline(&self, m: usize, tau: f64) -> Result<f64, SplineError> {
        self.check_index(m)?;
        self.check_tau(tau)?;
        Ok(self.ispline_unchecked(m, tau))
    }

    pub(crate) fn ispline_unchecked(&self, m: usize, tau: f64) -> f64 {
        if m == 0 {
            return 1.0;
        }
        if tau <= self.spec.tau_lower {
            return 0.0;
        }
        if tau >= self.spec.tau_upper {
            return 1.0;
        }
        let p = &self.pieces[self.locate(tau)];
        poly_eval(&p.ispline[m], tau - p.left)
    }

    /// `order`-th derivative of `I_m` at `tau`, for `1 <= order <= degree`.
    /// At the thresholds the derivative is one-sided (from inside the basis
    /// range); at interior knots the right-hand piece is used.
    pub fn ispline_deriv(&self, m: usize, tau: f64, order: usize) -> Result<f64, SplineError> {
        if order == 0 || order > self.spec.degree {
            return Err(SplineError::UnsupportedOrder {
                order,
                degree: self.spec.degree,
            });
        }
        self.check_index(m)?;
        self.check_tau(tau)?;
        Ok(self.ispline_deriv_unchecked(m, tau, order))
    }

    pub(crate) fn ispline_deriv_unchecked(&self, m: usize, tau: f64, order: usize) -> f64 {
        if m == 0 {
            return 0.0;
        }
        let p = &self.pieces[self.locate(tau)];
        poly_deriv_eval(&p.ispline[m], tau - p.left, order)
    }

    /// `G_m = ∫_0^1 I_m(tau) dtau`, with `I_m` extended by 0 below
    /// `tau_lower` and 1 above `tau_upper`. For the tail-free basis
    /// (`tau_lower = 0`, `tau_upper = 1`) this is the plain integral.
    pub fn integral(&self, m: usize) -> Result<f64, SplineError> {
        self.check_index(m)?;
        Ok(self.integrals[m])
    }

    pub fn integrals(&self) -> &[f64] {
        &self.integrals
    }

    fn unit_integral(&self, m: usize) -> f64 {
        if m == 0 {
            return 1.0;
        }
        let inner: f64 = self
            .pieces
            .iter()
            .map(|p| {
                let h = p.right - p.left;
                p.ispline[m]
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| c * h.powi(n as i32 + 1) / (n + 1) as f64)
                    .sum::<f64>()
            })
            .sum();
        inner + (1.0 - self.spec.tau_upper)
    }
}
