//! RMISE, interval coverage and log scores.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{fmt_f64, CurvePoint};
use crate::simulate::TruthPoint;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("quantile levels must be strictly increasing inside (0, 1)")]
    BadLevels,

    #[error("grid origin {origin} must be below the first level {first}")]
    BadOrigin { origin: f64, first: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("interval at site {site}, level {level} has lower > upper")]
    InvertedInterval { site: usize, level: usize },

    #[error("need at least one value")]
    Empty,

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Levels `τ_1 < … < τ_J` with weights `δ_j = τ_j − τ_{j−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
    weights: Vec<f64>,
}

impl QuantileGrid {
    /// Build a grid; `origin` is `τ_0`, defaulting to `τ_1 − (τ_2 − τ_1)`.
    pub fn new(levels: Vec<f64>, origin: Option<f64>) -> Result<Self, ScoringError> {
        if levels.is_empty()
            || levels.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || levels.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(ScoringError::BadLevels);
        }
        let first = levels[0];
        let origin = match (origin, levels.get(1)) {
            (Some(o), _) => o,
            (None, Some(&second)) => first - (second - first),
            (None, None) => 0.0,
        };
        if origin >= first {
            return Err(ScoringError::BadOrigin { origin, first });
        }
        let mut weights = Vec::with_capacity(levels.len());
        weights.push(first - origin);
        weights.extend(levels.windows(2).map(|w| w[1] - w[0]));
        Ok(Self { levels, weights })
    }

    /// `{start, start + step, …, end}` in integer units of `1 / denom`.
    pub fn regular(start: u32, end: u32, step: u32, denom: u32) -> Result<Self, ScoringError> {
        let levels = (start..=end)
            .step_by(step as usize)
            .map(|k| k as f64 / denom as f64)
            .collect();
        Self::new(levels, None)
    }

    /// `τ = 0.05, 0.06, …, 0.95`
    pub fn central() -> Self {
        Self::regular(5, 95, 1, 100).expect("valid grid")
    }

    /// `τ = 0.950, 0.951, …, 0.995`
    pub fn upper_tail() -> Self {
        Self::regular(950, 995, 1, 1000).expect("valid grid")
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

fn check_shape(a: &[Vec<f64>], b: &[Vec<f64>], j: usize) -> Result<(), ScoringError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(ScoringError::Shape(format!("{} vs {} sites", a.len(), b.len())));
    }
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.len() != j || rb.len() != j {
            return Err(ScoringError::Shape(format!(
                "site {i}: {} and {} levels for a grid of {j}",
                ra.len(),
                rb.len()
            )));
        }
    }
    Ok(())
}

/// `sqrt((1/S) Σ_i Σ_j δ_j (β̂ − β)²)` with arrays laid out `[site][level]`.
pub fn rmise(estimates: &[Vec<f64>], truth: &[Vec<f64>], grid: &QuantileGrid) -> Result<f64, ScoringError> {
    check_shape(estimates, truth, grid.len())?;
    let mut acc = 0.0;
    for (est, tru) in estimates.iter().zip(truth) {
        for ((e, t), w) in est.iter().zip(tru).zip(grid.weights()) {
            acc += w * (e - t).powi(2);
        }
    }
    Ok((acc / estimates.len() as f64).sqrt())
}

/// Fraction of cells whose closed interval `[lower, upper]` contains the truth.
pub fn coverage(lower: &[Vec<f64>], upper: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, ScoringError> {
    let j = truth.first().map_or(0, Vec::len);
    check_shape(lower, truth, j)?;
    check_shape(upper, truth, j)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (i, ((lo, hi), tr)) in lower.iter().zip(upper).zip(truth).enumerate() {
        for (k, ((&l, &h), &t)) in lo.iter().zip(hi).zip(tr).enumerate() {
            if l > h {
                return Err(ScoringError::InvertedInterval { site: i, level: k });
            }
            total += 1;
            if l <= t && t <= h {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(ScoringError::Empty);
    }
    Ok(hit as f64 / total as f64)
}

/// Mean and standard error of a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Result<Self, ScoringError> {
        let n = values.len();
        if n == 0 {
            return Err(ScoringError::Empty);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, se, n })
    }
}

/// Mean log density over observations; zeros give `−∞`.
pub fn log_score(densities: &[f64]) -> Result<MeanSe, ScoringError> {
    let logs: Vec<f64> = densities.iter().map(|d| d.ln()).collect();
    MeanSe::of(&logs)
}

/// RMISE and interval coverage of one coefficient, matching estimates to
/// the truth by `(site, τ)`. Every grid level must be present for every
/// site that appears in the truth.
pub fn score_curves(
    estimates: &[CurvePoint],
    truth: &[TruthPoint],
    grid: &QuantileGrid,
    p: usize,
) -> Result<(f64, f64), ScoringError> {
    let key = |site: usize, tau: f64| (site, (tau * 1e9).round() as i64);
    let est: HashMap<_, _> = estimates.iter().filter(|c| c.p == p).map(|c| (key(c.site, c.tau), c)).collect();
    let tru: HashMap<_, _> = truth.iter().filter(|t| t.p == p).map(|t| (key(t.site, t.tau), t.value)).collect();
    let mut sites: Vec<usize> = truth.iter().filter(|t| t.p == p).map(|t| t.site).collect();
    sites.sort_unstable();
    sites.dedup();
    if sites.is_empty() {
        return Err(ScoringError::Shape(format!("no truth for coefficient {p}")));
    }
    let (mut e, mut lo, mut hi, mut t) = (vec![], vec![], vec![], vec![]);
    for &s in &sites {
        let (mut re, mut rl, mut rh, mut rt) = (vec![], vec![], vec![], vec![]);
        for &tau in grid.levels() {
            let k = key(s, tau);
            let (Some(c), Some(&v)) = (est.get(&k), tru.get(&k)) else {
                return Err(ScoringError::Shape(format!("coefficient {p}, site {s}: no value at level {tau}")));
            };
            re.push(c.mean);
            rl.push(c.lower);
            rh.push(c.upper);
            rt.push(v);
        }
        e.push(re);
        lo.push(rl);
        hi.push(rh);
        t.push(rt);
    }
    Ok((rmise(&e, &t, grid)?, coverage(&lo, &hi, &t)?))
}

/// One coefficient row of a simulation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientScore {
    pub method: String,
    pub design: String,
    pub grid: String,
    pub coefficient: String,
    pub rmise_mean: f64,
    pub rmise_se: f64,
    pub coverage: f64,
    pub replicates: usize,
}

/// One log-score row of a simulation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogScoreRow {
    pub method: String,
    pub design: String,
    pub in_sample_mean: f64,
    pub in_sample_se: f64,
    pub out_of_sample_mean: f64,
    pub out_of_sample_se: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub coefficients: Vec<CoefficientScore>,
    pub log_scores: Vec<LogScoreRow>,
}

impl ScoreReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Coefficient rows as CSV (`method, design, grid, coefficient, rmise,
    /// se, coverage, replicates`).
    pub fn write_coefficients_csv<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "design", "grid", "coefficient", "rmise", "se", "coverage", "replicates"])?;
        for r in &self.coefficients {
            wr.write_record([
                r.method.clone(),
                r.design.clone(),
                r.grid.clone(),
                r.coefficient.clone(),
                fmt_f64(r.rmise_mean),
                fmt_f64(r.rmise_se),
                fmt_f64(r.coverage),
                r.replicates.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_log_scores_csv<W: Write>(&self, w: W) -> Result<(), ScoringError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "design", "in_sample", "in_se", "out_of_sample", "out_se", "replicates"])?;
        for r in &self.log_scores {
            wr.write_record([
                r.method.clone(),
                r.design.clone(),
                fmt_f64(r.in_sample_mean),
                fmt_f64(r.in_sample_se),
                fmt_f64(r.out_of_sample_mean),
                fmt_f64(r.out_of_sample_se),
                r.replicates.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> QuantileGrid {
        QuantileGrid::central()
    }

    #[test]
    fn default_grids() {
        let g = QuantileGrid::central();
        assert_eq!(g.len(), 91);
        assert_eq!(g.levels()[0], 0.05);
        assert_eq!(g.levels()[90], 0.95);
        assert!(g.weights().iter().all(|&w| (w - 0.01).abs() < 1e-12));
        let t = QuantileGrid::upper_tail();
        assert_eq!(t.len(), 46);
        assert_eq!(t.levels()[45], 0.995);
        assert!((t.weights()[0] - 0.001).abs() < 1e-12);
    }

    #[test]
    fn grid_validation() {
        assert!(QuantileGrid::new(vec![0.2, 0.1], None).is_err());
        assert!(QuantileGrid::new(vec![0.0, 0.1], None).is_err());
        assert!(QuantileGrid::new(vec![0.2, 0.3], Some(0.25)).is_err());
        let g = QuantileGrid::new(vec![0.2, 0.3], Some(0.0)).unwrap();
        assert_eq!(g.weights()[0], 0.2);
    }

    #[test]
    fn rmise_cases() {
        let g = grid();
        let truth = vec![g.levels().to_vec(); 3];
        assert_eq!(rmise(&truth, &truth, &g).unwrap(), 0.0);
        let d = 0.37;
        let est: Vec<Vec<f64>> = truth.iter().map(|r| r.iter().map(|v| v + d).collect()).collect();
        let want = d * g.weights().iter().sum::<f64>().sqrt();
        // brute force
        let mut brute = 0.0;
        for i in 0..3 {
            for j in 0..g.len() {
                brute += g.weights()[j] * (est[i][j] - truth[i][j]).powi(2);
            }
        }
        let brute = (brute / 3.0).sqrt();
        let got = rmise(&est, &truth, &g).unwrap();
        assert!((got - want).abs() < 1e-12 && (got - brute).abs() < 1e-14);
        assert!(rmise(&est[..2], &truth, &g).is_err());
    }

    #[test]
    fn coverage_cases() {
        let truth = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        let inf = vec![vec![f64::NEG_INFINITY; 2]; 2];
        let sup = vec![vec![f64::INFINITY; 2]; 2];
        assert_eq!(coverage(&inf, &sup, &truth).unwrap(), 1.0);
        assert_eq!(coverage(&truth, &truth, &truth).unwrap(), 1.0);
        let lo = vec![vec![-1.0, 5.0], vec![1.0, 4.0]];
        let hi = vec![vec![1.0, 6.0], vec![3.0, 5.0]];
        assert_eq!(coverage(&lo, &hi, &truth).unwrap(), 0.5);
        assert!(matches!(
            coverage(&hi, &lo, &truth),
            Err(ScoringError::InvertedInterval { .. })
        ));
    }

    #[test]
    fn log_score_cases() {
        assert_eq!(log_score(&[1.0; 5]).unwrap().mean, 0.0);
        assert!((log_score(&[std::f64::consts::E; 4]).unwrap().mean - 1.0).abs() < 1e-15);
        let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((log_score(&[phi0]).unwrap().mean + 0.918_938_533).abs() < 1e-9);
        assert_eq!(log_score(&[1.0, 0.0]).unwrap().mean, f64::NEG_INFINITY);
    }

    #[test]
    fn replicate_se() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn report_csv() {
        let r = ScoreReport {
            coefficients: vec![CoefficientScore {
                method: "IQR".into(),
                design: "D1".into(),
                grid: "central".into(),
                coefficient: "beta0".into(),
                rmise_mean: 0.0,
                rmise_se: 0.0,
                coverage: 1.0,
                replicates: 1,
            }],
            log_scores: vec![],
        };
        let mut buf = Vec::new();
        r.write_coefficients_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("IQR,D1,central,beta0,0.0,0.0,1.0,1"));
    }

    proptest! {
        #[test]
        fn rmise_homogeneous_and_sign_symmetric(
            errs in proptest::collection::vec(-1.0f64..1.0, 91),
            k in 0.1f64..5.0,
        ) {
            let g = grid();
            let truth = vec![vec![0.0; 91]];
            let e1 = vec![errs.clone()];
            let neg = vec![errs.iter().map(|v| -v).collect::<Vec<_>>()];
            let scaled = vec![errs.iter().map(|v| k * v).collect::<Vec<_>>()];
            let r = rmise(&e1, &truth, &g).unwrap();
            prop_assert!((rmise(&neg, &truth, &g).unwrap() - r).abs() < 1e-14);
            prop_assert!((rmise(&scaled, &truth, &g).unwrap() - k * r).abs() < 1e-12);
        }

        #[test]
        fn log_score_order_invariant(mut d in proptest::collection::vec(0.01f64..10.0, 1..50)) {
            let a = log_score(&d).unwrap().mean;
            d.reverse();
            let b = log_score(&d).unwrap().mean;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
