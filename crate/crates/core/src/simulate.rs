//! The four simulation designs: true coefficient functions and data
//! generation `y = β_0(u) + β_1(u) x_1 + β_2(u) x_2` with `u ~ Uniform(0,1)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::covariance::{cholesky_jittered, Coord, Correlation, CovarianceError, Metric};
use crate::gpd;
use crate::inference::{fmt_f64, DataError, Dataset, TRAIN_FOLD, VALIDATION_FOLD};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("unknown design `{0}` (expected D1, D2, D3 or D4)")]
    UnknownDesign(String),

    #[error("coefficient index {0} out of range (designs have p = 0, 1, 2)")]
    BadColumn(usize),

    #[error("validation fraction {0} must lie in [0, 1)")]
    BadFraction(f64),

    #[error("design needs at least one site and one observation per site")]
    Empty,

    #[error(transparent)]
    Covariance(#[from] CovarianceError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignId {
    D1,
    D2,
    D3,
    D4,
}

impl DesignId {
    pub const ALL: [DesignId; 4] = [DesignId::D1, DesignId::D2, DesignId::D3, DesignId::D4];

    pub fn is_spatial(self) -> bool {
        matches!(self, DesignId::D3 | DesignId::D4)
    }
}

impl fmt::Display for DesignId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for DesignId {
    type Err = SimulateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(DesignId::D1),
            "D2" => Ok(DesignId::D2),
            "D3" => Ok(DesignId::D3),
            "D4" => Ok(DesignId::D4),
            _ => Err(SimulateError::UnknownDesign(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub id: DesignId,
    pub n_per_site: usize,
    pub sites: Vec<Coord>,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl DesignSpec {
    /// The study layout: one site with 1000 rows for D1/D2, a 4×4 grid with
    /// 100 rows per site for D3/D4, and 10% held out.
    pub fn standard(id: DesignId, seed: u64) -> Self {
        let (n_per_site, sites) = if id.is_spatial() {
            (100, grid_sites(4))
        } else {
            (1000, vec![[0.0, 0.0]])
        };
        Self {
            id,
            n_per_site,
            sites,
            seed,
            validation_fraction: 0.1,
        }
    }
}

/// `k × k` evenly spaced grid on the unit square, corners included.
pub fn grid_sites(k: usize) -> Vec<Coord> {
    let step = if k > 1 { 1.0 / (k - 1) as f64 } else { 0.0 };
    let mut out = Vec::with_capacity(k * k);
    for j in 0..k {
        for i in 0..k {
            out.push([i as f64 * step, j as f64 * step]);
        }
    }
    out
}

/// `μ + (σ/α)[(1-τ)^{-α} - 1]`, with the `α → 0` limit `μ - σ ln(1-τ)`.
pub fn pareto_quantile(tau: f64, alpha: f64, mu: f64, sigma: f64) -> f64 {
    mu + gpd::upper_increment(alpha, sigma, 0.0, tau)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn probit(tau: f64) -> f64 {
    std_normal().inverse_cdf(tau)
}

/// True `β_p(τ, s)` for a design.
pub fn true_beta(id: DesignId, p: usize, tau: f64, s: &Coord) -> Result<f64, SimulateError> {
    let v = match (id, p) {
        (DesignId::D1 | DesignId::D2, 0) => 0.1 * probit(tau),
        (DesignId::D1 | DesignId::D2, 1) => 0.3 * tau,
        (DesignId::D1, 2) => pareto_quantile(tau, -0.2, 0.0, 0.1),
        (DesignId::D2, 2) => pareto_quantile(tau, 0.3, 0.0, 0.3),
        (DesignId::D3 | DesignId::D4, 0) => (0.05 + 0.2 * s[0] * s[1]) * probit(tau),
        (DesignId::D3 | DesignId::D4, 1) => 0.3 * s[1].exp() + 0.2 * tau,
        (DesignId::D3, 2) => pareto_quantile(tau, -0.1, 0.0, 0.1),
        (DesignId::D4, 2) => pareto_quantile(tau, 0.4 * s[0], 0.3, 0.4),
        _ => return Err(SimulateError::BadColumn(p)),
    };
    Ok(v)
}

/// The response for level `u` at site `s` with predictors `(x1, x2)`.
pub fn response(id: DesignId, u: f64, s: &Coord, x1: f64, x2: f64) -> f64 {
    let b = |p| true_beta(id, p, u, s).expect("p < 3");
    b(0) + b(1) * x1 + b(2) * x2
}

/// True coefficient values on a level grid, laid out `[site][level]`.
pub fn truth_grid(spec: &DesignSpec, p: usize, levels: &[f64]) -> Result<Vec<Vec<f64>>, SimulateError> {
    spec.sites
        .iter()
        .map(|s| levels.iter().map(|&t| true_beta(spec.id, p, t, s)).collect())
        .collect()
}

/// One true coefficient value `β_p(τ, s_site)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub p: usize,
    pub site: usize,
    pub tau: f64,
    pub value: f64,
}

/// True coefficients of every column at every site on `levels`.
pub fn truth_points(spec: &DesignSpec, levels: &[f64]) -> Result<Vec<TruthPoint>, SimulateError> {
    let mut out = Vec::new();
    for p in 0..3 {
        for (site, s) in spec.sites.iter().enumerate() {
            for &tau in levels {
                out.push(TruthPoint {
                    p,
                    site,
                    tau,
                    value: true_beta(spec.id, p, tau, s)?,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_truth_csv<W: Write>(points: &[TruthPoint], w: W) -> Result<(), SimulateError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["p", "site", "tau", "value"])?;
    for t in points {
        wr.write_record([t.p.to_string(), t.site.to_string(), fmt_f64(t.tau), fmt_f64(t.value)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: Read>(r: R) -> Result<Vec<TruthPoint>, SimulateError> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// A generated dataset with its latent levels.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub spec: DesignSpec,
    pub data: Dataset,
    pub u: Vec<f64>,
}

/// Summary written next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationManifest {
    pub design: DesignId,
    pub seed: u64,
    pub n_sites: usize,
    pub n_per_site: usize,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub fold_labels: String,
    pub x1_construction: String,
}

impl Simulated {
    pub fn manifest(&self) -> SimulationManifest {
        let n_validation = (0..self.data.len())
            .filter(|&r| self.data.fold(r) == Some(VALIDATION_FOLD))
            .count();
        SimulationManifest {
            design: self.spec.id,
            seed: self.spec.seed,
            n_sites: self.spec.sites.len(),
            n_per_site: self.spec.n_per_site,
            n_rows: self.data.len(),
            n_train: self.data.len() - n_validation,
            n_validation,
            fold_labels: format!("{TRAIN_FOLD} = training, {VALIDATION_FOLD} = validation"),
            x1_construction: if self.spec.id.is_spatial() {
                "x1 = Phi(z), z a unit-variance Gaussian process with correlation exp(-d); \
                 the design text writes Phi^-1(z), which is undefined for Gaussian z"
                    .into()
            } else {
                "x1 ~ Uniform(0, 1)".into()
            },
        }
    }
}

pub fn gen_design(spec: &DesignSpec) -> Result<Simulated, SimulateError> {
    gen_design_with(spec, None)
}

/// Generate a dataset; `fixed_u` replaces every latent level (test hook).
pub fn gen_design_with(spec: &DesignSpec, fixed_u: Option<f64>) -> Result<Simulated, SimulateError> {
    if !(0.0..1.0).contains(&spec.validation_fraction) {
        return Err(SimulateError::BadFraction(spec.validation_fraction));
    }
    let n_sites = spec.sites.len();
    if n_sites == 0 || spec.n_per_site == 0 {
        return Err(SimulateError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = std_normal();

    let chol = if spec.id.is_spatial() {
        let corr = Correlation::exponential(1.0)?;
        let c = nalgebra::DMatrix::from_fn(n_sites, n_sites, |i, j| {
            corr.at_distance(Metric::Euclidean.distance(&spec.sites[i], &spec.sites[j]))
        });
        Some(cholesky_jittered(&c)?)
    } else {
        None
    };

    let n = n_sites * spec.n_per_site;
    let (mut site, mut time, mut x, mut y, mut u_all) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(2 * n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for t in 0..spec.n_per_site {
        let x1: Vec<f64> = match &chol {
            Some(l) => {
                let z = DVector::from_fn(n_sites, |_, _| rng.sample::<f64, _>(StandardNormal));
                (l * z).iter().map(|&v| normal.cdf(v)).collect()
            }
            None => (0..n_sites).map(|_| rng.random::<f64>()).collect(),
        };
        for (i, s) in spec.sites.iter().enumerate() {
            let x2: f64 = rng.random();
            let draw: f64 = rng.random();
            let u = fixed_u.unwrap_or(draw);
            site.push(i);
            time.push(t);
            x.push(x1[i]);
            x.push(x2);
            y.push(response(spec.id, u, s, x1[i], x2));
            u_all.push(u);
        }
    }
    let n_val = (spec.validation_fraction * n as f64).round() as usize;
    let mut fold = vec![Some(TRAIN_FOLD); n];
    for r in rand::seq::index::sample(&mut rng, n, n_val) {
        fold[r] = Some(VALIDATION_FOLD);
    }
    let data = Dataset::new(spec.sites.clone(), 2, site, time, x, y, fold)?;
    Ok(Simulated {
        spec: spec.clone(),
        data,
        u: u_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let s = [0.3, 0.0];
        assert_eq!(true_beta(DesignId::D1, 0, 0.5, &s).unwrap(), 0.0);
        assert!((true_beta(DesignId::D3, 1, 0.0, &s).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(true_beta(DesignId::D2, 2, 0.0, &s).unwrap(), 0.0);
        let v = true_beta(DesignId::D2, 2, 0.5, &s).unwrap();
        assert!((v - (2f64.powf(0.3) - 1.0)).abs() < 1e-12);
        // D4 at s1 = 0 is the exponential limit
        let v = true_beta(DesignId::D4, 2, 0.5, &[0.0, 0.5]).unwrap();
        assert!((v - (0.3 + 0.4 * 2f64.ln())).abs() < 1e-12);
        assert!(matches!(
            true_beta(DesignId::D1, 3, 0.5, &s),
            Err(SimulateError::BadColumn(3))
        ));
        assert_eq!("d3".parse::<DesignId>().unwrap(), DesignId::D3);
    }

    #[test]
    fn grid_layout() {
        let g = grid_sites(4);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], [0.0, 0.0]);
        assert_eq!(g[15], [1.0, 1.0]);
        assert!((g[1][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn counts_and_split() {
        let sim = gen_design(&DesignSpec::standard(DesignId::D1, 7)).unwrap();
        assert_eq!(sim.data.len(), 1000);
        assert_eq!(sim.data.training().len(), 900);
        assert_eq!(sim.data.validation().len(), 100);
        let m = sim.manifest();
        assert_eq!((m.n_train, m.n_validation), (900, 100));
        let sim = gen_design(&DesignSpec::standard(DesignId::D4, 7)).unwrap();
        assert_eq!(sim.data.len(), 1600);
        assert_eq!(sim.data.n_sites(), 16);
    }

    #[test]
    fn deterministic() {
        let spec = DesignSpec::standard(DesignId::D3, 42);
        let a = gen_design(&spec).unwrap();
        let b = gen_design(&spec).unwrap();
        assert_eq!(a.data, b.data);
        let c = gen_design(&DesignSpec::standard(DesignId::D3, 43)).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn fixed_level_hook() {
        let spec = DesignSpec::standard(DesignId::D4, 3);
        let sim = gen_design_with(&spec, Some(0.5)).unwrap();
        for r in 0..sim.data.len() {
            let s = sim.data.sites()[sim.data.site(r)];
            let x = sim.data.x(r);
            let want = true_beta(spec.id, 0, 0.5, &s).unwrap()
                + true_beta(spec.id, 1, 0.5, &s).unwrap() * x[0]
                + true_beta(spec.id, 2, 0.5, &s).unwrap() * x[1];
            assert_eq!(sim.data.y(r), want);
        }
    }

    #[test]
    fn spatial_predictor_in_unit_interval() {
        let sim = gen_design(&DesignSpec::standard(DesignId::D3, 1)).unwrap();
        let x1 = sim.data.predictor(1);
        assert!(x1.iter().all(|&v| v > 0.0 && v < 1.0));
        let mean = x1.iter().sum::<f64>() / x1.len() as f64;
        assert!((mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn empirical_quantiles_match() {
        let (x1, x2) = (0.4, 0.7);
        let s = [0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| response(DesignId::D2, rng.random(), &s, x1, x2))
            .collect();
        for &tau in &[0.1, 0.5, 0.9, 0.99] {
            let q = response(DesignId::D2, tau, &s, x1, x2);
            let frac = ys.iter().filter(|&&y| y <= q).count() as f64 / n as f64;
            let se = (tau * (1.0 - tau) / n as f64).sqrt();
            assert!((frac - tau).abs() <= 2.0 * se, "tau {tau}: {frac}");
        }
    }

    #[test]
    fn monotone_in_level() {
        for id in DesignId::ALL {
            for s in grid_sites(3) {
                let mut last = f64::NEG_INFINITY;
                for i in 1..200 {
                    let y = response(id, i as f64 / 200.0, &s, 0.6, 0.9);
                    assert!(y >= last);
                    last = y;
                }
            }
        }
    }

    fn hill(mut v: Vec<f64>, k: usize) -> f64 {
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let base = v[k].ln();
        v[..k].iter().map(|y| y.ln() - base).sum::<f64>() / k as f64
    }

    #[test]
    fn d4_tail_heaviness_grows_with_s1() {
        let spec = DesignSpec {
            n_per_site: 6250,
            ..DesignSpec::standard(DesignId::D4, 5)
        };
        let sim = gen_design(&spec).unwrap();
        let by_site = sim.data.rows_by_site();
        let column = |s1: f64| -> Vec<f64> {
            (0..16)
                .filter(|&i| spec.sites[i][0] == s1)
                .flat_map(|i| by_site[i].iter().map(|&r| sim.data.y(r)).collect::<Vec<_>>())
                .collect()
        };
        let light = hill(column(0.0), 500);
        let heavy = hill(column(1.0), 500);
        assert!(heavy > light + 0.1, "{light} vs {heavy}");
    }
}
