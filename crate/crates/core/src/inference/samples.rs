use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::likelihood::{log_density, pack_by_site};
use super::prior::empirical_quantile;
use super::{fmt_f64, Dataset, InferenceError};
use crate::covariance::Coord;
use crate::model::{ConstraintMode, QuantileCurve, QuantileModel, SiteTails, ThetaField};
use crate::splines::{BasisSpec, ISplineBasis};

/// Tolerance used when checking constraint equations of stored draws.
pub const DRAW_CONSTRAINT_TOL: f64 = 1e-10;

/// Everything needed to interpret a sample table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLayout {
    pub basis: BasisSpec,
    pub constraint: ConstraintMode,
    pub sites: Vec<Coord>,
    pub n_predictors: usize,
    /// Basis rows whose latent fields were sampled.
    pub free_ms: Vec<usize>,
}

impl SampleLayout {
    pub fn n_basis(&self) -> usize {
        self.basis_len() + 1
    }

    fn basis_len(&self) -> usize {
        self.basis.interior_knots.len() + self.basis.degree
    }

    pub fn n_cols(&self) -> usize {
        self.n_predictors + 1
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    fn theta_len(&self) -> usize {
        self.n_sites() * self.n_basis() * self.n_cols()
    }

    fn alpha_offset(&self) -> usize {
        self.theta_len()
    }

    fn sigma_offset(&self) -> usize {
        self.alpha_offset() + 2 * self.n_sites()
    }

    fn hyper_offset(&self) -> usize {
        self.sigma_offset() + 2 * self.n_sites() * self.n_cols()
    }

    fn n_free_fields(&self) -> usize {
        self.free_ms.len() * self.n_cols()
    }

    /// Index of `log_likelihood`; `log_prior` follows it.
    pub fn log_lik_index(&self) -> usize {
        self.hyper_offset() + 3 * self.n_free_fields()
    }

    pub fn width(&self) -> usize {
        self.log_lik_index() + 2
    }

    pub fn theta_index(&self, site: usize, m: usize, p: usize) -> usize {
        (site * self.n_basis() + m) * self.n_cols() + p
    }

    /// Parameter column names, in storage order.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for s in 0..self.n_sites() {
            for m in 0..self.n_basis() {
                for p in 0..self.n_cols() {
                    out.push(format!("theta_star.{m}.{p}.{s}"));
                }
            }
        }
        for s in 0..self.n_sites() {
            out.push(format!("alpha_L.{s}"));
            out.push(format!("alpha_U.{s}"));
        }
        for side in ["L", "U"] {
            for s in 0..self.n_sites() {
                for p in 0..self.n_cols() {
                    out.push(format!("sigma_{side}.{p}.{s}"));
                }
            }
        }
        for &m in &self.free_ms {
            for p in 0..self.n_cols() {
                out.push(format!("mu_star.{m}.{p}"));
                out.push(format!("eta2.{m}.{p}"));
                out.push(format!("lambda2.{m}.{p}"));
            }
        }
        out.push("log_likelihood".into());
        out.push("log_prior".into());
        out
    }

    /// Flatten a parameter state into a row.
    pub(crate) fn pack(
        &self,
        model: &QuantileModel,
        hyper: &crate::covariance::LogGpPrior,
        log_lik: f64,
        log_prior: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        out.extend_from_slice(model.theta().latent_values());
        for t in model.tails() {
            out.push(t.alpha_lower);
            out.push(t.alpha_upper);
        }
        for t in model.tails() {
            out.extend_from_slice(&t.sigma_lower);
        }
        for t in model.tails() {
            out.extend_from_slice(&t.sigma_upper);
        }
        for &m in &self.free_ms {
            for p in 0..self.n_cols() {
                let h = hyper.hyper(m, p).expect("free field inside hyper table");
                out.push(h.mean_latent);
                out.push(h.spatial_var);
                out.push(h.nugget_var);
            }
        }
        out.push(log_lik);
        out.push(log_prior);
        out
    }

    /// Rebuild and validate the model stored in `row`.
    pub fn unpack_model(&self, basis: &ISplineBasis, row: &[f64]) -> Result<QuantileModel, InferenceError> {
        let theta = ThetaField::from_latent(
            self.n_sites(),
            self.n_basis(),
            self.n_cols(),
            row[..self.theta_len()].to_vec(),
        )?;
        let nc = self.n_cols();
        let ns = self.n_sites();
        let so = self.sigma_offset();
        let tails = (0..ns)
            .map(|s| SiteTails {
                alpha_lower: row[self.alpha_offset() + 2 * s],
                alpha_upper: row[self.alpha_offset() + 2 * s + 1],
                sigma_lower: row[so + s * nc..so + (s + 1) * nc].to_vec(),
                sigma_upper: row[so + (ns + s) * nc..so + (ns + s + 1) * nc].to_vec(),
            })
            .collect();
        let model = QuantileModel::new(basis.clone(), theta, tails, self.constraint)?;
        model.check_constraints(DRAW_CONSTRAINT_TOL)?;
        Ok(model)
    }
}

/// Acceptance rate of one sampler block after burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub chain: usize,
    pub block: String,
    pub rate: f64,
}

/// Retained posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub layout: SampleLayout,
    pub seed: u64,
    pub response_center: f64,
    pub response_scale: f64,
    pub chain: Vec<usize>,
    pub iteration: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub acceptance: Vec<BlockAcceptance>,
}

/// JSON side-car describing a sample table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleHeader {
    pub layout: SampleLayout,
    pub seed: u64,
    pub response_center: f64,
    pub response_scale: f64,
    pub n_draws: usize,
    pub acceptance: Vec<BlockAcceptance>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn basis(&self) -> Result<ISplineBasis, InferenceError> {
        Ok(ISplineBasis::new(self.layout.basis.clone())?)
    }

    /// The model of draw `i`.
    pub fn model(&self, i: usize) -> Result<QuantileModel, InferenceError> {
        let basis = self.basis()?;
        self.layout.unpack_model(&basis, &self.rows[i])
    }

    /// All draws as models.
    pub fn models(&self) -> Result<Vec<QuantileModel>, InferenceError> {
        let basis = self.basis()?;
        self.rows.iter().map(|r| self.layout.unpack_model(&basis, r)).collect()
    }

    /// Retained draw with the highest log posterior.
    pub fn map_draw(&self) -> Result<usize, InferenceError> {
        let k = self.layout.log_lik_index();
        self.rows
            .iter()
            .enumerate()
            .max_by(|a, b| (a.1[k] + a.1[k + 1]).total_cmp(&(b.1[k] + b.1[k + 1])))
            .map(|(i, _)| i)
            .ok_or(InferenceError::EmptySamples)
    }

    pub fn header(&self) -> SampleHeader {
        SampleHeader {
            layout: self.layout.clone(),
            seed: self.seed,
            response_center: self.response_center,
            response_scale: self.response_scale,
            n_draws: self.len(),
            acceptance: self.acceptance.clone(),
        }
    }

    /// Columnar CSV: `chain, iteration`, then one column per parameter.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), InferenceError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.layout.column_names());
        wr.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for (i, row) in self.rows.iter().enumerate() {
            rec.clear();
            rec.push(self.chain[i].to_string());
            rec.push(self.iteration[i].to_string());
            rec.extend(row.iter().map(|&v| fmt_f64(v)));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read a CSV written by [`write_csv`](Self::write_csv); every draw is
    /// re-validated.
    pub fn read_csv<R: Read>(header: SampleHeader, r: R) -> Result<Self, InferenceError> {
        let mut rd = csv::Reader::from_reader(r);
        let names = rd.headers()?.clone();
        let mut want = vec!["chain".to_string(), "iteration".to_string()];
        want.extend(header.layout.column_names());
        if names.len() != want.len() || names.iter().zip(&want).any(|(a, b)| a != b) {
            return Err(InferenceError::Schema("sample columns do not match the layout".into()));
        }
        let basis = ISplineBasis::new(header.layout.basis.clone())?;
        let (mut chain, mut iteration, mut rows) = (vec![], vec![], vec![]);
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |c: &str| InferenceError::Schema(format!("line {}: cannot parse `{c}`", line + 2));
            chain.push(rec[0].parse().map_err(|_| bad(&rec[0]))?);
            iteration.push(rec[1].parse().map_err(|_| bad(&rec[1]))?);
            let row = rec.iter().skip(2).map(|v| v.parse::<f64>().map_err(|_| bad(v))).collect::<Result<Vec<_>, _>>()?;
            header.layout.unpack_model(&basis, &row)?;
            rows.push(row);
        }
        Ok(Self {
            layout: header.layout,
            seed: header.seed,
            response_center: header.response_center,
            response_scale: header.response_scale,
            chain,
            iteration,
            rows,
            acceptance: header.acceptance,
        })
    }
}

/// Posterior mean and equal-tailed interval of `β_p(τ, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: usize,
    pub site: usize,
    pub tau: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Draws of `β_p(τ_j, s)`, laid out `[site][level][draw]`.
pub fn beta_draws(
    models: &[QuantileModel],
    p: usize,
    levels: &[f64],
    sites: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>, InferenceError> {
    let mut out = vec![vec![Vec::with_capacity(models.len()); levels.len()]; sites.len()];
    for model in models {
        for (i, &s) in sites.iter().enumerate() {
            let c = model.column_curve(s, p)?;
            for (j, &t) in levels.iter().enumerate() {
                out[i][j].push(c.eval(t));
            }
        }
    }
    Ok(out)
}

/// Mean and equal-tailed `level` interval of a set of draws.
pub fn summarize_draws(draws: &[f64], level: f64) -> (f64, f64, f64) {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let a = 0.5 * (1.0 - level);
    (mean, empirical_quantile(&v, a), empirical_quantile(&v, 1.0 - a))
}

/// Posterior means and equal-tailed `level` intervals of every `β_p` on a
/// level grid at the chosen sites.
pub fn posterior_summary(
    samples: &PosteriorSamples,
    levels: &[f64],
    sites: &[usize],
    level: f64,
) -> Result<Vec<CurvePoint>, InferenceError> {
    if samples.is_empty() {
        return Err(InferenceError::EmptySamples);
    }
    let models = samples.models()?;
    let mut out = Vec::new();
    for p in 0..samples.layout.n_cols() {
        let draws = beta_draws(&models, p, levels, sites)?;
        for (i, &s) in sites.iter().enumerate() {
            for (j, &tau) in levels.iter().enumerate() {
                let (mean, lower, upper) = summarize_draws(&draws[i][j], level);
                out.push(CurvePoint {
                    p,
                    site: s,
                    tau,
                    mean,
                    lower,
                    upper,
                });
            }
        }
    }
    Ok(out)
}

/// Write curve summaries as `p, site, tau, mean, lower, upper`.
pub fn write_curves_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<(), InferenceError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["p", "site", "tau", "mean", "lower", "upper"])?;
    for c in points {
        wr.write_record([
            c.p.to_string(),
            c.site.to_string(),
            fmt_f64(c.tau),
            fmt_f64(c.mean),
            fmt_f64(c.lower),
            fmt_f64(c.upper),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: Read>(r: R) -> Result<Vec<CurvePoint>, InferenceError> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Mean over draws of the density at `y`.
pub fn predictive_density(models: &[QuantileModel], y: f64, x: &[f64], site: usize) -> Result<f64, InferenceError> {
    if models.is_empty() {
        return Err(InferenceError::EmptySamples);
    }
    let mut acc = 0.0;
    for m in models {
        acc += m.density(y, x, site)?;
    }
    Ok(acc / models.len() as f64)
}

/// Posterior mean predictive density at every row of `data`.
pub fn predictive_densities(models: &[QuantileModel], data: &Dataset) -> Result<Vec<f64>, InferenceError> {
    if models.is_empty() {
        return Err(InferenceError::EmptySamples);
    }
    let packed = pack_by_site(data);
    let p = data.n_predictors();
    let mut sums = vec![vec![0.0; 0]; packed.len()];
    for (s, rows) in packed.iter().enumerate() {
        sums[s] = vec![0.0; rows.y.len()];
    }
    for model in models {
        let mut curve = QuantileCurve::new(model.basis(), Vec::new(), 0.0, 0.0, 0.0, 0.0);
        for (s, rows) in packed.iter().enumerate() {
            for (i, &y) in rows.y.iter().enumerate() {
                model.fill_curve(&mut curve, s, &rows.x[i * p..(i + 1) * p]);
                let ld = log_density(&curve, y);
                sums[s][i] += ld.exp();
            }
        }
    }
    // back to row order
    let mut next = vec![0usize; packed.len()];
    let n = models.len() as f64;
    Ok((0..data.len())
        .map(|r| {
            let s = data.site(r);
            let v = sums[s][next[s]] / n;
            next[s] += 1;
            v
        })
        .collect())
}
