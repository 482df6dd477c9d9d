use nalgebra::{DMatrix, DVector};

use super::config::PriorConfig;
use super::{Dataset, InferenceError};
use crate::covariance::{cholesky_jittered, mvn_log_density, Coord, Correlation, GpHyper, LogGpPrior};
use crate::model::{shape_upper_bound, ConstraintMode, QuantileModel};
use crate::splines::ISplineBasis;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Model parameters together with the hyperparameters of their GP priors.
#[derive(Debug, Clone)]
pub struct ParameterState {
    pub model: QuantileModel,
    /// Hyperparameters; only entries of free fields are used.
    pub hyper: LogGpPrior,
}

/// A prior configuration resolved against a basis, constraint and sites.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub config: PriorConfig,
    pub center: f64,
    pub scale: f64,
    sites: Vec<Coord>,
    correlation_matrix: DMatrix<f64>,
    free_ms: Vec<usize>,
    alpha_lower_max: f64,
    alpha_upper_max: f64,
    lower_active: bool,
    upper_active: bool,
}

impl PriorSpec {
    pub fn new(
        config: PriorConfig,
        basis: &ISplineBasis,
        constraint: ConstraintMode,
        sites: Vec<Coord>,
        center: f64,
        scale: f64,
    ) -> Result<Self, InferenceError> {
        if !(scale > 0.0 && scale.is_finite()) || !center.is_finite() {
            return Err(InferenceError::Config(format!(
                "response center/scale must be finite with positive scale, got {center}/{scale}"
            )));
        }
        let corr = Correlation::exponential(config.correlation_range)?;
        let probe = LogGpPrior::uniform(1, 1, GpHyper::new(0.0, 1.0, 0.0)?, corr)?;
        let correlation_matrix = probe.correlation_matrix(&sites);
        let derived = constraint.derived_indices(basis);
        let free_ms = (0..=basis.num_nonconstant()).filter(|m| !derived.contains(m)).collect();
        let bounds = shape_upper_bound(basis);
        let (lo_max, up_max) = match constraint.order() {
            Some(q) if q >= 1 => (config.alpha_cap.min(bounds.lower), config.alpha_cap.min(bounds.upper)),
            _ => (config.alpha_cap, config.alpha_cap),
        };
        Ok(Self {
            config,
            center,
            scale,
            sites,
            correlation_matrix,
            free_ms,
            alpha_lower_max: lo_max,
            alpha_upper_max: up_max,
            lower_active: basis.tau_lower() > 0.0,
            upper_active: basis.tau_upper() < 1.0,
        })
    }

    /// Resolve against training data: the centre defaults to the median
    /// response and the scale to the response standard deviation.
    pub fn from_data(
        config: PriorConfig,
        basis: &ISplineBasis,
        constraint: ConstraintMode,
        data: &Dataset,
    ) -> Result<Self, InferenceError> {
        let (median, sd) = robust_center_scale(data.responses());
        let center = config.response_center.unwrap_or(median);
        let scale = config.response_scale.unwrap_or(sd);
        Self::new(config, basis, constraint, data.sites().to_vec(), center, scale)
    }

    pub fn sites(&self) -> &[Coord] {
        &self.sites
    }

    /// Basis indices whose latent fields are sampled (not derived).
    pub fn free_ms(&self) -> &[usize] {
        &self.free_ms
    }

    pub fn lower_active(&self) -> bool {
        self.lower_active
    }

    pub fn upper_active(&self) -> bool {
        self.upper_active
    }

    /// `(min, max)` of the uniform prior on `α_L`.
    pub fn alpha_lower_box(&self) -> (f64, f64) {
        (-self.config.alpha_max, self.alpha_lower_max)
    }

    pub fn alpha_upper_box(&self) -> (f64, f64) {
        (-self.config.alpha_max, self.alpha_upper_max)
    }

    /// Normal prior `(mean, sd)` of `μ*_{m,p}`.
    pub fn mu_prior(&self, m: usize, p: usize) -> (f64, f64) {
        if m == 0 {
            let mean = if p == 0 { self.center } else { 0.0 };
            (mean, self.config.location_sd * self.scale)
        } else {
            (self.scale.ln() + self.config.log_coef_mean, self.config.log_coef_sd)
        }
    }

    /// Half-normal scale of `η` and `λ` for row `m`.
    pub fn gp_scale(&self, m: usize) -> f64 {
        if m == 0 {
            self.config.location_gp_scale * self.scale
        } else {
            self.config.log_coef_gp_scale
        }
    }

    /// Log prior of the hyperparameters of field `(m, p)` (density in
    /// `μ*`, `η`, `λ`).
    pub fn hyper_log_prior(&self, m: usize, p: usize, h: &GpHyper) -> f64 {
        let (mean, sd) = self.mu_prior(m, p);
        let s = self.gp_scale(m);
        normal_log_pdf(h.mean_latent, mean, sd)
            + half_normal_log_pdf(h.spatial_var.sqrt(), s)
            + half_normal_log_pdf(h.nugget_var.sqrt(), s)
    }

    /// Lower Cholesky factor of `η² C + λ² I`.
    pub fn field_factor(&self, h: &GpHyper) -> Result<DMatrix<f64>, InferenceError> {
        let mut c = &self.correlation_matrix * h.spatial_var;
        for i in 0..self.sites.len() {
            c[(i, i)] += h.nugget_var;
        }
        Ok(cholesky_jittered(&c)?)
    }

    /// GP log density of the latent field `θ*_{m,p}(·)` given its factor.
    pub fn field_log_prior_with(&self, model: &QuantileModel, m: usize, p: usize, mean: f64, factor: &DMatrix<f64>) -> f64 {
        let th = model.theta();
        let z = DVector::from_fn(self.sites.len(), |s, _| th.latent(s, m, p));
        if z.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        mvn_log_density(&z, &DVector::from_element(self.sites.len(), mean), factor)
    }

    /// Log prior of the tail parameters at one site (density in `α`, `σ`).
    pub fn tail_log_prior(&self, model: &QuantileModel, site: usize) -> f64 {
        let t = &model.tails()[site];
        let mut lp = 0.0;
        let s = self.config.sigma_scale * self.scale;
        if self.lower_active {
            lp += uniform_log_pdf(t.alpha_lower, self.alpha_lower_box());
            lp += t.sigma_lower.iter().map(|&v| half_normal_log_pdf(v, s)).sum::<f64>();
        }
        if self.upper_active {
            lp += uniform_log_pdf(t.alpha_upper, self.alpha_upper_box());
            lp += t.sigma_upper.iter().map(|&v| half_normal_log_pdf(v, s)).sum::<f64>();
        }
        lp
    }
}

/// Full log prior of a parameter state.
pub fn log_prior(state: &ParameterState, spec: &PriorSpec) -> f64 {
    let model = &state.model;
    let mut lp = 0.0;
    for &m in spec.free_ms() {
        for p in 0..model.n_predictors() + 1 {
            let h = match state.hyper.hyper(m, p) {
                Ok(h) => *h,
                Err(_) => return f64::NEG_INFINITY,
            };
            lp += spec.hyper_log_prior(m, p, &h);
            match spec.field_factor(&h) {
                Ok(l) => lp += spec.field_log_prior_with(model, m, p, h.mean_latent, &l),
                Err(_) => return f64::NEG_INFINITY,
            }
        }
    }
    for s in 0..model.n_sites() {
        lp += spec.tail_log_prior(model, s);
    }
    lp
}

pub(crate) fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * z * z
}

pub(crate) fn half_normal_log_pdf(x: f64, scale: f64) -> f64 {
    if !(x >= 0.0) {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 + normal_log_pdf(x, 0.0, scale)
}

/// Uniform on `(lo, hi]`; the closed top keeps shapes exactly at the
/// differentiability bound admissible.
pub(crate) fn uniform_log_pdf(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if x > lo && x <= hi {
        -(hi - lo).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Median and standard deviation (falling back to 1 for constant data).
pub(crate) fn robust_center_scale(y: &[f64]) -> (f64, f64) {
    if y.is_empty() {
        return (0.0, 1.0);
    }
    let mut v = y.to_vec();
    v.sort_by(f64::total_cmp);
    let median = empirical_quantile(&v, 0.5);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64;
    let sd = var.sqrt();
    (median, if sd > 0.0 { sd } else { 1.0 })
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = tau.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SiteTails, ThetaField};

    fn setup(sites: Vec<Coord>) -> (ParameterState, PriorSpec) {
        let basis = ISplineBasis::equally_spaced(3, 4, 0.1, 0.9).unwrap();
        let n_sites = sites.len();
        let config = PriorConfig {
            location_sd: 1.0,
            log_coef_sd: 1.0,
            ..PriorConfig::default()
        };
        let spec = PriorSpec::new(config, &basis, ConstraintMode::Continuous, sites, 0.0, 1.0).unwrap();
        let mut model = QuantileModel::new(
            basis,
            ThetaField::zeros(n_sites, 5, 1),
            vec![SiteTails::uniform(1, 0.1, 1.0); n_sites],
            ConstraintMode::Continuous,
        )
        .unwrap();
        model.enforce_constraints().unwrap();
        let hyper = LogGpPrior::uniform(5, 1, GpHyper::new(0.0, 1.0, 1.0).unwrap(), Correlation::exponential(1.0).unwrap())
            .unwrap();
        (ParameterState { model, hyper }, spec)
    }

    #[test]
    fn closed_form_single_site() {
        let (state, spec) = setup(vec![[0.0, 0.0]]);
        assert_eq!(spec.free_ms(), &[0, 2, 3]);
        // per free field: latent 0 ~ N(0, 2), μ* = 0 ~ N(0, 1),
        // η = λ = 1 ~ half-normal(1)
        let field = -0.5 * LN_2PI - 0.5 * 2f64.ln();
        let mu = -0.5 * LN_2PI;
        let hn = std::f64::consts::LN_2 - 0.5 * LN_2PI - 0.5;
        // tails: α uniform on (-5, 0.5], two σ = 1 ~ half-normal(1)
        let tails = -2.0 * 5.5f64.ln() + 2.0 * hn;
        let want = 3.0 * (field + mu + 2.0 * hn) + tails;
        assert!((log_prior(&state, &spec) - want).abs() < 1e-12);
    }

    #[test]
    fn shape_box_edges() {
        let basis = ISplineBasis::equally_spaced(3, 4, 0.2, 0.8).unwrap();
        let bound = shape_upper_bound(&basis).lower;
        let spec = PriorSpec::new(
            PriorConfig::default(),
            &basis,
            ConstraintMode::Differentiable(1),
            vec![[0.0, 0.0]],
            0.0,
            1.0,
        )
        .unwrap();
        let (lo, hi) = spec.alpha_lower_box();
        assert_eq!((lo, hi), (-5.0, bound.min(0.5)));
        assert!(uniform_log_pdf(hi, (lo, hi)).is_finite());
        assert_eq!(uniform_log_pdf(hi + 1e-12, (lo, hi)), f64::NEG_INFINITY);
    }

    #[test]
    fn site_permutation_invariance() {
        let sites = vec![[0.0, 0.0], [0.5, 0.1], [0.2, 0.9]];
        let (mut state, spec) = setup(sites.clone());
        for (s, v) in [0.3, -0.7, 1.1].iter().enumerate() {
            state.model.theta_mut().set_latent(s, 2, 0, *v);
        }
        let a = log_prior(&state, &spec);
        let perm = [2, 0, 1];
        let psites: Vec<Coord> = perm.iter().map(|&i| sites[i]).collect();
        let (mut pstate, pspec) = setup(psites);
        for (new, &old) in perm.iter().enumerate() {
            let v = state.model.theta().latent(old, 2, 0);
            pstate.model.theta_mut().set_latent(new, 2, 0, v);
        }
        let b = log_prior(&pstate, &pspec);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn quantile_helper() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&v, 1.0), 4.0);
        assert!((empirical_quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
