use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::AdaptiveProposal;
use super::config::FitConfig;
use super::likelihood::{pack_by_site, site_log_likelihood, SiteRows};
use super::optimize::nelder_mead;
use super::prior::{empirical_quantile, PriorSpec};
use super::samples::{BlockAcceptance, PosteriorSamples, SampleLayout};
use super::{Dataset, InferenceError};
use crate::covariance::{Correlation, GpHyper, LogGpPrior};
use crate::model::{shape_upper_bound, ModelError, QuantileCurve, QuantileModel, SiteTails, ThetaField};
use crate::splines::ISplineBasis;

const MAX_INIT_ATTEMPTS: usize = 100;
/// Objective evaluations per site-vector coordinate spent on the warm start.
const WARM_START_EVALS_PER_DIM: usize = 200;

/// Fit the model by adaptive random-walk Metropolis.
///
/// Chains run on separate threads with independent random streams, so the
/// result depends only on the data and the configuration.
pub fn mcmc_fit(data: &Dataset, config: &FitConfig) -> Result<PosteriorSamples, InferenceError> {
    if data.is_empty() {
        return Err(InferenceError::Config("no training rows".into()));
    }
    let mc = &config.mcmc;
    if mc.chains == 0 || mc.thin == 0 || mc.burn_in() >= mc.iterations {
        return Err(InferenceError::Config(format!(
            "need chains >= 1, thin >= 1 and burn-in < iterations (got {}, {}, {} of {})",
            mc.chains,
            mc.thin,
            mc.burn_in(),
            mc.iterations
        )));
    }
    let basis = config.basis.build()?;
    let spec = PriorSpec::from_data(config.prior.clone(), &basis, config.constraint, data)?;
    let layout = SampleLayout {
        basis: basis.spec().clone(),
        constraint: config.constraint,
        sites: data.sites().to_vec(),
        n_predictors: data.n_predictors(),
        free_ms: spec.free_ms().to_vec(),
    };
    let packed = pack_by_site(data);

    let results: Vec<Result<ChainOutput, InferenceError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..mc.chains)
            .map(|c| {
                let (basis, spec, layout, packed) = (&basis, &spec, &layout, &packed);
                scope.spawn(move || run_chain(c, basis, spec, layout, packed, data, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });

    let mut samples = PosteriorSamples {
        layout,
        seed: mc.seed,
        response_center: spec.center,
        response_scale: spec.scale,
        chain: vec![],
        iteration: vec![],
        rows: vec![],
        acceptance: vec![],
    };
    for r in results {
        let out = r?;
        samples.chain.extend(out.chain);
        samples.iteration.extend(out.iteration);
        samples.rows.extend(out.rows);
        samples.acceptance.extend(out.acceptance);
    }
    Ok(samples)
}

struct ChainOutput {
    chain: Vec<usize>,
    iteration: Vec<usize>,
    rows: Vec<Vec<f64>>,
    acceptance: Vec<BlockAcceptance>,
}

/// Which parameters a site block vector holds, in order.
struct SiteVector<'a> {
    spec: &'a PriorSpec,
    n_cols: usize,
}

impl SiteVector<'_> {
    fn len(&self) -> usize {
        let mut n = self.spec.free_ms().len() * self.n_cols;
        if self.spec.lower_active() {
            n += 1 + self.n_cols;
        }
        if self.spec.upper_active() {
            n += 1 + self.n_cols;
        }
        n
    }

    fn read(&self, model: &QuantileModel, s: usize, out: &mut Vec<f64>) {
        out.clear();
        for &m in self.spec.free_ms() {
            for p in 0..self.n_cols {
                out.push(model.theta().latent(s, m, p));
            }
        }
        let t = &model.tails()[s];
        if self.spec.lower_active() {
            out.push(t.alpha_lower);
            out.extend(t.sigma_lower.iter().map(|v| v.ln()));
        }
        if self.spec.upper_active() {
            out.push(t.alpha_upper);
            out.extend(t.sigma_upper.iter().map(|v| v.ln()));
        }
    }

    /// Write `v` into site `s` and re-derive constrained coefficients.
    fn write(&self, model: &mut QuantileModel, s: usize, v: &[f64]) -> Result<(), ModelError> {
        let mut k = 0;
        for &m in self.spec.free_ms() {
            for p in 0..self.n_cols {
                model.theta_mut().set_latent(s, m, p, v[k]);
                k += 1;
            }
        }
        let nc = self.n_cols;
        let t = model.site_tails_mut(s);
        if self.spec.lower_active() {
            t.alpha_lower = v[k];
            for (p, sl) in t.sigma_lower.iter_mut().enumerate() {
                *sl = v[k + 1 + p].exp();
            }
            k += 1 + nc;
        }
        if self.spec.upper_active() {
            t.alpha_upper = v[k];
            for (p, su) in t.sigma_upper.iter_mut().enumerate() {
                *su = v[k + 1 + p].exp();
            }
        }
        model.enforce_site(s)
    }

    /// `Σ ln σ`: Jacobian of sampling the scales on the log scale.
    fn log_jacobian(&self, model: &QuantileModel, s: usize) -> f64 {
        let t = &model.tails()[s];
        let mut j = 0.0;
        if self.spec.lower_active() {
            j += t.sigma_lower.iter().map(|v| v.ln()).sum::<f64>();
        }
        if self.spec.upper_active() {
            j += t.sigma_upper.iter().map(|v| v.ln()).sum::<f64>();
        }
        j
    }

    fn initial_steps(&self, scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &m in self.spec.free_ms() {
            for _ in 0..self.n_cols {
                out.push(if m == 0 { 0.02 * scale } else { 0.05 });
            }
        }
        for active in [self.spec.lower_active(), self.spec.upper_active()] {
            if active {
                out.push(0.02);
                out.extend(std::iter::repeat_n(0.05, self.n_cols));
            }
        }
        out
    }
}

struct Chain<'a> {
    spec: &'a PriorSpec,
    packed: &'a [SiteRows],
    sv: SiteVector<'a>,
    n_cols: usize,
    model: QuantileModel,
    hyper: LogGpPrior,
    /// Per free field `k = index(m) * n_cols + p`.
    factors: Vec<DMatrix<f64>>,
    field_lp: Vec<f64>,
    hyper_lp: Vec<f64>,
    site_ll: Vec<f64>,
    tail_lp: Vec<f64>,
    rng: ChaCha8Rng,
    curve: QuantileCurve<'a>,
}

impl<'a> Chain<'a> {
    fn field(&self, k: usize) -> (usize, usize) {
        (self.spec.free_ms()[k / self.n_cols], k % self.n_cols)
    }

    fn n_fields(&self) -> usize {
        self.spec.free_ms().len() * self.n_cols
    }

    fn site_ll(&mut self, s: usize) -> f64 {
        site_log_likelihood(&self.model, s, &self.packed[s], &mut self.curve)
    }

    fn tail_terms(&self, s: usize) -> f64 {
        self.spec.tail_log_prior(&self.model, s) + self.sv.log_jacobian(&self.model, s)
    }

    fn field_lp_of(&self, k: usize) -> f64 {
        let (m, p) = self.field(k);
        let h = self.hyper.hyper(m, p).expect("free field");
        self.spec.field_log_prior_with(&self.model, m, p, h.mean_latent, &self.factors[k])
    }

    fn hyper_terms(&self, k: usize, h: &GpHyper) -> f64 {
        let (m, p) = self.field(k);
        // Jacobian of sampling ln η and ln λ
        self.spec.hyper_log_prior(m, p, h) + 0.5 * (h.spatial_var.ln() + h.nugget_var.ln())
    }

    fn refresh_all(&mut self) -> Result<(), InferenceError> {
        let nf = self.n_fields();
        self.factors.clear();
        self.field_lp.clear();
        self.hyper_lp.clear();
        for k in 0..nf {
            let (m, p) = self.field(k);
            let h = *self.hyper.hyper(m, p)?;
            self.factors.push(self.spec.field_factor(&h)?);
            self.hyper_lp.push(self.hyper_terms(k, &h));
        }
        for k in 0..nf {
            let v = self.field_lp_of(k);
            self.field_lp.push(v);
        }
        self.site_ll = (0..self.model.n_sites()).map(|s| self.site_ll(s)).collect();
        self.tail_lp = (0..self.model.n_sites()).map(|s| self.tail_terms(s)).collect();
        Ok(())
    }

    fn log_post(&self) -> f64 {
        self.site_ll.iter().sum::<f64>()
            + self.tail_lp.iter().sum::<f64>()
            + self.field_lp.iter().sum::<f64>()
            + self.hyper_lp.iter().sum::<f64>()
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio.is_finite() && (log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio)
    }

    fn site_step(&mut self, s: usize, prop: &mut AdaptiveProposal, cur: &mut Vec<f64>, cand: &mut Vec<f64>) {
        self.sv.read(&self.model, s, cur);
        prop.propose(cur, &mut self.rng, cand);
        let mut accepted = false;
        if self.sv.write(&mut self.model, s, cand).is_ok() {
            let tail = self.tail_terms(s);
            if tail.is_finite() {
                let fields: Vec<f64> = (0..self.n_fields()).map(|k| self.field_lp_of(k)).collect();
                let d_field: f64 = fields.iter().zip(&self.field_lp).map(|(a, b)| a - b).sum();
                let pre = tail - self.tail_lp[s] + d_field;
                if pre.is_finite() {
                    let ll = self.site_ll(s);
                    if self.accept(ll - self.site_ll[s] + pre) {
                        self.site_ll[s] = ll;
                        self.tail_lp[s] = tail;
                        self.field_lp = fields;
                        accepted = true;
                    }
                }
            }
        }
        if !accepted {
            self.sv
                .write(&mut self.model, s, cur)
                .expect("restoring an accepted state succeeds");
        }
        prop.record(accepted, if accepted { cand } else { cur });
    }

    /// Move site `s` to a mode of its likelihood times its tail prior and
    /// build a random-walk proposal from the curvature there. The field prior
    /// is left out because the hyperparameters are re-centred afterwards.
    fn warm_start(&mut self, s: usize, default_steps: &[f64]) -> AdaptiveProposal {
        let mut x0 = Vec::new();
        self.sv.read(&self.model, s, &mut x0);
        let d = x0.len();
        let mut objective = |v: &[f64]| -> f64 {
            if self.sv.write(&mut self.model, s, v).is_err() {
                return f64::INFINITY;
            }
            let t = self.tail_terms(s);
            if !t.is_finite() {
                return f64::INFINITY;
            }
            -(self.site_ll(s) + t)
        };
        let budget = WARM_START_EVALS_PER_DIM * d / 2;
        let (x, _) = nelder_mead(&mut objective, &x0, default_steps, budget, 1e-8);
        // a restart from the best vertex escapes a collapsed simplex
        let (best, _) = nelder_mead(&mut objective, &x, default_steps, budget, 1e-8);
        let hess = standardized_hessian(&mut objective, &best, default_steps);
        self.sv
            .write(&mut self.model, s, &best)
            .expect("the best vertex has a finite objective");
        laplace_proposal(&hess, default_steps).unwrap_or_else(|| AdaptiveProposal::new(default_steps))
    }

    fn field_step(&mut self, k: usize, prop: &mut AdaptiveProposal, cur: &mut Vec<f64>, cand: &mut Vec<f64>) {
        let (m, p) = self.field(k);
        let ns = self.model.n_sites();
        cur.clear();
        cur.extend((0..ns).map(|s| self.model.theta().latent(s, m, p)));
        prop.propose(cur, &mut self.rng, cand);
        for (s, &v) in cand.iter().enumerate() {
            self.model.theta_mut().set_latent(s, m, p, v);
        }
        let f = self.field_lp_of(k);
        let mut accepted = false;
        if f.is_finite() {
            let lls: Vec<f64> = (0..ns).map(|s| self.site_ll(s)).collect();
            let d_ll: f64 = lls.iter().zip(&self.site_ll).map(|(a, b)| a - b).sum();
            if self.accept(d_ll + f - self.field_lp[k]) {
                self.site_ll = lls;
                self.field_lp[k] = f;
                accepted = true;
            }
        }
        if !accepted {
            for (s, &v) in cur.iter().enumerate() {
                self.model.theta_mut().set_latent(s, m, p, v);
            }
        }
        prop.record(accepted, if accepted { cand } else { cur });
    }

    fn hyper_step(&mut self, k: usize, prop: &mut AdaptiveProposal, cur: &mut Vec<f64>, cand: &mut Vec<f64>) {
        let (m, p) = self.field(k);
        let h = *self.hyper.hyper(m, p).expect("free field");
        cur.clear();
        cur.extend([h.mean_latent, 0.5 * h.spatial_var.ln(), 0.5 * h.nugget_var.ln()]);
        prop.propose(cur, &mut self.rng, cand);
        let new = GpHyper {
            mean_latent: cand[0],
            spatial_var: (2.0 * cand[1]).exp(),
            nugget_var: (2.0 * cand[2]).exp(),
        };
        let mut accepted = false;
        let ok = new.spatial_var > 0.0 && new.nugget_var > 0.0 && new.spatial_var.is_finite() && new.nugget_var.is_finite();
        if ok {
            if let Ok(factor) = self.spec.field_factor(&new) {
                let hl = self.hyper_terms(k, &new);
                let fl = self.spec.field_log_prior_with(&self.model, m, p, new.mean_latent, &factor);
                if self.accept(hl + fl - self.hyper_lp[k] - self.field_lp[k]) {
                    self.hyper.set_hyper(m, p, new).expect("validated hyperparameters");
                    self.factors[k] = factor;
                    self.hyper_lp[k] = hl;
                    self.field_lp[k] = fl;
                    accepted = true;
                }
            }
        }
        prop.record(accepted, if accepted { cand } else { cur });
    }
}

/// Data-driven starting point: the intercept column follows the empirical
/// quantiles of each site linearly between the thresholds, predictor
/// columns start small, shapes start at `min(0.1, bound − 0.05)`.
/// `spread` widens the central slope about the midpoint so that bounded
/// tails can be made to cover every observation.
fn initial_model(
    basis: &ISplineBasis,
    spec: &PriorSpec,
    config: &FitConfig,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
    jitter: f64,
    spread: f64,
) -> Result<QuantileModel, ModelError> {
    let ns = data.n_sites();
    let nc = data.n_predictors() + 1;
    let mb = basis.num_nonconstant() + 1;
    let (tl, tu) = (basis.tau_lower(), basis.tau_upper());
    let lin = basis.linear_coefficients();
    let bounds = shape_upper_bound(basis);
    let cap = spec.config.alpha_cap;
    let (amax_l, amax_u) = match config.constraint.order() {
        Some(q) if q >= 1 => (bounds.lower.min(cap), bounds.upper.min(cap)),
        _ => (cap, cap),
    };
    let alpha_l = 0.1f64.min(amax_l - 0.05);
    let alpha_u = 0.1f64.min(amax_u - 0.05);

    let mut pooled = data.responses().to_vec();
    pooled.sort_by(f64::total_cmp);
    let by_site = data.rows_by_site();
    let mut theta = ThetaField::zeros(ns, mb, nc);
    let mut tails = Vec::with_capacity(ns);
    let eps = 0.05;
    for s in 0..ns {
        let mut ys: Vec<f64> = by_site[s].iter().map(|&r| data.y(r)).collect();
        ys.sort_by(f64::total_cmp);
        let src = if ys.len() >= 20 { &ys } else { &pooled };
        let range = (src[src.len() - 1] - src[0]).max(1e-8 * spec.scale);
        // a tail-free end must cover the data
        let q_lo = if tl > 0.0 { empirical_quantile(src, tl) } else { src[0] - 0.05 * range };
        let q_hi = if tu < 1.0 { empirical_quantile(src, tu) } else { src[src.len() - 1] + 0.05 * range };
        let c = spread * ((q_hi - q_lo) / (tu - tl)).max(1e-6 * spec.scale);
        let q_lo = 0.5 * (q_lo + q_hi) - 0.5 * c * (tu - tl);
        let noise = |rng: &mut ChaCha8Rng| jitter * rng.sample::<f64, _>(StandardNormal);
        for p in 0..nc {
            let w = if p == 0 { 1.0 } else { eps };
            let loc = if p == 0 { q_lo } else { 0.0 };
            theta.set_coef(s, 0, p, loc + noise(rng) * c * (tu - tl) * 0.1);
            for (m, &l) in lin.iter().enumerate().skip(1) {
                theta.set_latent(s, m, p, (w * c * l).ln() + noise(rng));
            }
        }
        let scale_l = |w: f64| w * c * tl.max(1e-3);
        let scale_u = |w: f64| w * c * (1.0 - tu).max(1e-3);
        tails.push(SiteTails {
            alpha_lower: alpha_l + 0.1 * noise(rng),
            alpha_upper: alpha_u + 0.1 * noise(rng),
            sigma_lower: (0..nc)
                .map(|p| scale_l(if p == 0 { 1.0 } else { eps }) * noise(rng).exp())
                .collect(),
            sigma_upper: (0..nc)
                .map(|p| scale_u(if p == 0 { 1.0 } else { eps }) * noise(rng).exp())
                .collect(),
        });
    }
    let mut model = QuantileModel::new(basis.clone(), theta, tails, config.constraint)?;
    model.enforce_constraints()?;
    Ok(model)
}

fn initial_hyper(model: &QuantileModel, spec: &PriorSpec) -> Result<LogGpPrior, InferenceError> {
    let nb = model.basis().num_nonconstant() + 1;
    let nc = model.n_predictors() + 1;
    let corr = Correlation::exponential(spec.config.correlation_range)?;
    let mut hyper = LogGpPrior::uniform(nb, nc, GpHyper::new(0.0, 1.0, 1.0)?, corr)?;
    let ns = model.n_sites() as f64;
    for &m in spec.free_ms() {
        for p in 0..nc {
            let mean = (0..model.n_sites()).map(|s| model.theta().latent(s, m, p)).sum::<f64>() / ns;
            let sd = 0.5 * spec.gp_scale(m);
            hyper.set_hyper(m, p, GpHyper::new(mean, sd * sd, sd * sd)?)?;
        }
    }
    Ok(hyper)
}

fn run_chain(
    c: usize,
    basis: &ISplineBasis,
    spec: &PriorSpec,
    layout: &SampleLayout,
    packed: &[SiteRows],
    data: &Dataset,
    config: &FitConfig,
) -> Result<ChainOutput, InferenceError> {
    let mc = &config.mcmc;
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    rng.set_stream(c as u64);
    let n_cols = data.n_predictors() + 1;

    let mut chain = None;
    for attempt in 0..MAX_INIT_ATTEMPTS {
        let jitter = 0.05 * (1.0 + attempt as f64 / 10.0);
        let spread = 1.2f64.powi(attempt as i32 / 2);
        let Ok(model) = initial_model(basis, spec, config, data, &mut rng, jitter, spread) else {
            continue;
        };
        let hyper = initial_hyper(&model, spec)?;
        let mut ch = Chain {
            spec,
            packed,
            sv: SiteVector { spec, n_cols },
            n_cols,
            model,
            hyper,
            factors: vec![],
            field_lp: vec![],
            hyper_lp: vec![],
            site_ll: vec![],
            tail_lp: vec![],
            rng: rng.clone(),
            curve: QuantileCurve::new(basis, Vec::new(), 0.0, 0.0, 0.0, 0.0),
        };
        ch.refresh_all()?;
        if ch.log_post().is_finite() {
            chain = Some(ch);
            break;
        }
        log::debug!("chain {c}: initial state {attempt} has non-finite posterior, re-jittering");
    }
    let mut ch = chain.ok_or(InferenceError::InitFailed {
        attempts: MAX_INIT_ATTEMPTS,
    })?;

    let ns = data.n_sites();
    let nf = ch.n_fields();
    let site_steps = ch.sv.initial_steps(spec.scale);
    let mut site_props = Vec::with_capacity(ns);
    for s in 0..ns {
        site_props.push(if packed[s].y.is_empty() {
            AdaptiveProposal::new(&site_steps)
        } else {
            ch.warm_start(s, &site_steps)
        });
    }
    ch.hyper = initial_hyper(&ch.model, spec)?;
    ch.refresh_all()?;
    if !ch.log_post().is_finite() {
        return Err(InferenceError::InitFailed {
            attempts: MAX_INIT_ATTEMPTS,
        });
    }
    let mut field_props: Vec<_> = (0..nf)
        .map(|k| {
            let (m, _) = ch.field(k);
            let step = if m == 0 { 0.02 * spec.scale } else { 0.05 };
            AdaptiveProposal::new(&vec![step; ns])
        })
        .collect();
    let mut hyper_props: Vec<_> = (0..nf)
        .map(|k| {
            let (m, _) = ch.field(k);
            let step = if m == 0 { 0.1 * spec.scale } else { 0.1 };
            AdaptiveProposal::new(&[step, 0.2, 0.2])
        })
        .collect();

    let burn = mc.burn_in();
    let (mut cur, mut cand) = (Vec::new(), Vec::new());
    let mut out = ChainOutput {
        chain: vec![],
        iteration: vec![],
        rows: vec![],
        acceptance: vec![],
    };
    let all_props = |sp: &mut Vec<AdaptiveProposal>, fp: &mut Vec<AdaptiveProposal>, hp: &mut Vec<AdaptiveProposal>, f: &dyn Fn(&mut AdaptiveProposal)| {
        sp.iter_mut().chain(fp.iter_mut()).chain(hp.iter_mut()).for_each(f);
    };
    for it in 0..mc.iterations {
        if it == burn / 2 {
            all_props(&mut site_props, &mut field_props, &mut hyper_props, &|p| p.reset_history());
        }
        if it == burn {
            all_props(&mut site_props, &mut field_props, &mut hyper_props, &|p| p.freeze());
        }
        for (s, prop) in site_props.iter_mut().enumerate() {
            ch.site_step(s, prop, &mut cur, &mut cand);
        }
        if ns > 1 {
            for (k, prop) in field_props.iter_mut().enumerate() {
                ch.field_step(k, prop, &mut cur, &mut cand);
            }
        }
        for (k, prop) in hyper_props.iter_mut().enumerate() {
            ch.hyper_step(k, prop, &mut cur, &mut cand);
        }
        if it >= burn && (it - burn) % mc.thin == 0 {
            let ll: f64 = ch.site_ll.iter().sum();
            let lp = ch.log_post() - ll - jacobians(&ch);
            out.chain.push(c);
            out.iteration.push(it);
            out.rows.push(layout.pack(&ch.model, &ch.hyper, ll, lp));
        }
    }
    for (s, p) in site_props.iter().enumerate() {
        out.acceptance.push(BlockAcceptance {
            chain: c,
            block: format!("site.{s}"),
            rate: p.acceptance_rate(),
        });
    }
    if ns > 1 {
        for (k, p) in field_props.iter().enumerate() {
            let (m, q) = ch.field(k);
            out.acceptance.push(BlockAcceptance {
                chain: c,
                block: format!("field.{m}.{q}"),
                rate: p.acceptance_rate(),
            });
        }
    }
    for (k, p) in hyper_props.iter().enumerate() {
        let (m, q) = ch.field(k);
        out.acceptance.push(BlockAcceptance {
            chain: c,
            block: format!("hyper.{m}.{q}"),
            rate: p.acceptance_rate(),
        });
    }
    Ok(out)
}

/// Hessian of `f` at `x` in coordinates scaled by `steps`, by central
/// differences with step 0.2 in those units. Entries whose stencil leaves
/// the support are set to zero off the diagonal and to one on it.
fn standardized_hessian(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], steps: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let h = 0.2;
    let mut probe = x.to_vec();
    let mut at = |probe: &mut Vec<f64>, moves: &[(usize, f64)]| {
        for &(i, t) in moves {
            probe[i] = x[i] + t * h * steps[i];
        }
        let v = f(probe);
        for &(i, _) in moves {
            probe[i] = x[i];
        }
        v
    };
    let f0 = at(&mut probe, &[]);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let v = (at(&mut probe, &[(i, 1.0)]) - 2.0 * f0 + at(&mut probe, &[(i, -1.0)])) / (h * h);
        hess[(i, i)] = if v.is_finite() && v > 0.0 { v } else { 1.0 };
        for j in 0..i {
            let v = (at(&mut probe, &[(i, 1.0), (j, 1.0)]) - at(&mut probe, &[(i, 1.0), (j, -1.0)])
                - at(&mut probe, &[(i, -1.0), (j, 1.0)])
                + at(&mut probe, &[(i, -1.0), (j, -1.0)]))
                / (4.0 * h * h);
            let v = if v.is_finite() { v } else { 0.0 };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Proposal with covariance `2.38²/d · H⁻¹`, mapped back from step-scaled
/// coordinates. Eigenvalues of `H` are floored at 0.01, so no direction
/// proposes more than ten default steps per unit of scale.
fn laplace_proposal(hess: &DMatrix<f64>, steps: &[f64]) -> Option<AdaptiveProposal> {
    let d = steps.len();
    let eig = nalgebra::SymmetricEigen::new(hess.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(1e-2)));
    let cov_z = &eig.eigenvectors * inv * eig.eigenvectors.transpose();
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(steps));
    let cov = &scale * cov_z * &scale * (2.38 * 2.38 / d as f64);
    AdaptiveProposal::with_covariance(&(0.5 * (&cov + cov.transpose())))
}

/// Log-scale Jacobian terms carried inside the chain's cached prior terms.
fn jacobians(ch: &Chain<'_>) -> f64 {
    let mut j = 0.0;
    for s in 0..ch.model.n_sites() {
        j += ch.sv.log_jacobian(&ch.model, s);
    }
    for k in 0..ch.n_fields() {
        let (m, p) = ch.field(k);
        let h = ch.hyper.hyper(m, p).expect("free field");
        j += 0.5 * (h.spatial_var.ln() + h.nugget_var.ln());
    }
    j
}
