//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture) and then asserts.
//!
//! Criteria 4 to 6 share one set of D1 fits, computed once per process.

use std::io::Write;
use std::sync::OnceLock;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use iqr_core::app::{compute_transport, parse_timestamp, WindPeriod, WindSeries, HOURS_PER_PERIOD};
use iqr_core::covariance::{cholesky_jittered, Coord, Correlation, GpHyper, LogGpPrior};
use iqr_core::inference::{
    beta_draws, mcmc_fit, predictive_densities, summarize_draws, Dataset, FitConfig, PriorConfig, PriorSpec,
};
use iqr_core::model::{shape_upper_bound, ConstraintMode, Inversion, QuantileModel, Side, SiteTails, ThetaField};
use iqr_core::scoring::{coverage, log_score, rmise, MeanSe, QuantileGrid};
use iqr_core::simulate::{gen_design, truth_grid, DesignId, DesignSpec};
use iqr_core::splines::ISplineBasis;

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

// ---------------------------------------------------------------------------
// random models for the validity and smoothness suites

fn random_basis(rng: &mut ChaCha8Rng) -> ISplineBasis {
    let interior = rng.random_range(1..=3);
    let tl = rng.random_range(0.08..0.2);
    let tu = rng.random_range(0.8..0.92);
    ISplineBasis::equally_spaced(3, interior + 3, tl, tu).unwrap()
}

/// Unconstrained model on a random basis with two predictors. Shapes stay
/// below the differentiability bound so every constraint mode is feasible.
fn random_model(rng: &mut ChaCha8Rng) -> QuantileModel {
    let basis = random_basis(rng);
    let mb = basis.num_nonconstant();
    let bounds = shape_upper_bound(&basis);
    let mut theta = ThetaField::zeros(1, mb + 1, 3);
    for p in 0..3 {
        theta.set_latent(0, 0, p, rng.random_range(-2.0..2.0));
        for m in 1..=mb {
            theta.set_latent(0, m, p, rng.random_range(-3.0..1.0));
        }
    }
    let mut shape = |bound: f64| rng.random_range(-0.9..bound.min(0.5) - 0.01);
    let (al, au) = (shape(bounds.lower), shape(bounds.upper));
    let tails = vec![SiteTails {
        alpha_lower: al,
        alpha_upper: au,
        sigma_lower: (0..3).map(|_| rng.random_range(0.05..1.0)).collect(),
        sigma_upper: (0..3).map(|_| rng.random_range(0.05..1.0)).collect(),
    }];
    QuantileModel::new(basis, theta, tails, ConstraintMode::None).unwrap()
}

#[test]
fn criterion_1_validity() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut min_deriv, mut max_norm, mut max_trip) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut failures = 0usize;
    let quad = 1000;
    for i in 0..1000 {
        let base = random_model(&mut rng);
        let model = if i % 2 == 0 {
            base.apply_continuity().unwrap()
        } else {
            base.apply_differentiability(1).unwrap()
        };
        for k in 0..100 {
            let tau: f64 = rng.random_range(0.001..0.999);
            let x = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            let d = model.q_deriv(tau, &x, 0, None).unwrap();
            min_deriv = min_deriv.min(d);
            let y = model.q_eval(tau, &x, 0).unwrap();
            match model.q_invert(y, &x, 0) {
                Ok(Inversion::Tau(t)) => max_trip = max_trip.max((t - tau).abs()),
                _ => failures += 1,
            }
            if k == 0 {
                let c = model.curve(0, &x).unwrap();
                let total: f64 = (0..quad)
                    .map(|j| {
                        let t = (j as f64 + 0.5) / quad as f64;
                        c.density(c.eval(t)).unwrap() * c.deriv(t, 1, Side::Right)
                    })
                    .sum::<f64>()
                    / quad as f64;
                max_norm = max_norm.max((total - 1.0).abs());
            }
        }
    }
    let pass = min_deriv >= -1e-12 && max_norm < 1e-6 && max_trip < 1e-9 && failures == 0;
    report(
        1,
        pass,
        &format!(
            "min Q' {min_deriv:.3e}, max |∫f(Q)Q' - 1| {max_norm:.3e}, max round-trip {max_trip:.3e}, failed inversions {failures}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

/// One-sided fourth-order differences of `q` at `t`, `dir = ±1`.
fn one_sided(q: impl Fn(f64) -> f64, t: f64, dir: f64, h: f64) -> (f64, f64) {
    let f: Vec<f64> = (0..6).map(|k| q(t + dir * k as f64 * h)).collect();
    let d1 = dir * (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * h);
    let d2 = (45.0 * f[0] - 154.0 * f[1] + 214.0 * f[2] - 156.0 * f[3] + 61.0 * f[4] - 10.0 * f[5]) / (12.0 * h * h);
    (d1, d2)
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn criterion_2_smoothness() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 5e-4;
    let (mut gap1_cont, mut gap1, mut gap2) = (0.0f64, 0.0f64, 0.0f64);
    let mut sweep_mismatch = 0usize;
    for _ in 0..200 {
        let base = random_model(&mut rng);
        let x = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
        let (tl, tu) = (base.basis().tau_lower(), base.basis().tau_upper());

        let cont = base.apply_continuity().unwrap();
        let c = cont.curve(0, &x).unwrap();
        for t in [tl, tu] {
            let (l, _) = one_sided(|v| c.eval(v), t, -1.0, h);
            let (r, _) = one_sided(|v| c.eval(v), t, 1.0, h);
            gap1_cont = gap1_cont.max(rel_gap(l, r));
        }

        let diff = base.apply_differentiability(1).unwrap();
        let c = diff.curve(0, &x).unwrap();
        for t in [tl, tu] {
            let (l1, l2) = one_sided(|v| c.eval(v), t, -1.0, h);
            let (r1, r2) = one_sided(|v| c.eval(v), t, 1.0, h);
            gap1 = gap1.max(rel_gap(l1, r1));
            gap2 = gap2.max(rel_gap(l2, r2));
        }

        // infeasible exactly above the bound, on each side
        let bounds = shape_upper_bound(base.basis());
        for k in 0..50 {
            let step = -1.0 + 2.0 * k as f64 / 49.0;
            let mut m = base.clone();
            m.site_tails_mut(0).alpha_lower = bounds.lower + step;
            if m.apply_differentiability(1).is_ok() != (step <= 0.0) {
                sweep_mismatch += 1;
            }
            let mut m = base.clone();
            m.site_tails_mut(0).alpha_upper = bounds.upper + step;
            if m.apply_differentiability(1).is_ok() != (step <= 0.0) {
                sweep_mismatch += 1;
            }
        }
    }
    let pass = gap1_cont < 1e-6 && gap1 < 1e-6 && gap2 < 1e-4 && sweep_mismatch == 0;
    report(
        2,
        pass,
        &format!(
            "continuity Q' gap {gap1_cont:.2e}; differentiable Q' gap {gap1:.2e}, Q'' gap {gap2:.2e}; shape sweep mismatches {sweep_mismatch}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

/// Draws of every `θ_{m,p}` over `sites`, laid out `[m][p][site]`.
fn draw_fields(prior: &LogGpPrior, sites: &[Coord], rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(prior.n_basis());
    for m in 0..prior.n_basis() {
        let mut row = Vec::with_capacity(prior.n_cols());
        for p in 0..prior.n_cols() {
            let l = cholesky_jittered(&prior.latent_cov(m, p, sites).unwrap()).unwrap();
            let z = DVector::from_fn(sites.len(), |_, _| StandardNormal.sample(rng));
            let mu = prior.hyper(m, p).unwrap().mean_latent;
            let latent = l * z;
            row.push(
                latent
                    .iter()
                    .map(|v| if m == 0 { mu + v } else { (mu + v).exp() })
                    .collect(),
            );
        }
        out.push(row);
    }
    out
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

#[test]
fn criterion_3_covariance_oracle() {
    let basis = ISplineBasis::equally_spaced(3, 4, 0.0, 1.0).unwrap();
    let mut prior = LogGpPrior::uniform(
        5,
        2,
        GpHyper::new(-0.5, 0.3, 0.05).unwrap(),
        Correlation::exponential(2.0).unwrap(),
    )
    .unwrap();
    prior.set_hyper(0, 0, GpHyper::new(1.0, 0.3, 0.05).unwrap()).unwrap();
    prior.set_hyper(0, 1, GpHyper::new(0.5, 0.3, 0.05).unwrap()).unwrap();

    // four close sites, then a pair at equal distance elsewhere for the
    // non-stationarity check
    let sites: Vec<Coord> = vec![[0.0, 0.0], [0.3, 0.0], [0.0, 0.4], [0.5, 0.5], [1.0, 1.0], [1.3, 1.0]];
    let x = [0.5, 0.5, 0.8, 0.2, 0.1, 0.9];
    let n = 100_000;

    // integrals of the I-splines by composite Simpson, independent of the
    // basis' own closed forms
    let g: Vec<f64> = (0..5)
        .map(|m| {
            if m == 0 {
                return 1.0;
            }
            let k = 20_000;
            let f = |t: f64| basis.ispline(m, t).unwrap();
            let hh = 1.0 / k as f64;
            let inner: f64 = (1..k).map(|i| f(i as f64 * hh) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
            (f(0.0) + inner + f(1.0)) * hh / 3.0
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut theta = vec![vec![Vec::with_capacity(n); sites.len()]; 4];
    let mut y_draw = vec![Vec::with_capacity(n); sites.len()];
    let mut y_cond = vec![Vec::with_capacity(n); sites.len()];
    for _ in 0..n {
        let f = draw_fields(&prior, &sites, &mut rng);
        for s in 0..sites.len() {
            for (j, (m, p)) in [(1, 0), (2, 1), (0, 0), (0, 1)].into_iter().enumerate() {
                if s < 4 {
                    theta[j][s].push(f[m][p][s]);
                }
            }
            let u: f64 = rng.random();
            let xs = [1.0, x[s]];
            let (mut yd, mut yc) = (0.0, 0.0);
            for m in 0..5 {
                let im = if m == 0 { 1.0 } else { basis.ispline(m, u).unwrap() };
                for (p, &xp) in xs.iter().enumerate() {
                    yd += f[m][p][s] * xp * im;
                    yc += f[m][p][s] * xp * g[m];
                }
            }
            y_draw[s].push(yd);
            y_cond[s].push(yc);
        }
    }

    let mut worst = 0.0f64;
    let mut worst_what = String::new();
    let mut check = |what: String, mc: f64, want: f64| {
        let e = (mc / want - 1.0).abs();
        if e > worst {
            worst = e;
            worst_what = format!("{what}: MC {mc:.5} vs {want:.5}");
        }
    };
    for (j, (m, p)) in [(1, 0), (2, 1), (0, 0), (0, 1)].into_iter().enumerate() {
        for a in 0..4 {
            for b in a..4 {
                let want = prior.theta_cov(m, p, &sites[a], &sites[b]).unwrap();
                check(format!("theta_cov({m},{p}) {a}-{b}"), sample_cov(&theta[j][a], &theta[j][b]), want);
            }
        }
    }
    for s in 0..sites.len() {
        let mc = y_draw[s].iter().sum::<f64>() / n as f64;
        check(format!("y_mean site {s}"), mc, prior.y_mean(&[x[s]], &basis).unwrap());
    }
    for a in 0..4 {
        for b in a + 1..4 {
            let want = prior.y_cov(&[x[a]], &[x[b]], &sites[a], &sites[b], &basis).unwrap();
            check(format!("y_cov {a}-{b}"), sample_cov(&y_cond[a], &y_cond[b]), want);
        }
    }
    // sites 0-1 and 4-5 are 0.3 apart; x is constant over the first pair
    // and varies over the second
    let stat = prior.y_cov(&[x[0]], &[x[1]], &sites[0], &sites[1], &basis).unwrap();
    let nonstat = prior.y_cov(&[x[4]], &[x[5]], &sites[4], &sites[5], &basis).unwrap();
    check("y_cov 4-5".into(), sample_cov(&y_cond[4], &y_cond[5]), nonstat);
    let same_x = prior.y_cov(&[x[0]], &[x[0]], &sites[4], &sites[5], &basis).unwrap();
    let nonstationary = (stat - nonstat).abs() > 0.05 * stat && (stat - same_x).abs() < 1e-12 * stat;

    let pass = worst < 0.02 && nonstationary;
    report(
        3,
        pass,
        &format!(
            "worst relative error {:.2}% ({worst_what}); y_cov at distance 0.3: {stat:.5} (x constant) vs {nonstat:.5} (x varying)",
            100.0 * worst
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// simulation study (criteria 4 to 6)

const REPLICATES: u64 = 10;

fn study_config(seed: u64) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.constraint = ConstraintMode::Continuous;
    cfg.basis.tau_lower = 0.1;
    cfg.basis.tau_upper = 0.9;
    cfg.basis.num_basis = 4;
    cfg.mcmc.chains = 2;
    cfg.mcmc.iterations = 20_000;
    cfg.mcmc.thin = 5;
    cfg.mcmc.seed = seed;
    cfg
}

struct Replicate {
    rmise: [f64; 3],
    coverage: [f64; 3],
    tail_rmise: f64,
    in_sample: MeanSe,
    out_of_sample: MeanSe,
}

fn run_replicate(design: DesignId, r: u64) -> Replicate {
    let spec = DesignSpec::standard(design, 100 + r);
    let sim = gen_design(&spec).unwrap();
    let (train, valid) = (sim.data.training(), sim.data.validation());
    let models = mcmc_fit(&train, &study_config(r + 1)).unwrap().models().unwrap();
    let central = QuantileGrid::central();
    let mut out = Replicate {
        rmise: [0.0; 3],
        coverage: [0.0; 3],
        tail_rmise: 0.0,
        in_sample: log_score(&predictive_densities(&models, &train).unwrap()).unwrap(),
        out_of_sample: log_score(&predictive_densities(&models, &valid).unwrap()).unwrap(),
    };
    for p in 0..3 {
        let truth = truth_grid(&spec, p, central.levels()).unwrap();
        let draws = beta_draws(&models, p, central.levels(), &[0]).unwrap();
        let sm: Vec<_> = draws[0].iter().map(|d| summarize_draws(d, 0.95)).collect();
        let est = vec![sm.iter().map(|v| v.0).collect::<Vec<_>>()];
        let lo = vec![sm.iter().map(|v| v.1).collect::<Vec<_>>()];
        let hi = vec![sm.iter().map(|v| v.2).collect::<Vec<_>>()];
        out.rmise[p] = rmise(&est, &truth, &central).unwrap();
        out.coverage[p] = coverage(&lo, &hi, &truth).unwrap();
    }
    let tail = QuantileGrid::upper_tail();
    let truth = truth_grid(&spec, 0, tail.levels()).unwrap();
    let draws = beta_draws(&models, 0, tail.levels(), &[0]).unwrap();
    let est = vec![draws[0].iter().map(|d| summarize_draws(d, 0.95).0).collect::<Vec<_>>()];
    out.tail_rmise = rmise(&est, &truth, &tail).unwrap();
    out
}

fn d1_study() -> &'static [Replicate] {
    static STUDY: OnceLock<Vec<Replicate>> = OnceLock::new();
    STUDY.get_or_init(|| (0..REPLICATES).map(|r| run_replicate(DesignId::D1, r)).collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    lo <= v && v <= hi
}

#[test]
fn criterion_4_simulation_reproduction() {
    let d1 = d1_study();
    let bands = [(0.007, 0.028), (0.013, 0.054), (0.011, 0.044)];
    let mut pass = true;
    let mut detail = String::from("D1");
    for p in 0..3 {
        let r = mean(d1.iter().map(|x| x.rmise[p]));
        let c = mean(d1.iter().map(|x| x.coverage[p]));
        pass &= within(r, bands[p]) && c >= 0.80;
        detail += &format!(" β{p} RMISE {r:.4} cov {c:.2};");
    }
    let d2: Vec<Replicate> = (0..REPLICATES).map(|r| run_replicate(DesignId::D2, r)).collect();
    let r2 = mean(d2.iter().map(|x| x.rmise[2]));
    pass &= within(r2, (0.023, 0.094));
    detail += &format!(" D2 β2 RMISE {r2:.4}");
    report(4, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_5_tail_grid() {
    let r = mean(d1_study().iter().map(|x| x.tail_rmise));
    let pass = within(r, (0.0023, 0.0094));
    report(5, pass, &format!("D1 β0 RMISE on τ ∈ [0.950, 0.995]: {r:.4}"));
    assert!(pass);
}

#[test]
fn criterion_6_log_score() {
    let d1 = d1_study();
    let out: Vec<f64> = d1.iter().map(|x| x.out_of_sample.mean).collect();
    let ins: Vec<f64> = d1.iter().map(|x| x.in_sample.mean).collect();
    let out = MeanSe::of(&out).unwrap();
    let ins = MeanSe::of(&ins).unwrap();
    let pass = within(out.mean, (0.22, 0.40)) && ins.mean >= out.mean - 3.0 * out.se;
    report(
        6,
        pass,
        &format!(
            "D1 out-of-sample {:.3} ± {:.3}, in-sample {:.3} ± {:.3}",
            out.mean, out.se, ins.mean, ins.se
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

fn calibration_config(seed: u64) -> FitConfig {
    let mut cfg = study_config(seed);
    cfg.mcmc.iterations = 10_000;
    cfg.prior = PriorConfig {
        location_sd: 1.0,
        log_coef_mean: -1.0,
        log_coef_sd: 0.5,
        location_gp_scale: 0.3,
        log_coef_gp_scale: 0.3,
        sigma_scale: 0.3,
        alpha_max: 0.5,
        alpha_cap: 0.3,
        response_center: Some(0.0),
        response_scale: Some(1.0),
        ..PriorConfig::default()
    };
    cfg
}

fn half_normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    scale * z.abs()
}

/// A one-site model with two predictors drawn from the fitting prior, and
/// `n` responses from it.
fn prior_draw(cfg: &FitConfig, n: usize, rng: &mut ChaCha8Rng) -> (QuantileModel, Dataset) {
    let basis = cfg.basis.build().unwrap();
    let sites = vec![[0.0, 0.0]];
    let spec = PriorSpec::new(cfg.prior.clone(), &basis, cfg.constraint, sites.clone(), 0.0, 1.0).unwrap();
    let mb = basis.num_nonconstant();
    let mut theta = ThetaField::zeros(1, mb + 1, 3);
    for &m in spec.free_ms() {
        for p in 0..3 {
            let (mu, sd) = spec.mu_prior(m, p);
            let mean = mu + sd * rng.sample::<f64, _>(StandardNormal);
            let gs = spec.gp_scale(m);
            let (eta, lambda) = (half_normal(rng, gs), half_normal(rng, gs));
            let v = Normal::new(mean, eta.hypot(lambda)).unwrap().sample(rng);
            theta.set_latent(0, m, p, v);
        }
    }
    let (al, au) = (spec.alpha_lower_box(), spec.alpha_upper_box());
    let sigma = cfg.prior.sigma_scale;
    let tails = vec![SiteTails {
        alpha_lower: rng.random_range(al.0..al.1),
        alpha_upper: rng.random_range(au.0..au.1),
        sigma_lower: (0..3).map(|_| half_normal(rng, sigma)).collect(),
        sigma_upper: (0..3).map(|_| half_normal(rng, sigma)).collect(),
    }];
    let mut model = QuantileModel::new(basis, theta, tails, cfg.constraint).unwrap();
    model.enforce_constraints().unwrap();

    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = [rng.random::<f64>(), rng.random::<f64>()];
        let u: f64 = rng.random_range(1e-12..1.0);
        y.push(model.q_eval(u, &xi, 0).unwrap());
        x.extend_from_slice(&xi);
    }
    let data = Dataset::new(sites, 2, vec![0; n], (0..n).collect(), x, y, vec![None; n]).unwrap();
    (model, data)
}

#[test]
fn criterion_7_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let grid = QuantileGrid::central();
    let (mut inside, mut cells) = (0usize, 0usize);
    let mut per_rep = Vec::new();
    let mut first_data = None;
    for r in 0..10 {
        let cfg = calibration_config(r + 1);
        let (truth, data) = prior_draw(&cfg, 2000, &mut rng);
        let models = mcmc_fit(&data, &cfg).unwrap().models().unwrap();
        let mut hit = 0;
        for p in 0..3 {
            let draws = beta_draws(&models, p, grid.levels(), &[0]).unwrap();
            for (j, &tau) in grid.levels().iter().enumerate() {
                let (_, lo, hi) = summarize_draws(&draws[0][j], 0.90);
                let t = truth.beta(p, tau, 0).unwrap();
                hit += usize::from(lo <= t && t <= hi);
            }
        }
        let total = 3 * grid.len();
        per_rep.push(format!("{hit}/{total}"));
        inside += hit;
        cells += total;
        first_data.get_or_insert(data);
    }
    let frac = inside as f64 / cells as f64;

    let data = first_data.unwrap();
    let mut cfg = calibration_config(42);
    cfg.mcmc.iterations = 1000;
    let bytes = || {
        let mut buf = Vec::new();
        mcmc_fit(&data, &cfg).unwrap().write_csv(&mut buf).unwrap();
        buf
    };
    let identical = bytes() == bytes();

    let pass = frac >= 0.85 && identical;
    report(
        7,
        pass,
        &format!(
            "truth inside 90% band at {:.1}% of cells ({}); identical-seed runs byte-identical: {identical}",
            100.0 * frac,
            per_rep.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_8_transport() {
    let start = parse_timestamp("2021-03-01T00:00:00").unwrap();
    let constant = |w: [f64; 2]| {
        WindSeries::new(vec![WindPeriod {
            start,
            hours: vec![Some(w); HOURS_PER_PERIOD],
        }])
        .unwrap()
    };
    let (source, site) = ([10.0, 0.0], [0.0, 0.0]);
    let aligned = compute_transport(&constant([1.0, 0.0]), source, site).unwrap();
    let opposed = compute_transport(&constant([-1.0, 0.0]), source, site).unwrap();
    let perpendicular = compute_transport(&constant([0.0, 1.0]), source, site).unwrap();
    let examples = aligned == [336.0] && opposed == [0.0] && perpendicular == [0.0];

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let hours: Vec<Option<[f64; 2]>> = (0..HOURS_PER_PERIOD)
            .map(|_| Some([rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]))
            .collect();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (c, s) = (angle.cos(), angle.sin());
        let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let source = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
        let site = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
        let w = WindSeries::new(vec![WindPeriod {
            start,
            hours: hours.clone(),
        }])
        .unwrap();
        let wr = WindSeries::new(vec![WindPeriod {
            start,
            hours: hours.iter().map(|h| h.map(rot)).collect(),
        }])
        .unwrap();
        let a = compute_transport(&w, source, site).unwrap()[0];
        let b = compute_transport(&wr, rot(source), rot(site)).unwrap()[0];
        worst = worst.max((a - b).abs());
    }
    let pass = examples && worst <= 1e-10;
    report(
        8,
        pass,
        &format!(
            "aligned {aligned:?}, opposed {opposed:?}, perpendicular {perpendicular:?}; max rotation gap {worst:.2e}"
        ),
    );
    assert!(pass);
}
