use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::transport::{SourceGeometry, TransportTable, WindObservation, WindSeries, HOURS_PER_PERIOD};
use super::AppError;
use crate::covariance::Coord;
use crate::inference::{Dataset, FitConfig, VALIDATION_FOLD};
use crate::model::ConstraintMode;
use crate::simulate::pareto_quantile;
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

pub const FIXTURE_SITES: usize = 16;
pub const FIXTURE_PERIODS: usize = 26;

/// Synthetic fence-line study: a rectangular facility boundary lined with
/// monitors, two sources inside, two-week sampling periods and hourly wind.
#[derive(Debug, Clone)]
pub struct FenceLineFixture {
    pub geometry: SourceGeometry,
    pub schedule: Vec<NaiveDateTime>,
    pub wind: Vec<WindObservation>,
    /// Raw (unscaled) transports from each source, one row per site and
    /// period, with a synthetic log-concentration response.
    pub data: Dataset,
    /// Fit settings sized for this layout.
    pub config: FitConfig,
}

/// Points evenly spaced along the perimeter of a `w × h` rectangle centred
/// at the origin, starting from the lower-left corner.
fn perimeter(n: usize, w: f64, h: f64) -> Vec<Coord> {
    let total = 2.0 * (w + h);
    (0..n)
        .map(|i| {
            let mut d = total * i as f64 / n as f64;
            let (x0, y0) = (-w / 2.0, -h / 2.0);
            if d < w {
                return [x0 + d, y0];
            }
            d -= w;
            if d < h {
                return [x0 + w, y0 + d];
            }
            d -= h;
            if d < w {
                return [x0 + w - d, y0 + h];
            }
            d -= w;
            [x0, y0 + h - d]
        })
        .collect()
}

pub fn fence_line_fixture(seed: u64) -> Result<FenceLineFixture, AppError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = SourceGeometry {
        sources: vec![[-120.0, 40.0], [150.0, -60.0]],
        sites: perimeter(FIXTURE_SITES, 600.0, 300.0),
    };
    let first = NaiveDate::from_ymd_opt(2019, 1, 7)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let schedule: Vec<NaiveDateTime> = (0..FIXTURE_PERIODS)
        .map(|t| first + TimeDelta::days(14 * t as i64))
        .collect();

    // prevailing south-westerly with period-level swings
    let speed = LogNormal::new(3f64.ln(), 0.5).expect("valid lognormal");
    let swing = Normal::new(0.0, 50.0).expect("valid normal");
    let hourly = Normal::new(0.0, 35.0).expect("valid normal");
    let mut wind = Vec::with_capacity(FIXTURE_PERIODS * HOURS_PER_PERIOD);
    for start in &schedule {
        let base = 225.0 + swing.sample(&mut rng);
        for h in 0..HOURS_PER_PERIOD {
            let dir: f64 = base + hourly.sample(&mut rng);
            let s = speed.sample(&mut rng);
            // about one reading in a hundred is lost
            if rng.random::<f64>() < 0.01 {
                continue;
            }
            wind.push(WindObservation {
                timestamp: *start + TimeDelta::hours(h as i64),
                wind_speed_mps: s,
                wind_dir_deg_from: dir.rem_euclid(360.0),
            });
        }
    }
    let series = WindSeries::from_observations(&wind, &schedule)?;
    let table = TransportTable::compute(&series, &geometry)?;

    let max: Vec<f64> = (0..2)
        .map(|k| {
            table
                .values
                .iter()
                .flatten()
                .map(|v| v[k])
                .fold(f64::MIN_POSITIVE, f64::max)
        })
        .collect();
    let probit = StdNormal::standard();
    let n = FIXTURE_SITES * FIXTURE_PERIODS;
    let (mut site, mut time, mut x, mut y, mut fold) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, s) in geometry.sites.iter().enumerate() {
        let east = 0.5 + s[0] / 600.0;
        for t in 0..FIXTURE_PERIODS {
            let v = &table.values[i][t];
            let (x1, x2) = (v[0] / max[0], v[1] / max[1]);
            let u: f64 = rng.random_range(1e-12..1.0);
            let b0 = 0.2 + 0.15 * probit.inverse_cdf(u);
            let b1 = 0.3 * u + 0.2 * east;
            let b2 = pareto_quantile(u, 0.25, 0.0, 0.2);
            site.push(i);
            time.push(t);
            x.extend_from_slice(v);
            y.push(b0 + b1 * x1 + b2 * x2);
            fold.push(None);
        }
    }
    let mut data = Dataset::new(geometry.sites.clone(), 2, site, time, x, y, fold)?;
    // the last four periods are held out
    let folds = (0..n)
        .map(|r| Some(if data.time(r) >= FIXTURE_PERIODS - 4 { VALIDATION_FOLD } else { 0 }))
        .collect();
    data.set_folds(folds)?;

    let mut config = FitConfig::default();
    config.constraint = ConstraintMode::Continuous;
    config.prior.correlation_range = 300.0;
    config.mcmc.chains = 2;
    config.mcmc.iterations = 4000;
    config.mcmc.thin = 10;
    config.mcmc.seed = seed;
    Ok(FenceLineFixture {
        geometry,
        schedule,
        wind,
        data,
        config,
    })
}
