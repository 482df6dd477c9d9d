use std::io::{Read, Write};

use chrono::{NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use super::AppError;
use crate::covariance::Coord;
use crate::inference::fmt_f64;

/// Hours in one two-week collection period.
pub const HOURS_PER_PERIOD: usize = 336;

const TIME_FORMATS: [&str; 3] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"];

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, AppError> {
    let s = s.trim();
    let s = s.strip_suffix('Z').unwrap_or(s);
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| AppError::Timestamp(s.to_string()))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// One station reading: speed and the direction the wind blows from, in
/// degrees clockwise from north.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindObservation {
    pub timestamp: NaiveDateTime,
    pub wind_speed_mps: f64,
    pub wind_dir_deg_from: f64,
}

impl WindObservation {
    /// East/north components of a vector of length `speed` pointing toward
    /// where the wind comes from. A positive projection onto `e − s` then
    /// means air carried from the source `e` to the site `s`.
    pub fn vector(&self) -> [f64; 2] {
        let th = self.wind_dir_deg_from.to_radians();
        [self.wind_speed_mps * th.sin(), self.wind_speed_mps * th.cos()]
    }
}

#[derive(Debug, Deserialize)]
struct WindRecord {
    timestamp: String,
    wind_speed_mps: f64,
    wind_dir_deg_from: f64,
}

pub fn read_wind_csv<R: Read>(r: R) -> Result<Vec<WindObservation>, AppError> {
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(r).deserialize::<WindRecord>().enumerate() {
        let rec = rec?;
        if !(rec.wind_speed_mps >= 0.0 && rec.wind_speed_mps.is_finite()) || !rec.wind_dir_deg_from.is_finite() {
            return Err(AppError::Wind(format!(
                "row {}: speed {} / direction {}",
                i + 1,
                rec.wind_speed_mps,
                rec.wind_dir_deg_from
            )));
        }
        out.push(WindObservation {
            timestamp: parse_timestamp(&rec.timestamp)?,
            wind_speed_mps: rec.wind_speed_mps,
            wind_dir_deg_from: rec.wind_dir_deg_from,
        });
    }
    Ok(out)
}

pub fn write_wind_csv<W: Write>(obs: &[WindObservation], w: W) -> Result<(), AppError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["timestamp", "wind_speed_mps", "wind_dir_deg_from"])?;
    for o in obs {
        wr.write_record([
            format_timestamp(&o.timestamp),
            fmt_f64(o.wind_speed_mps),
            fmt_f64(o.wind_dir_deg_from),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Period start times, one per row under a `period_start` column.
pub fn read_schedule_csv<R: Read>(r: R) -> Result<Vec<NaiveDateTime>, AppError> {
    #[derive(Deserialize)]
    struct Row {
        period_start: String,
    }
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize::<Row>() {
        out.push(parse_timestamp(&rec?.period_start)?);
    }
    Ok(out)
}

pub fn write_schedule_csv<W: Write>(starts: &[NaiveDateTime], w: W) -> Result<(), AppError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["period_start"])?;
    for t in starts {
        wr.write_record([format_timestamp(t)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Hourly wind vectors for one collection period; `None` marks a missing
/// hour.
#[derive(Debug, Clone, PartialEq)]
pub struct WindPeriod {
    pub start: NaiveDateTime,
    pub hours: Vec<Option<[f64; 2]>>,
}

impl WindPeriod {
    pub fn missing_hours(&self) -> usize {
        self.hours.iter().filter(|h| h.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindSeries {
    periods: Vec<WindPeriod>,
}

impl WindSeries {
    pub fn new(periods: Vec<WindPeriod>) -> Result<Self, AppError> {
        for (i, p) in periods.iter().enumerate() {
            if p.hours.len() != HOURS_PER_PERIOD {
                return Err(AppError::Wind(format!(
                    "period {i} has {} hours, expected {HOURS_PER_PERIOD}",
                    p.hours.len()
                )));
            }
        }
        Ok(Self { periods })
    }

    /// Bin hourly observations into periods starting at `schedule`. Each
    /// reading fills the hour slot containing its timestamp; readings
    /// outside every period are ignored and repeated slots keep the last
    /// reading.
    pub fn from_observations(obs: &[WindObservation], schedule: &[NaiveDateTime]) -> Result<Self, AppError> {
        for w in schedule.windows(2) {
            if w[1] - w[0] < TimeDelta::hours(HOURS_PER_PERIOD as i64) {
                return Err(AppError::Schedule(format!(
                    "periods starting {} and {} overlap",
                    format_timestamp(&w[0]),
                    format_timestamp(&w[1])
                )));
            }
        }
        let mut periods: Vec<WindPeriod> = schedule
            .iter()
            .map(|&start| WindPeriod {
                start,
                hours: vec![None; HOURS_PER_PERIOD],
            })
            .collect();
        let mut ignored = 0usize;
        for o in obs {
            let k = schedule.partition_point(|s| *s <= o.timestamp);
            if k == 0 {
                ignored += 1;
                continue;
            }
            let p = &mut periods[k - 1];
            let h = (o.timestamp - p.start).num_minutes().div_euclid(60);
            if (0..HOURS_PER_PERIOD as i64).contains(&h) {
                p.hours[h as usize] = Some(o.vector());
            } else {
                ignored += 1;
            }
        }
        if ignored > 0 {
            log::info!("{ignored} wind readings fall outside the deployment schedule");
        }
        Self::new(periods)
    }

    pub fn periods(&self) -> &[WindPeriod] {
        &self.periods
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }
}

/// Sources and monitoring sites in one shared planar coordinate system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceGeometry {
    pub sources: Vec<Coord>,
    pub sites: Vec<Coord>,
}

impl SourceGeometry {
    pub fn validate(&self) -> Result<(), AppError> {
        if self.sources.is_empty() || self.sites.is_empty() {
            return Err(AppError::Geometry("need at least one source and one site".into()));
        }
        for (k, e) in self.sources.iter().enumerate() {
            for (i, s) in self.sites.iter().enumerate() {
                if e == s {
                    return Err(AppError::Geometry(format!("source {k} coincides with site {i}")));
                }
            }
        }
        Ok(())
    }
}

/// `Σ_h max(w_h · (e − s)/‖e − s‖, 0)` for every period. Missing hours
/// contribute nothing.
pub fn compute_transport(wind: &WindSeries, source: Coord, site: Coord) -> Result<Vec<f64>, AppError> {
    let d = [source[0] - site[0], source[1] - site[1]];
    let len = d[0].hypot(d[1]);
    if !(len > 0.0) {
        return Err(AppError::Geometry(format!("source and site coincide at {source:?}")));
    }
    let u = [d[0] / len, d[1] / len];
    let mut out = Vec::with_capacity(wind.len());
    for (t, p) in wind.periods().iter().enumerate() {
        let missing = p.missing_hours();
        if missing > 0 {
            log::warn!("period {t} is missing {missing} of {HOURS_PER_PERIOD} wind hours");
        }
        let x = p
            .hours
            .iter()
            .flatten()
            .map(|w| (w[0] * u[0] + w[1] * u[1]).max(0.0))
            .sum();
        out.push(x);
    }
    Ok(out)
}

/// Transport from every source to every site, as rows `(site, period,
/// [x per source], missing hours)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportTable {
    pub sites: Vec<Coord>,
    pub n_periods: usize,
    /// `[site][period][source]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub missing: Vec<usize>,
}

impl TransportTable {
    pub fn compute(wind: &WindSeries, geometry: &SourceGeometry) -> Result<Self, AppError> {
        geometry.validate()?;
        let n = wind.len();
        let mut values = vec![vec![vec![0.0; geometry.sources.len()]; n]; geometry.sites.len()];
        for (i, &s) in geometry.sites.iter().enumerate() {
            for (k, &e) in geometry.sources.iter().enumerate() {
                for (t, v) in compute_transport(wind, e, s)?.into_iter().enumerate() {
                    values[i][t][k] = v;
                }
            }
        }
        Ok(Self {
            sites: geometry.sites.clone(),
            n_periods: n,
            values,
            missing: wind.periods().iter().map(WindPeriod::missing_hours).collect(),
        })
    }

    /// Columns `site_id,s1,s2,t,x1..xK,missing_hours`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AppError> {
        let mut wr = csv::Writer::from_writer(w);
        let k = self.values.first().and_then(|v| v.first()).map_or(0, Vec::len);
        let mut head = vec!["site_id".to_string(), "s1".into(), "s2".into(), "t".into()];
        head.extend((1..=k).map(|j| format!("x{j}")));
        head.push("missing_hours".into());
        wr.write_record(&head)?;
        for (i, s) in self.sites.iter().enumerate() {
            for t in 0..self.n_periods {
                let mut rec = vec![i.to_string(), fmt_f64(s[0]), fmt_f64(s[1]), t.to_string()];
                rec.extend(self.values[i][t].iter().map(|&v| fmt_f64(v)));
                rec.push(self.missing[t].to_string());
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(w: [f64; 2]) -> WindSeries {
        let start = parse_timestamp("2021-03-01T00:00:00").unwrap();
        WindSeries::new(vec![WindPeriod {
            start,
            hours: vec![Some(w); HOURS_PER_PERIOD],
        }])
        .unwrap()
    }

    #[test]
    fn hand_summed_examples() {
        let (e, s) = ([10.0, 0.0], [0.0, 0.0]);
        assert_eq!(compute_transport(&constant([1.0, 0.0]), e, s).unwrap(), vec![336.0]);
        assert_eq!(compute_transport(&constant([-1.0, 0.0]), e, s).unwrap(), vec![0.0]);
        assert_eq!(compute_transport(&constant([0.0, 1.0]), e, s).unwrap(), vec![0.0]);
        assert!(matches!(compute_transport(&constant([1.0, 0.0]), s, s), Err(AppError::Geometry(_))));
    }

    #[test]
    fn meteorological_direction() {
        let t = parse_timestamp("2021-03-01 00:00:00").unwrap();
        let o = WindObservation {
            timestamp: t,
            wind_speed_mps: 2.0,
            wind_dir_deg_from: 270.0,
        };
        let v = o.vector();
        assert!((v[0] + 2.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        // a westerly carries air from a source to the west onto the site
        let w = WindSeries::from_observations(&[o], &[t]).unwrap();
        assert_eq!(compute_transport(&w, [-10.0, 0.0], [0.0, 0.0]).unwrap(), vec![2.0]);
        assert_eq!(compute_transport(&w, [10.0, 0.0], [0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn binning_flags_missing_hours() {
        let start = parse_timestamp("2021-03-01T00:00:00").unwrap();
        let obs: Vec<_> = (0..HOURS_PER_PERIOD as i64)
            .filter(|h| h % 7 != 0)
            .map(|h| WindObservation {
                timestamp: start + TimeDelta::minutes(60 * h + 5),
                wind_speed_mps: 1.0,
                wind_dir_deg_from: 0.0,
            })
            .collect();
        let w = WindSeries::from_observations(&obs, &[start]).unwrap();
        assert_eq!(w.periods()[0].missing_hours(), 48);
        // a northerly reaches a site south of the source
        assert_eq!(compute_transport(&w, [0.0, 5.0], [0.0, 0.0]).unwrap(), vec![288.0]);
        assert_eq!(compute_transport(&w, [0.0, -5.0], [0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn wind_csv_round_trip() {
        let t = parse_timestamp("2021-03-01T05:00:00").unwrap();
        let obs = vec![WindObservation {
            timestamp: t,
            wind_speed_mps: 3.25,
            wind_dir_deg_from: 45.0,
        }];
        let mut buf = Vec::new();
        write_wind_csv(&obs, &mut buf).unwrap();
        assert_eq!(read_wind_csv(buf.as_slice()).unwrap(), obs);
    }

    proptest! {
        #[test]
        fn rotation_invariant(angle in 0.0..std::f64::consts::TAU, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let start = parse_timestamp("2021-03-01T00:00:00").unwrap();
            let hours: Vec<_> = (0..HOURS_PER_PERIOD)
                .map(|_| Some([rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]))
                .collect();
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
            let w = WindSeries::new(vec![WindPeriod { start, hours: hours.clone() }]).unwrap();
            let wr = WindSeries::new(vec![WindPeriod { start, hours: hours.iter().map(|h| h.map(rot)).collect() }]).unwrap();
            let (e, site) = ([120.0, -40.0], [3.0, 7.0]);
            let a = compute_transport(&w, e, site).unwrap()[0];
            let b = compute_transport(&wr, rot(e), rot(site)).unwrap()[0];
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }

        #[test]
        fn shrinking_wind_never_increases(f in 0.0..1.0f64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let start = parse_timestamp("2021-03-01T00:00:00").unwrap();
            let hours: Vec<[f64; 2]> = (0..HOURS_PER_PERIOD)
                .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
                .collect();
            let mk = |k: f64| WindSeries::new(vec![WindPeriod { start, hours: hours.iter().map(|h| Some([k * h[0], k * h[1]])).collect() }]).unwrap();
            let a = compute_transport(&mk(1.0), [1.0, 2.0], [0.0, 0.0]).unwrap()[0];
            let b = compute_transport(&mk(f), [1.0, 2.0], [0.0, 0.0]).unwrap()[0];
            prop_assert!(b >= 0.0 && b <= a + 1e-12);
        }
    }
}
