use std::io::{Read, Write};

use thiserror::Error;

use crate::covariance::Coord;

/// Fold label of training rows in the train/validation split.
pub const TRAIN_FOLD: usize = 0;
/// Fold label of held-out rows in the train/validation split.
pub const VALIDATION_FOLD: usize = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: predictor x{index} = {value} is negative or not finite")]
    BadPredictor { row: usize, index: usize, value: f64 },

    #[error("row {row}: response {value} is not finite")]
    BadResponse { row: usize, value: f64 },

    #[error("row {row}: site index {site} out of range ({n_sites} sites)")]
    BadSite { row: usize, site: usize, n_sites: usize },

    #[error("site {site} has inconsistent coordinates across rows")]
    InconsistentSite { site: usize },

    #[error("column length mismatch: {0}")]
    Shape(String),

    #[error("missing column `{0}` in dataset CSV")]
    MissingColumn(String),

    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },

    #[error("dataset is empty")]
    Empty,

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Observations `y_t(s_i)` with predictors `x_{p,t}(s_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sites: Vec<Coord>,
    n_predictors: usize,
    site: Vec<usize>,
    time: Vec<usize>,
    /// Row-major `n × P`.
    x: Vec<f64>,
    y: Vec<f64>,
    fold: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(
        sites: Vec<Coord>,
        n_predictors: usize,
        site: Vec<usize>,
        time: Vec<usize>,
        x: Vec<f64>,
        y: Vec<f64>,
        fold: Vec<Option<usize>>,
    ) -> Result<Self, DataError> {
        let n = y.len();
        if site.len() != n || time.len() != n || fold.len() != n || x.len() != n * n_predictors {
            return Err(DataError::Shape(format!(
                "{n} responses, {} sites, {} times, {} folds, {} predictor values for P = {n_predictors}",
                site.len(),
                time.len(),
                fold.len(),
                x.len()
            )));
        }
        let d = Self {
            sites,
            n_predictors,
            site,
            time,
            x,
            y,
            fold,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<(), DataError> {
        for row in 0..self.len() {
            if self.site[row] >= self.sites.len() {
                return Err(DataError::BadSite {
                    row,
                    site: self.site[row],
                    n_sites: self.sites.len(),
                });
            }
            if !self.y[row].is_finite() {
                return Err(DataError::BadResponse {
                    row,
                    value: self.y[row],
                });
            }
            for (i, &v) in self.x(row).iter().enumerate() {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(DataError::BadPredictor {
                        row,
                        index: i + 1,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.n_predictors
    }

    pub fn sites(&self) -> &[Coord] {
        &self.sites
    }

    pub fn site(&self, row: usize) -> usize {
        self.site[row]
    }

    pub fn time(&self, row: usize) -> usize {
        self.time[row]
    }

    pub fn x(&self, row: usize) -> &[f64] {
        &self.x[row * self.n_predictors..(row + 1) * self.n_predictors]
    }

    pub fn y(&self, row: usize) -> f64 {
        self.y[row]
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    pub fn fold(&self, row: usize) -> Option<usize> {
        self.fold[row]
    }

    pub fn set_folds(&mut self, fold: Vec<Option<usize>>) -> Result<(), DataError> {
        if fold.len() != self.len() {
            return Err(DataError::Shape("fold labels".into()));
        }
        self.fold = fold;
        Ok(())
    }

    /// Replace predictor column `p` (1-based).
    pub fn set_predictor(&mut self, p: usize, values: &[f64]) -> Result<(), DataError> {
        if values.len() != self.len() || p == 0 || p > self.n_predictors {
            return Err(DataError::Shape(format!("predictor column {p}")));
        }
        for (row, &v) in values.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DataError::BadPredictor {
                    row,
                    index: p,
                    value: v,
                });
            }
            self.x[row * self.n_predictors + p - 1] = v;
        }
        Ok(())
    }

    /// Predictor column `p` (1-based).
    pub fn predictor(&self, p: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.x(r)[p - 1]).collect()
    }

    /// Rows selected by `keep`, keeping every site.
    pub fn select(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep(r)).collect();
        Dataset {
            sites: self.sites.clone(),
            n_predictors: self.n_predictors,
            site: rows.iter().map(|&r| self.site[r]).collect(),
            time: rows.iter().map(|&r| self.time[r]).collect(),
            x: rows.iter().flat_map(|&r| self.x(r).to_vec()).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            fold: rows.iter().map(|&r| self.fold[r]).collect(),
        }
    }

    /// Rows not labelled as validation.
    pub fn training(&self) -> Dataset {
        self.select(|r| self.fold[r] != Some(VALIDATION_FOLD))
    }

    pub fn validation(&self) -> Dataset {
        self.select(|r| self.fold[r] == Some(VALIDATION_FOLD))
    }

    /// Row indices grouped by site.
    pub fn rows_by_site(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_sites()];
        for r in 0..self.len() {
            out[self.site[r]].push(r);
        }
        out
    }

    /// Write as CSV with columns `site_id, s1, s2, t, x1..xP, y, fold`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["site_id".to_string(), "s1".into(), "s2".into(), "t".into()];
        header.extend((1..=self.n_predictors).map(|p| format!("x{p}")));
        header.push("y".into());
        header.push("fold".into());
        wr.write_record(&header)?;
        for r in 0..self.len() {
            let s = self.sites[self.site[r]];
            let mut rec = vec![
                self.site[r].to_string(),
                fmt_f64(s[0]),
                fmt_f64(s[1]),
                self.time[r].to_string(),
            ];
            rec.extend(self.x(r).iter().map(|&v| fmt_f64(v)));
            rec.push(fmt_f64(self.y[r]));
            rec.push(self.fold[r].map(|f| f.to_string()).unwrap_or_default());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read the CSV layout written by [`write_csv`](Self::write_csv). The
    /// `fold` column is optional, and site ids must be `0..S`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, DataError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let (c_site, c_s1, c_s2, c_t, c_y) = (col("site_id")?, col("s1")?, col("s2")?, col("t")?, col("y")?);
        let c_fold = headers.iter().position(|h| h == "fold");
        let mut x_cols = Vec::new();
        while let Some(c) = headers.iter().position(|h| h == format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }

        let mut sites: Vec<Option<Coord>> = Vec::new();
        let (mut site, mut time, mut x, mut y, mut fold) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let get = |c: usize| rec.get(c).unwrap_or("");
            let sid: usize = parse(get(c_site), line, "site_id")?;
            let coord = [parse(get(c_s1), line, "s1")?, parse(get(c_s2), line, "s2")?];
            if sid >= sites.len() {
                sites.resize(sid + 1, None);
            }
            match sites[sid] {
                None => sites[sid] = Some(coord),
                Some(c) if c != coord => return Err(DataError::InconsistentSite { site: sid }),
                _ => {}
            }
            site.push(sid);
            time.push(parse(get(c_t), line, "t")?);
            for (p, &c) in x_cols.iter().enumerate() {
                x.push(parse(get(c), line, &format!("x{}", p + 1))?);
            }
            y.push(parse(get(c_y), line, "y")?);
            fold.push(match c_fold.map(get) {
                None | Some("") => None,
                Some(v) => Some(parse(v, line, "fold")?),
            });
        }
        if y.is_empty() {
            return Err(DataError::Empty);
        }
        // sites without rows keep a placeholder position at the origin
        let sites = sites.into_iter().map(|s| s.unwrap_or([0.0, 0.0])).collect();
        Dataset::new(sites, x_cols.len(), site, time, x, y, fold)
    }
}

fn parse<T: std::str::FromStr>(v: &str, line: usize, column: &str) -> Result<T, DataError> {
    v.parse().map_err(|_| DataError::Parse {
        line,
        column: column.to_string(),
        value: v.to_string(),
    })
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
