use serde::{Deserialize, Serialize};

use super::AppError;
use crate::inference::Dataset;

/// Per-predictor min-max constants, kept so new data can be mapped the
/// same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(data: &Dataset) -> Result<Self, AppError> {
        let p = data.n_predictors();
        let (mut min, mut max) = (vec![f64::INFINITY; p], vec![f64::NEG_INFINITY; p]);
        for r in 0..data.len() {
            for (j, &v) in data.x(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..p {
            if !(max[j] > min[j]) {
                return Err(AppError::DegenerateScale { column: j + 1 });
            }
        }
        Ok(Self { min, max })
    }

    /// Map predictors to `(x − min)/(max − min)`. Values of new data may
    /// fall outside `[0, 1]`; negatives are clamped to zero to keep the
    /// predictors valid.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset, AppError> {
        self.map(data, |j, v| ((v - self.min[j]) / (self.max[j] - self.min[j])).max(0.0))
    }

    pub fn unapply(&self, data: &Dataset) -> Result<Dataset, AppError> {
        self.map(data, |j, v| self.min[j] + v * (self.max[j] - self.min[j]))
    }

    fn map(&self, data: &Dataset, f: impl Fn(usize, f64) -> f64) -> Result<Dataset, AppError> {
        if data.n_predictors() != self.min.len() {
            return Err(AppError::Schema(format!(
                "scaling has {} predictors, data has {}",
                self.min.len(),
                data.n_predictors()
            )));
        }
        let mut out = data.clone();
        for j in 0..self.min.len() {
            let col: Vec<f64> = data.predictor(j + 1).into_iter().map(|v| f(j, v)).collect();
            out.set_predictor(j + 1, &col)?;
        }
        Ok(out)
    }
}

/// Min-max scale every predictor to `[0, 1]`.
pub fn scale_predictors(data: &Dataset) -> Result<(Dataset, Scaling), AppError> {
    let s = Scaling::fit(data)?;
    Ok((s.apply(data)?, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(cols: &[&[f64]]) -> Dataset {
        let n = cols[0].len();
        let x: Vec<f64> = (0..n).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
        Dataset::new(vec![[0.0, 0.0]], cols.len(), vec![0; n], (0..n).collect(), x, vec![0.0; n], vec![None; n]).unwrap()
    }

    #[test]
    fn min_max_examples() {
        let d = data(&[&[2.0, 4.0, 6.0], &[0.0, 1.0, 0.25]]);
        let (s, sc) = scale_predictors(&d).unwrap();
        assert_eq!(s.predictor(1), vec![0.0, 0.5, 1.0]);
        assert_eq!(s.predictor(2), vec![0.0, 1.0, 0.25]);
        let back = sc.unapply(&s).unwrap();
        for j in 1..=2 {
            for (a, b) in back.predictor(j).iter().zip(d.predictor(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_column_rejected() {
        let d = data(&[&[1.0, 2.0], &[3.0, 3.0]]);
        assert!(matches!(scale_predictors(&d), Err(AppError::DegenerateScale { column: 2 })));
    }
}
