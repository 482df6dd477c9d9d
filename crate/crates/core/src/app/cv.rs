use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AppError;
use crate::inference::{fmt_f64, mcmc_fit, predictive_densities, Dataset, FitConfig};
use crate::scoring::{log_score, MeanSe};

/// Seeded assignment of rows to `folds` groups of near-equal size.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>, AppError> {
    if folds < 2 || n < folds {
        return Err(AppError::Folds { n, folds });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (k, &r) in idx.iter().enumerate() {
        out[r] = k % folds;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub in_sample: MeanSe,
    pub out_of_sample: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldScore>,
    /// Mean and standard error of the per-fold means.
    pub in_sample: MeanSe,
    pub out_of_sample: MeanSe,
}

impl CvReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AppError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["fold", "in_mean", "in_se", "out_mean", "out_se"])?;
        for f in &self.folds {
            wr.write_record([
                f.fold.to_string(),
                fmt_f64(f.in_sample.mean),
                fmt_f64(f.in_sample.se),
                fmt_f64(f.out_of_sample.mean),
                fmt_f64(f.out_of_sample.se),
            ])?;
        }
        wr.write_record([
            "all".to_string(),
            fmt_f64(self.in_sample.mean),
            fmt_f64(self.in_sample.se),
            fmt_f64(self.out_of_sample.mean),
            fmt_f64(self.out_of_sample.se),
        ])?;
        wr.flush()?;
        Ok(())
    }
}

fn score_fold(data: &Dataset, assignment: &[usize], k: usize, config: &FitConfig) -> Result<FoldScore, AppError> {
    let train = data.select(|r| assignment[r] != k);
    let test = data.select(|r| assignment[r] == k);
    let covered = train.rows_by_site();
    for (s, rows) in covered.iter().enumerate() {
        if rows.is_empty() {
            log::warn!("fold {k}: site {s} has no training rows, its effects follow the prior");
        }
    }
    let samples = mcmc_fit(&train, config)?;
    let models = samples.models()?;
    Ok(FoldScore {
        fold: k,
        in_sample: log_score(&predictive_densities(&models, &train)?)?,
        out_of_sample: log_score(&predictive_densities(&models, &test)?)?,
    })
}

/// K-fold cross-validated log scores. Folds are fitted on separate threads.
pub fn cross_validate(data: &Dataset, folds: usize, seed: u64, config: &FitConfig) -> Result<CvReport, AppError> {
    let assignment = assign_folds(data.len(), folds, seed)?;
    let results: Vec<Result<FoldScore, AppError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..folds)
            .map(|k| {
                let assignment = &assignment;
                scope.spawn(move || score_fold(data, assignment, k, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ins: Vec<f64> = folds.iter().map(|f| f.in_sample.mean).collect();
    let outs: Vec<f64> = folds.iter().map(|f| f.out_of_sample.mean).collect();
    Ok(CvReport {
        in_sample: MeanSe::of(&ins)?,
        out_of_sample: MeanSe::of(&outs)?,
        folds,
    })
}
