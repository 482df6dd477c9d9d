use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Target acceptance rate for blocks of dimension > 1.
pub const TARGET_MULTI: f64 = 0.25;
/// Target acceptance rate for scalar blocks.
pub const TARGET_SCALAR: f64 = 0.44;

/// Random-walk proposal whose scale follows a Robbins–Monro recursion on
/// the acceptance rate and whose shape follows the empirical covariance of
/// the chain, both frozen once adaptation stops.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    log_scale: f64,
    target: f64,
    factor: DMatrix<f64>,
    empirical: bool,
    /// History length before the empirical covariance takes over.
    min_history: usize,
    steps: usize,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    adapting: bool,
    proposed: usize,
    accepted: usize,
}

impl AdaptiveProposal {
    /// `init_sd` gives the starting per-coordinate step sizes.
    pub fn new(init_sd: &[f64]) -> Self {
        let dim = init_sd.len();
        Self {
            dim,
            log_scale: 0.0,
            target: if dim > 1 { TARGET_MULTI } else { TARGET_SCALAR },
            factor: DMatrix::from_diagonal(&DVector::from_column_slice(init_sd)),
            empirical: false,
            min_history: 2 * dim + 20,
            steps: 0,
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            adapting: true,
            proposed: 0,
            accepted: 0,
        }
    }

    /// Start from a full proposal covariance (already scaled for the
    /// target acceptance rate). Since the starting shape is informed, the
    /// empirical covariance only takes over after `50 d` recorded states.
    /// `None` when `cov` is not positive definite.
    pub fn with_covariance(cov: &DMatrix<f64>) -> Option<Self> {
        let factor = nalgebra::Cholesky::new(cov.clone())?.l();
        let dim = cov.nrows();
        let mut out = Self::new(&vec![1.0; dim]);
        out.factor = factor;
        out.empirical = true;
        out.min_history = 50 * dim;
        Some(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `current + exp(log_scale) L z` written into `out`.
    pub fn propose<R: Rng>(&self, current: &[f64], rng: &mut R, out: &mut Vec<f64>) {
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.factor * z;
        let scale = self.log_scale.exp();
        out.clear();
        out.extend(current.iter().zip(step.iter()).map(|(c, s)| c + scale * s));
    }

    /// Record the outcome of one proposal and the resulting state.
    pub fn record(&mut self, accepted: bool, state: &[f64]) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if !self.adapting {
            return;
        }
        self.steps += 1;
        let gain = (1.0 + self.steps as f64 / 10.0).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_scale += gain * (a - self.target);

        // Welford update of the state mean and scatter
        self.n += 1;
        let x = DVector::from_column_slice(state);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();

        if self.n >= self.min_history && self.n % 25 == 0 {
            self.refresh_factor();
        }
    }

    fn refresh_factor(&mut self) {
        let d = self.dim as f64;
        let cov = &self.m2 / (self.n - 1) as f64;
        let mut c = cov * (2.38 * 2.38 / d);
        let avg = (0..self.dim).map(|i| c[(i, i)]).sum::<f64>() / d;
        for i in 0..self.dim {
            c[(i, i)] += 1e-6 * avg.max(1e-12) + 1e-12;
        }
        if let Some(ch) = nalgebra::Cholesky::new(c) {
            if !self.empirical {
                // 2.38²/d times the target covariance is already the right size
                self.log_scale = 0.0;
                self.empirical = true;
            }
            self.factor = ch.l();
        }
    }

    /// Forget the covariance history (used midway through burn-in, when the
    /// early transient has passed).
    pub fn reset_history(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    /// Stop adapting and reset the acceptance counters.
    pub fn freeze(&mut self) {
        self.adapting = false;
        self.proposed = 0;
        self.accepted = 0;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}
