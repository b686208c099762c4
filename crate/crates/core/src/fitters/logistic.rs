use nalgebra::{DMatrix, DVector};

use super::linear::gram_cholesky;
use crate::error::{Error, Result};
use crate::stochastic::spd_inverse;

pub const MAX_ITER: usize = 100;
pub const SCORE_TOL: f64 = 1e-8;
pub const LOGLIK_REL_TOL: f64 = 1e-10;
/// Coefficient magnitude treated as divergence.
pub const SEPARATION_BOUND: f64 = 30.0;

/// Maximum-likelihood fit of a generalized linear model.
#[derive(Debug, Clone)]
pub struct GlmFit {
    /// For proportional-odds fits the first `thresholds` entries are the
    /// cutpoints, followed by the slopes.
    pub beta_hat: DVector<f64>,
    /// Inverse observed information.
    pub cov_hat: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub thresholds: usize,
}

impl GlmFit {
    pub fn cutpoints(&self) -> &[f64] {
        &self.beta_hat.as_slice()[..self.thresholds]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.beta_hat.as_slice()[self.thresholds..]
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn log1pexp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter().zip(y).map(|(&e, &yi)| yi * e - log1pexp(e)).sum()
}

/// Logistic regression by iteratively reweighted least squares with step
/// halving, so the log-likelihood never decreases.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64]) -> Result<GlmFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidSpec("response length does not match design".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidSpec("logistic response must be 0/1".into()));
    }
    gram_cholesky(&(x.transpose() * x))?;
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::PerfectSeparation);
    }

    let mut beta = DVector::zeros(p);
    let mut ll = loglik(x, y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::zeros(p, p);
    while iterations < MAX_ITER {
        iterations += 1;
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let resid = DVector::from_iterator(n, y.iter().zip(&mu).map(|(&yi, &m)| yi - m));
        let score = x.transpose() * resid;
        let wx = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * mu[i] * (1.0 - mu[i]));
        info = x.transpose() * wx;
        if score.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or(Error::PerfectSeparation)?
            .solve(&score);
        let mut t = 1.0;
        let (new_beta, new_ll) = loop {
            let cand = &beta + &step * t;
            let cand_ll = loglik(x, y, &cand);
            if cand_ll >= ll || t < 1e-10 {
                break (cand, cand_ll);
            }
            t *= 0.5;
        };
        debug_assert!(new_ll >= ll - 1e-9 * ll.abs(), "log-likelihood decreased");
        let rel = (new_ll - ll).abs() / (ll.abs() + 1e-300);
        beta = new_beta;
        ll = new_ll;
        if beta.amax() > SEPARATION_BOUND {
            return Err(Error::PerfectSeparation);
        }
        if rel < LOGLIK_REL_TOL {
            let mu: Vec<f64> = (x * &beta).iter().map(|&e| expit(e)).collect();
            let wx = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * mu[i] * (1.0 - mu[i]));
            info = x.transpose() * wx;
            converged = true;
            break;
        }
    }
    let cov_hat = spd_inverse(&info, "logistic information").map_err(|_| Error::PerfectSeparation)?;
    Ok(GlmFit {
        beta_hat: beta,
        cov_hat,
        converged,
        iterations,
        loglik: ll,
        thresholds: 0,
    })
}
