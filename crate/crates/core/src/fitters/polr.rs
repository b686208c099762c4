//! Proportional-odds (cumulative logit) regression:
//! `P(Y ≤ k | x) = expit(θ_k − xᵀβ)` for `k = 0..K−2`.
//!
//! The design must not contain an intercept column; the cutpoints play that
//! role.

use nalgebra::{DMatrix, DVector};

use super::linear::gram_cholesky;
use super::logistic::{expit, GlmFit, LOGLIK_REL_TOL, MAX_ITER, SCORE_TOL, SEPARATION_BOUND};
use crate::error::{Error, Result};
use crate::stochastic::spd_inverse;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `F(u)`, `f(u) = F(1 − F)` and `f'(u) = f(1 − 2F)` at a cutpoint distance.
/// Infinite arguments give the limits.
fn cdf_terms(u: f64) -> (f64, f64, f64) {
    if u == f64::INFINITY {
        return (1.0, 0.0, 0.0);
    }
    if u == f64::NEG_INFINITY {
        return (0.0, 0.0, 0.0);
    }
    let f = expit(u);
    let d = f * (1.0 - f);
    (f, d, d * (1.0 - 2.0 * f))
}

fn cut(theta: &[f64], k: isize) -> f64 {
    if k < 0 {
        f64::NEG_INFINITY
    } else if k as usize >= theta.len() {
        f64::INFINITY
    } else {
        theta[k as usize]
    }
}

struct Eval {
    loglik: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn evaluate(x: &DMatrix<f64>, y: &[usize], params: &DVector<f64>, nt: usize, derivs: bool) -> Option<Eval> {
    let (n, p) = x.shape();
    let theta = &params.as_slice()[..nt];
    let beta = params.rows(nt, p);
    let dim = nt + p;
    let mut ll = 0.0;
    let mut grad = DVector::zeros(if derivs { dim } else { 0 });
    let mut hess = DMatrix::zeros(if derivs { dim } else { 0 }, if derivs { dim } else { 0 });
    for i in 0..n {
        let xi = x.row(i);
        let eta = (xi * beta)[(0, 0)];
        let k = y[i] as isize;
        let (fa_c, fa, dfa) = cdf_terms(cut(theta, k) - eta);
        let (fb_c, fb, dfb) = cdf_terms(cut(theta, k - 1) - eta);
        let prob = fa_c - fb_c;
        if !(prob > 0.0) {
            return None;
        }
        ll += prob.ln();
        if !derivs {
            continue;
        }
        let ia = (k as usize) < nt;
        let ib = k >= 1;
        let (ka, kb) = (k as usize, (k - 1).max(0) as usize);
        let dp = fa - fb;
        if ia {
            grad[ka] += fa / prob;
            hess[(ka, ka)] += dfa / prob - fa * fa / (prob * prob);
        }
        if ib {
            grad[kb] -= fb / prob;
            hess[(kb, kb)] += -dfb / prob - fb * fb / (prob * prob);
        }
        if ia && ib {
            let v = fa * fb / (prob * prob);
            hess[(ka, kb)] += v;
            hess[(kb, ka)] += v;
        }
        let hbb = (dfa - dfb) / prob - dp * dp / (prob * prob);
        let hab = -dfa / prob + fa * dp / (prob * prob);
        let hbb_t = dfb / prob - fb * dp / (prob * prob);
        for c in 0..p {
            let xc = xi[c];
            grad[nt + c] -= xc * dp / prob;
            if ia {
                hess[(ka, nt + c)] += xc * hab;
                hess[(nt + c, ka)] += xc * hab;
            }
            if ib {
                hess[(kb, nt + c)] += xc * hbb_t;
                hess[(nt + c, kb)] += xc * hbb_t;
            }
            for d in 0..=c {
                let v = xc * xi[d] * hbb;
                hess[(nt + c, nt + d)] += v;
                if d != c {
                    hess[(nt + d, nt + c)] += v;
                }
            }
        }
    }
    Some(Eval { loglik: ll, grad, hess })
}

fn monotone(params: &DVector<f64>, nt: usize) -> bool {
    (1..nt).all(|k| params[k] > params[k - 1])
}

/// Fit with `y` holding level indices `0..n_levels`.
pub fn fit_polr(x: &DMatrix<f64>, y: &[usize], n_levels: usize) -> Result<GlmFit> {
    let (n, p) = x.shape();
    if n_levels < 2 || y.len() != n {
        return Err(Error::InvalidSpec("ordinal fit needs at least 2 levels".into()));
    }
    let mut counts = vec![0usize; n_levels];
    for &v in y {
        if v >= n_levels {
            return Err(Error::InvalidSpec(format!("level {v} out of range")));
        }
        counts[v] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCategory(k));
    }
    if p > 0 {
        // Slopes are identified only against the cutpoints, so check the
        // design together with a constant column.
        let xc = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        gram_cholesky(&(xc.transpose() * &xc))?;
    }
    let nt = n_levels - 1;
    let mut params = DVector::zeros(nt + p);
    let mut cum = 0usize;
    for k in 0..nt {
        cum += counts[k];
        params[k] = logit(cum as f64 / n as f64);
    }
    let mut cur = evaluate(x, y, &params, nt, true).ok_or(Error::NonMonotoneCutpoints)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        if cur.grad.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        let neg_h = -&cur.hess;
        let step = neg_h
            .clone()
            .cholesky()
            .map(|c| c.solve(&cur.grad))
            .unwrap_or_else(|| cur.grad.clone() * 1e-2);
        let mut t = 1.0;
        let next = loop {
            let cand = &params + &step * t;
            if monotone(&cand, nt) {
                if let Some(e) = evaluate(x, y, &cand, nt, false) {
                    if e.loglik >= cur.loglik {
                        break Some(cand);
                    }
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                break None;
            }
        };
        let Some(cand) = next else {
            converged = true;
            break;
        };
        let new = evaluate(x, y, &cand, nt, true).ok_or(Error::NonMonotoneCutpoints)?;
        let rel = (new.loglik - cur.loglik).abs() / (cur.loglik.abs() + 1e-300);
        params = cand;
        cur = new;
        if params.rows(nt, p).amax() > SEPARATION_BOUND {
            return Err(Error::PerfectSeparation);
        }
        if rel < LOGLIK_REL_TOL {
            converged = true;
            break;
        }
    }
    if !monotone(&params, nt) {
        return Err(Error::NonMonotoneCutpoints);
    }
    let cov_hat = spd_inverse(&(-&cur.hess), "ordinal information").map_err(|_| Error::PerfectSeparation)?;
    Ok(GlmFit {
        beta_hat: params,
        cov_hat,
        converged,
        iterations,
        loglik: cur.loglik,
        thresholds: nt,
    })
}

/// Category probabilities at linear predictor `eta`.
pub fn polr_probs(cutpoints: &[f64], eta: f64) -> Vec<f64> {
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(cutpoints.len() + 1);
    for &c in cutpoints {
        let f = expit(c - eta);
        out.push((f - prev).max(0.0));
        prev = f;
    }
    out.push((1.0 - prev).max(0.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitters::fit_logistic;
    use crate::stochastic::RngStream;

    #[test]
    fn binary_reduces_to_logistic() {
        let mut rng = RngStream::new(4, 0);
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
        let y: Vec<usize> = xs
            .iter()
            .map(|&x| usize::from(rng.bernoulli(expit(0.3 + 0.8 * x))))
            .collect();
        let xp = DMatrix::from_fn(n, 1, |i, _| xs[i]);
        let polr = fit_polr(&xp, &y, 2).unwrap();
        let xl = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let yl: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let logi = fit_logistic(&xl, &yl).unwrap();
        assert!((polr.cutpoints()[0] + logi.beta_hat[0]).abs() < 1e-6);
        assert!((polr.slopes()[0] - logi.beta_hat[1]).abs() < 1e-6);
    }

    #[test]
    fn intercept_only_cutpoints() {
        let y: Vec<usize> = (0..100).map(|i| if i < 20 { 0 } else if i < 50 { 1 } else { 2 }).collect();
        let x = DMatrix::zeros(100, 0);
        let fit = fit_polr(&x, &y, 3).unwrap();
        assert!((fit.cutpoints()[0] - logit(0.2)).abs() < 1e-8);
        assert!((fit.cutpoints()[1] - logit(0.5)).abs() < 1e-8);
    }

    #[test]
    fn empty_category_rejected() {
        let x = DMatrix::zeros(4, 0);
        assert!(matches!(fit_polr(&x, &[0, 0, 2, 2], 3), Err(Error::EmptyCategory(1))));
    }

    #[test]
    fn recovers_slope_and_keeps_cutpoints_ordered() {
        let mut rng = RngStream::new(8, 0);
        let n = 100_000;
        let theta = [-1.0, 0.2, 1.5];
        let xs: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
        let y: Vec<usize> = xs
            .iter()
            .map(|&x| rng.categorical(&polr_probs(&theta, 0.7 * x)))
            .collect();
        let fit = fit_polr(&DMatrix::from_fn(n, 1, |i, _| xs[i]), &y, 4).unwrap();
        assert!(fit.converged);
        assert!((fit.slopes()[0] - 0.7).abs() < 0.05);
        assert!(fit.cutpoints().windows(2).all(|w| w[0] < w[1]));
    }
}
