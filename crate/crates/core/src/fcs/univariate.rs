//! Single-level univariate imputers and the unit view shared by the
//! cluster-level engines.

use nalgebra::{DMatrix, DVector};

use super::plan::{Cells, Grouping, Target};
use super::SeparationPolicy;
use crate::error::{Error, Result};
use crate::fitters::{expit, fit_linear_and_draw, fit_logistic, fit_polr, independent_columns, polr_probs};
use crate::stochastic::{mvn_draw_chol, spd_cholesky, RngStream};

/// Knobs shared by every visit.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ctx {
    pub donors: usize,
    pub on_separation: SeparationPolicy,
}

/// Targets for one imputation step: either rows, or units whose rows share
/// a value.
pub(crate) struct UnitView {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub obs: Vec<usize>,
    pub mis: Vec<usize>,
    /// Originally missing rows of each unit.
    fill: Vec<Vec<usize>>,
}

impl UnitView {
    pub fn new(t: &Target, x: DMatrix<f64>, cur: &Cells, units: Option<&Grouping>) -> Self {
        let col = &cur[t.col];
        match units {
            None => UnitView {
                x,
                y: col.clone(),
                obs: t.observed.clone(),
                mis: t.missing.clone(),
                fill: (0..col.len()).map(|r| vec![r]).collect(),
            },
            Some(g) => {
                let mut missing = vec![false; col.len()];
                for &r in &t.missing {
                    missing[r] = true;
                }
                let mut y = vec![f64::NAN; g.len()];
                let (mut obs, mut mis) = (Vec::new(), Vec::new());
                let mut fill = Vec::with_capacity(g.len());
                for (u, rows) in g.rows.iter().enumerate() {
                    match rows.iter().find(|&&r| !missing[r]) {
                        Some(&r) => {
                            y[u] = col[r];
                            obs.push(u);
                        }
                        None => mis.push(u),
                    }
                    fill.push(rows.iter().copied().filter(|&r| missing[r]).collect());
                }
                UnitView {
                    x: g.aggregate(&x),
                    y,
                    obs,
                    mis,
                    fill,
                }
            }
        }
    }

    /// Observed design (independent columns only), observed response and the
    /// matching design for the units to impute.
    pub fn split(&self) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let xo = self.x.select_rows(&self.obs);
        let kept = independent_columns(&xo);
        let xo = xo.select_columns(&kept);
        let xm = self.x.select_rows(&self.mis).select_columns(&kept);
        let yo = DVector::from_iterator(self.obs.len(), self.obs.iter().map(|&u| self.y[u]));
        (xo, yo, xm)
    }

    /// Row fills for imputed unit values (in `mis` order); observed units
    /// with missing rows get their observed value.
    pub fn fills(&self, imputed: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for &u in &self.obs {
            out.extend(self.fill[u].iter().map(|&r| (r, self.y[u])));
        }
        for (&u, &v) in self.mis.iter().zip(imputed) {
            out.extend(self.fill[u].iter().map(|&r| (r, v)));
        }
        out
    }
}

pub(crate) fn norm(rng: &mut RngStream, xo: &DMatrix<f64>, yo: &DVector<f64>, xm: &DMatrix<f64>) -> Result<Vec<f64>> {
    let dr = fit_linear_and_draw(rng, xo, yo)?;
    let sd = dr.sigma2_draw.sqrt();
    let mean = xm * &dr.beta_draw;
    Ok(mean.iter().map(|&m| m + sd * rng.std_normal()).collect())
}

/// Draw from the normal approximation to the posterior of a GLM fit.
fn draw_coefficients(rng: &mut RngStream, hat: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = spd_cholesky(cov, "coefficient covariance")?.l();
    Ok(mvn_draw_chol(rng, hat, &l))
}

pub(crate) fn logreg(rng: &mut RngStream, xo: &DMatrix<f64>, yo: &DVector<f64>, xm: &DMatrix<f64>) -> Result<Vec<f64>> {
    let fit = fit_logistic(xo, yo.as_slice())?;
    let beta = draw_coefficients(rng, &fit.beta_hat, &fit.cov_hat)?;
    Ok((xm * beta)
        .iter()
        .map(|&e| f64::from(u8::from(rng.bernoulli(expit(e)))))
        .collect())
}

/// `xo`/`xm` carry an intercept in column 0, which the cutpoints replace.
pub(crate) fn polr(
    rng: &mut RngStream,
    xo: &DMatrix<f64>,
    yo: &DVector<f64>,
    xm: &DMatrix<f64>,
    n_levels: usize,
) -> Result<Vec<f64>> {
    let p = xo.ncols();
    let xo = xo.columns(1, p - 1).into_owned();
    let xm = xm.columns(1, p - 1).into_owned();
    let y: Vec<usize> = yo.iter().map(|&v| v as usize).collect();
    let fit = fit_polr(&xo, &y, n_levels)?;
    let params = draw_coefficients(rng, &fit.beta_hat, &fit.cov_hat)?;
    let nt = fit.thresholds;
    let mut cuts: Vec<f64> = params.as_slice()[..nt].to_vec();
    cuts.sort_by(f64::total_cmp);
    let slopes = params.rows(nt, p - 1);
    Ok((0..xm.nrows())
        .map(|i| {
            let eta = (xm.row(i) * slopes)[(0, 0)];
            rng.categorical(&polr_probs(&cuts, eta)) as f64
        })
        .collect())
}

pub(crate) fn pmm(
    rng: &mut RngStream,
    xo: &DMatrix<f64>,
    yo: &DVector<f64>,
    xm: &DMatrix<f64>,
    donors: usize,
) -> Result<Vec<f64>> {
    let dr = fit_linear_and_draw(rng, xo, yo)?;
    let donor_pred: Vec<f64> = (xo * &dr.beta_hat).iter().copied().collect();
    let target_pred: Vec<f64> = (xm * &dr.beta_draw).iter().copied().collect();
    pmm_match(rng, &donor_pred, yo.as_slice(), &target_pred, donors)
}

/// For each target prediction, copy the value of one of the `k` donors with
/// the closest predictions, chosen uniformly. Fewer than `k` donors shrinks
/// `k` with a warning.
pub(crate) fn pmm_match(
    rng: &mut RngStream,
    donor_pred: &[f64],
    donor_vals: &[f64],
    target_pred: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    let n = donor_pred.len();
    if n == 0 {
        return Err(Error::InvalidSpec("predictive mean matching needs at least one donor".into()));
    }
    let k = if n < k {
        log::warn!("only {n} donors available; using {n} instead of {k}");
        n
    } else {
        k.max(1)
    };
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    Ok(target_pred
        .iter()
        .map(|&t| {
            dist.clear();
            dist.extend(donor_pred.iter().enumerate().map(|(i, &d)| ((d - t).abs(), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < n {
                dist.select_nth_unstable_by(k - 1, cmp);
            }
            let near = &mut dist[..k];
            near.sort_by(cmp);
            donor_vals[near[rng.index(k)].1]
        })
        .collect())
}

/// Fit-or-fallback wrapper for the discrete GLM imputers.
pub(crate) fn with_fallback(
    rng: &mut RngStream,
    ctx: Ctx,
    name: &str,
    xo: &DMatrix<f64>,
    yo: &DVector<f64>,
    xm: &DMatrix<f64>,
    fit: impl FnOnce(&mut RngStream) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    match fit(rng) {
        Err(e @ (Error::PerfectSeparation | Error::NonMonotoneCutpoints))
            if ctx.on_separation == SeparationPolicy::Pmm =>
        {
            log::warn!("`{name}`: {e}; falling back to predictive mean matching");
            pmm(rng, xo, yo, xm, ctx.donors)
        }
        r => r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_target_imputes_constant() {
        let n = 20;
        let xo = DMatrix::from_element(n, 1, 1.0);
        let yo = DVector::from_element(n, 3.0);
        let xm = DMatrix::from_element(5, 1, 1.0);
        let mut rng = RngStream::new(1, 0);
        let v = norm(&mut rng, &xo, &yo, &xm).unwrap();
        assert!(v.iter().all(|x| (x - 3.0).abs() < 1e-3), "{v:?}");
    }

    #[test]
    fn pmm_picks_nearest_donors() {
        let donors = [0.0, 1.0, 2.0, 3.0, 10.0, 11.0];
        let vals = [100.0, 101.0, 102.0, 103.0, 110.0, 111.0];
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let v = pmm_match(&mut rng, &donors, &vals, &[10.4], 2).unwrap();
            assert!(v[0] == 110.0 || v[0] == 111.0);
        }
    }

    #[test]
    fn pmm_shrinks_k() {
        let mut rng = RngStream::new(3, 0);
        let v = pmm_match(&mut rng, &[0.0, 1.0], &[5.0, 6.0], &[0.2, 0.9], 5).unwrap();
        assert!(v.iter().all(|x| *x == 5.0 || *x == 6.0));
    }

    #[test]
    fn separated_logreg_falls_back_to_pmm() {
        let n = 20;
        let xo = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let yo = DVector::from_fn(n, |i, _| f64::from(u8::from(i >= 10)));
        let xm = DMatrix::from_fn(3, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 9.0 });
        let mut rng = RngStream::new(4, 0);
        let ctx = Ctx {
            donors: 5,
            on_separation: SeparationPolicy::Pmm,
        };
        let v = with_fallback(&mut rng, ctx, "y", &xo, &yo, &xm, |r| logreg(r, &xo, &yo, &xm)).unwrap();
        assert!(v.iter().all(|x| *x == 0.0 || *x == 1.0));
        let abort = Ctx {
            on_separation: SeparationPolicy::Abort,
            ..ctx
        };
        assert!(matches!(
            with_fallback(&mut rng, abort, "y", &xo, &yo, &xm, |r| logreg(r, &xo, &yo, &xm)),
            Err(Error::PerfectSeparation)
        ));
    }

    proptest! {
        #[test]
        fn pmm_outputs_donor_values(
            vals in proptest::collection::vec(-50i32..50, 8..40),
            targets in proptest::collection::vec(-3.0f64..3.0, 1..10),
            seed in 0u64..500,
        ) {
            let n = vals.len();
            let xo = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
            let yo = DVector::from_iterator(n, vals.iter().map(|&v| f64::from(v)));
            let xm = DMatrix::from_fn(targets.len(), 2, |i, j| if j == 0 { 1.0 } else { targets[i] });
            let mut rng = RngStream::new(seed, 0);
            let out = pmm(&mut rng, &xo, &yo, &xm, 5).unwrap();
            for v in out {
                prop_assert!(yo.iter().any(|&o| o == v));
            }
        }
    }
}
