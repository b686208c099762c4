//! Two- and three-level univariate imputers.
//!
//! `pan` runs a Gibbs sampler for `y = xβ + zb_j + e`, `b_j ~ N(0, Ψ)`,
//! `e ~ N(0, σ²)` with a flat prior on β, `Ψ ~ IW(q, I)` and
//! `σ² ~ IW(1, 1)`, carrying its state between visits. The latent variant
//! fixes `σ² = 1` and works on a probit scale. `lmm` fits nested random
//! intercepts by REML and draws from the fitted model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::plan::{Cells, Grouping, Target};
use super::univariate::{pmm_match, UnitView};
use crate::error::Result;
use crate::fitters::{gram_cholesky, independent_columns, Criterion, LmmProblem, S2_FLOOR};
use crate::stochastic::{inv_wishart_draw, mvn_draw_chol, spd_cholesky, trunc_normal_draw, RngStream};

pub const FIRST_VISIT_SWEEPS: usize = 15;
pub const LATER_VISIT_SWEEPS: usize = 5;

#[derive(Debug, Clone)]
pub(crate) struct PanState {
    kept: Vec<usize>,
    beta: DVector<f64>,
    /// One row per cluster.
    b: DMatrix<f64>,
    psi: DMatrix<f64>,
    sigma2: f64,
    /// Latent values of the observed rows (probit mode).
    w: Vec<f64>,
    visits: usize,
}

/// Fixed per-visit quantities over the observed rows.
struct PanData {
    xo: DMatrix<f64>,
    zo: DMatrix<f64>,
    y: Vec<f64>,
    /// Observed-row positions per cluster.
    members: Vec<Vec<usize>>,
    ztz: Vec<DMatrix<f64>>,
    xtx_l: DMatrix<f64>,
}

/// Solve `L Lᵀ v = rhs`.
fn chol_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let tmp = l.solve_lower_triangular(rhs).expect("invertible factor");
    l.transpose().solve_upper_triangular(&tmp).expect("invertible factor")
}

impl PanData {
    fn new(t: &Target, g: &Grouping, x: &DMatrix<f64>, z: &DMatrix<f64>, cur: &Cells, kept: &[usize]) -> Result<Self> {
        let xo = x.select_rows(&t.observed).select_columns(kept);
        let zo = z.select_rows(&t.observed);
        let y = t.observed.iter().map(|&r| cur[t.col][r]).collect();
        let mut members = vec![Vec::new(); g.len()];
        for (i, &r) in t.observed.iter().enumerate() {
            members[g.of_row[r]].push(i);
        }
        let q = zo.ncols();
        let ztz = members
            .iter()
            .map(|m| {
                let mut s = DMatrix::zeros(q, q);
                for &i in m {
                    let zi = zo.row(i);
                    s += zi.transpose() * zi;
                }
                s
            })
            .collect();
        let xtx_l = gram_cholesky(&(xo.transpose() * &xo))?.l();
        Ok(PanData { xo, zo, y, members, ztz, xtx_l })
    }

    fn zb(&self, b: &DMatrix<f64>, i: usize, cluster: usize) -> f64 {
        self.zo.row(i).dot(&b.row(cluster))
    }
}

fn init_state(rng: &mut RngStream, d: &PanData, kept: Vec<usize>, latent: bool, j: usize) -> Result<PanState> {
    let q = d.zo.ncols();
    let w: Vec<f64> = if latent {
        d.y
            .iter()
            .map(|&v| {
                let (lo, hi) = if v > 0.5 { (0.0, f64::INFINITY) } else { (f64::NEG_INFINITY, 0.0) };
                trunc_normal_draw(rng, 0.0, 1.0, lo, hi)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let yv = DVector::from_column_slice(if latent { &w } else { &d.y });
    let beta = chol_solve(&d.xtx_l, &(d.xo.transpose() * &yv));
    let n = d.xo.nrows() as f64;
    let sigma2 = if latent {
        1.0
    } else {
        ((&yv - &d.xo * &beta).norm_squared() / n).max(S2_FLOOR)
    };
    Ok(PanState {
        kept,
        beta,
        b: DMatrix::zeros(j, q),
        psi: DMatrix::identity(q, q) * (0.1 * sigma2),
        sigma2,
        w,
        visits: 0,
    })
}

fn sweep(rng: &mut RngStream, d: &PanData, s: &mut PanState, of_obs: &[usize], latent: bool) -> Result<()> {
    let n = d.xo.nrows();
    let q = d.zo.ncols();
    let xb = &d.xo * &s.beta;
    if latent {
        for i in 0..n {
            let mean = xb[i] + d.zb(&s.b, i, of_obs[i]);
            let (lo, hi) = if d.y[i] > 0.5 { (0.0, f64::INFINITY) } else { (f64::NEG_INFINITY, 0.0) };
            s.w[i] = trunc_normal_draw(rng, mean, 1.0, lo, hi)?;
        }
    }
    let yv: &[f64] = if latent { &s.w } else { &d.y };

    // Random effects.
    let psi_inv = spd_cholesky(&s.psi, "random-effects covariance")?.inverse();
    for (j, m) in d.members.iter().enumerate() {
        let mut rhs = DVector::zeros(q);
        for &i in m {
            rhs += d.zo.row(i).transpose() * ((yv[i] - xb[i]) / s.sigma2);
        }
        let prec = &psi_inv + &d.ztz[j] / s.sigma2;
        let chol = spd_cholesky(&prec, "random-effects precision")?;
        let mean = chol.solve(&rhs);
        let dev = chol
            .l()
            .transpose()
            .solve_upper_triangular(&rng.std_normal_vector(q))
            .expect("triangular factor is invertible");
        s.b.set_row(j, &(mean + dev).transpose());
    }

    // Fixed effects.
    let r = DVector::from_fn(n, |i, _| yv[i] - d.zb(&s.b, i, of_obs[i]));
    let hat = chol_solve(&d.xtx_l, &(d.xo.transpose() * r));
    let dev = d
        .xtx_l
        .transpose()
        .solve_upper_triangular(&rng.std_normal_vector(hat.len()))
        .expect("invertible");
    s.beta = hat + dev * s.sigma2.sqrt();

    // Residual variance.
    if !latent {
        let xb = &d.xo * &s.beta;
        let rss: f64 = (0..n)
            .map(|i| (yv[i] - xb[i] - d.zb(&s.b, i, of_obs[i])).powi(2))
            .sum();
        s.sigma2 = ((1.0 + rss) / rng.chi_square(n as f64 + 1.0)).max(S2_FLOOR);
    }

    // Random-effects covariance.
    let mut scale = DMatrix::identity(q, q);
    for j in 0..s.b.nrows() {
        let bj = s.b.row(j);
        scale += bj.transpose() * bj;
    }
    s.psi = inv_wishart_draw(rng, &scale, (q + s.b.nrows()) as f64)?;
    Ok(())
}

/// One visit of the Gibbs imputer; returns `(row, value)` fills.
pub(crate) fn pan(
    rng: &mut RngStream,
    t: &Target,
    latent: bool,
    cur: &Cells,
    state: &mut Option<PanState>,
) -> Result<Vec<(usize, f64)>> {
    let g = t.cluster.as_ref().expect("two-level targets have a cluster");
    let x = t.design(cur);
    let z = t.random_design(cur);
    let kept = independent_columns(&x.select_rows(&t.observed));
    let data = PanData::new(t, g, &x, &z, cur, &kept)?;
    let fresh = match state {
        Some(s) => s.kept != kept,
        None => true,
    };
    if fresh {
        *state = Some(init_state(rng, &data, kept.clone(), latent, g.len())?);
    }
    let s = state.as_mut().expect("initialized");
    let of_obs: Vec<usize> = t.observed.iter().map(|&r| g.of_row[r]).collect();
    let sweeps = if s.visits == 0 { FIRST_VISIT_SWEEPS } else { LATER_VISIT_SWEEPS };
    for _ in 0..sweeps {
        sweep(rng, &data, s, &of_obs, latent)?;
    }
    s.visits += 1;

    let xk = x.select_columns(&kept);
    let sd = s.sigma2.sqrt();
    Ok(t.missing
        .iter()
        .map(|&r| {
            let mean = xk.row(r).dot(&s.beta.transpose()) + z.row(r).dot(&s.b.row(g.of_row[r]));
            let v = mean + sd * rng.std_normal();
            let out = if latent { f64::from(u8::from(v > 0.0)) } else { v };
            (r, out)
        })
        .collect())
}

/// Compact indices for labels, in ascending label order.
fn compact(labels: impl Iterator<Item = i64>) -> BTreeMap<i64, usize> {
    let mut map: BTreeMap<i64, usize> = labels.map(|l| (l, 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

/// Effects of a group label: fitted if the group has observed units,
/// otherwise one prior draw shared by all units of the group.
struct Effects<'a> {
    index: &'a BTreeMap<i64, usize>,
    fitted: &'a [f64],
    var: f64,
    prior: BTreeMap<i64, f64>,
}

impl Effects<'_> {
    fn get(&mut self, rng: &mut RngStream, label: i64) -> f64 {
        match self.index.get(&label) {
            Some(&i) => self.fitted[i],
            None => *self
                .prior
                .entry(label)
                .or_insert_with(|| self.var.sqrt() * rng.std_normal()),
        }
    }
}

/// REML-fitted nested random-intercept imputer (continuous or matching).
#[allow(clippy::too_many_arguments)]
pub(crate) fn lmm(
    rng: &mut RngStream,
    t: &Target,
    pmm: bool,
    units: Option<&Grouping>,
    inner: &[i64],
    outer: Option<&[i64]>,
    cur: &Cells,
    donors: usize,
) -> Result<Vec<(usize, f64)>> {
    let view = UnitView::new(t, t.design(cur), cur, units);
    if view.mis.is_empty() {
        return Ok(view.fills(&[]));
    }
    let (xo, yo, xm) = view.split();
    let inner_idx = compact(view.obs.iter().map(|&u| inner[u]));
    let rows_inner: Vec<usize> = view.obs.iter().map(|&u| inner_idx[&inner[u]]).collect();
    let (outer_idx, outer_of_inner) = match outer {
        Some(o) => {
            let oi = compact(view.obs.iter().map(|&u| o[u]));
            let mut per = vec![0; inner_idx.len()];
            for &u in &view.obs {
                per[inner_idx[&inner[u]]] = oi[&o[u]];
            }
            (oi, Some(per))
        }
        None => (BTreeMap::new(), None),
    };
    let problem = LmmProblem::new(xo.clone(), yo.clone(), rows_inner.clone(), outer_of_inner.clone())?;
    let est = problem.fit(Criterion::Reml)?;
    let vars = est.variances();
    let l = spd_cholesky(&est.cov_beta, "fixed-effect covariance")?.l();
    let beta = mvn_draw_chol(rng, &est.beta, &l);
    let (a, b) = problem.draw_random_effects(rng, &beta, &vars, est.sigma2);
    let (va, vb) = match outer {
        Some(_) => (vars[0], vars[1]),
        None => (0.0, vars[0]),
    };
    let mut outer_fx = Effects {
        index: &outer_idx,
        fitted: &a,
        var: va,
        prior: BTreeMap::new(),
    };
    let mut inner_fx = Effects {
        index: &inner_idx,
        fitted: &b,
        var: vb,
        prior: BTreeMap::new(),
    };
    let pred: Vec<f64> = view
        .mis
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let fa = outer.map_or(0.0, |o| outer_fx.get(rng, o[u]));
            let fb = inner_fx.get(rng, inner[u]);
            xm.row(i).dot(&beta.transpose()) + fa + fb
        })
        .collect();
    let imputed = if pmm {
        let (ah, bh) = problem.random_effect_means(&est.beta, &vars, est.sigma2);
        let fitted = &xo * &est.beta;
        let donor_pred: Vec<f64> = (0..xo.nrows())
            .map(|i| {
                let g = rows_inner[i];
                let fa = outer_of_inner.as_ref().map_or(0.0, |p| ah[p[g]]);
                fitted[i] + fa + bh[g]
            })
            .collect();
        pmm_match(rng, &donor_pred, yo.as_slice(), &pred, donors)?
    } else {
        let sd = est.sigma2.sqrt();
        pred.iter().map(|&m| m + sd * rng.std_normal()).collect()
    };
    Ok(view.fills(&imputed))
}
