//! Linear mixed models with one random intercept or two nested random
//! intercepts, fitted by ML or REML.
//!
//! With `λ_k = σ_k² / σ²` the marginal covariance is `σ² H` where
//! `H = I + λ_a Z_a Z_aᵀ + λ_b Z_b Z_bᵀ`. For nested intercepts `H⁻¹` has a
//! closed form built from group sizes, so every quantity needed for the
//! deviance and its gradient reduces to per-group sums of `[X y]`.
//! Components are estimated by EM-type fixed-point updates followed by
//! Newton steps on the profiled deviance in `φ = √λ`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::formula::{ModelFormula, Term};
use super::linear::gram_cholesky;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stochastic::RngStream;

pub const MAX_EM: usize = 500;
pub const MAX_NEWTON: usize = 50;
const EM_REL_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-12;
/// Components below this share of the residual variance are reported as
/// boundary estimates.
const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    Ml,
    #[default]
    Reml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarComponent {
    /// Grouping factor, or `"Residual"`.
    pub name: String,
    pub variance: f64,
    pub sd: f64,
    #[serde(default)]
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub formula: String,
    pub criterion: Criterion,
    pub fixed: Vec<FixedEffect>,
    /// Random-intercept variances, outermost first, then the residual.
    pub components: Vec<VarComponent>,
    pub loglik: f64,
    pub deviance: f64,
    pub n_obs: usize,
    pub n_groups: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl LmmFit {
    pub fn coef(&self, name: &str) -> Option<&FixedEffect> {
        self.fixed.iter().find(|f| f.name == name)
    }

    pub fn component(&self, name: &str) -> Option<&VarComponent> {
        self.components.iter().find(|c| c.name == name)
    }
}

/// Numerical state at the optimum, used by imputers for parameter draws.
#[derive(Debug, Clone)]
pub struct LmmEstimate {
    pub beta: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub sigma2: f64,
    /// `σ_k² / σ²`, outermost first.
    pub lambda: Vec<f64>,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LmmEstimate {
    /// Random-intercept variances, outermost first.
    pub fn variances(&self) -> Vec<f64> {
        self.lambda.iter().map(|l| l * self.sigma2).collect()
    }
}

/// A design with its grouping structure.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// Inner group of each row.
    inner: Vec<usize>,
    /// Outer group of each inner group (two-level models only).
    outer: Option<Vec<usize>>,
    n_inner: usize,
    n_outer: usize,
    // Sufficient statistics.
    ata: DMatrix<f64>,
    sums: Vec<DVector<f64>>,
    sizes: Vec<f64>,
    members: Vec<Vec<usize>>,
}

struct Eval {
    dev: f64,
    beta: DVector<f64>,
    xhx_inv: DMatrix<f64>,
    r: f64,
    /// ∂D/∂λ, outermost first.
    grad: Vec<f64>,
    /// EM quantities per level: (‖Zᵀ P_H y‖², tr(Zᵀ P_H Z)).
    em: Vec<(f64, f64)>,
}

impl LmmProblem {
    /// `inner[i]` is the group of row `i` in `0..n_inner`; `outer[g]` the
    /// outer group of inner group `g` for nested models.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, inner: Vec<usize>, outer: Option<Vec<usize>>) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n || inner.len() != n {
            return Err(Error::InvalidSpec("design, response and groups differ in length".into()));
        }
        let n_inner = inner.iter().max().map_or(0, |m| m + 1);
        if let Some(o) = &outer {
            if o.len() != n_inner {
                return Err(Error::InvalidSpec("outer map must cover every inner group".into()));
            }
        }
        let n_outer = outer.as_ref().map_or(0, |o| o.iter().max().map_or(0, |m| m + 1));
        let mut a = DMatrix::zeros(n, p + 1);
        a.columns_mut(0, p).copy_from(&x);
        a.set_column(p, &y);
        let ata = a.transpose() * &a;
        let mut sums = vec![DVector::zeros(p + 1); n_inner];
        let mut sizes = vec![0.0; n_inner];
        for (i, &g) in inner.iter().enumerate() {
            sums[g] += a.row(i).transpose();
            sizes[g] += 1.0;
        }
        let mut members = vec![Vec::new(); n_outer];
        if let Some(o) = &outer {
            for (g, &s) in o.iter().enumerate() {
                members[s].push(g);
            }
        }
        if n <= p {
            return Err(Error::RankDeficient);
        }
        gram_cholesky(&(x.transpose() * &x))?;
        Ok(LmmProblem {
            x,
            y,
            inner,
            outer,
            n_inner,
            n_outer,
            ata,
            sums,
            sizes,
            members,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_levels(&self) -> usize {
        if self.outer.is_some() {
            2
        } else {
            1
        }
    }

    pub fn n_groups(&self) -> Vec<usize> {
        if self.outer.is_some() {
            vec![self.n_outer, self.n_inner]
        } else {
            vec![self.n_inner]
        }
    }

    fn dof(&self, crit: Criterion) -> f64 {
        match crit {
            Criterion::Ml => self.n_obs() as f64,
            Criterion::Reml => (self.n_obs() - self.n_fixed()) as f64,
        }
    }

    /// `(λ_a, λ_b)` from the outermost-first list.
    fn split(&self, lambda: &[f64]) -> (f64, f64) {
        if self.outer.is_some() {
            (lambda[0], lambda[1])
        } else {
            (0.0, lambda[0])
        }
    }

    fn evaluate(&self, crit: Criterion, lambda: &[f64]) -> Result<Eval> {
        let p = self.n_fixed();
        let (la, lb) = self.split(lambda);
        let w: Vec<f64> = self.sizes.iter().map(|&ng| 1.0 / (1.0 + lb * ng)).collect();
        let mut m = self.ata.clone();
        let mut logdet = 0.0;
        for g in 0..self.n_inner {
            let c = lb * w[g];
            m.ger(-c, &self.sums[g], &self.sums[g], 1.0);
            logdet += (1.0 + lb * self.sizes[g]).ln();
        }
        // Outer Sherman–Morrison terms.
        let mut t = vec![DVector::zeros(p + 1); self.n_outer];
        let mut ms = vec![0.0; self.n_outer];
        let mut ds = vec![0.0; self.n_outer];
        for s in 0..self.n_outer {
            for &g in &self.members[s] {
                t[s].axpy(w[g], &self.sums[g], 1.0);
                ms[s] += self.sizes[g] * w[g];
            }
            ds[s] = la / (1.0 + la * ms[s]);
            m.ger(-ds[s], &t[s], &t[s], 1.0);
            logdet += (1.0 + la * ms[s]).ln();
        }
        let xhx = m.view((0, 0), (p, p)).into_owned();
        let xhy = m.view((0, p), (p, 1)).into_owned();
        let yhy = m[(p, p)];
        let chol = xhx.clone().cholesky().ok_or(Error::RankDeficient)?;
        let beta = chol.solve(&xhy).column(0).into_owned();
        let r = (yhy - beta.dot(&xhy.column(0))).max(f64::MIN_POSITIVE);
        let xhx_inv = chol.inverse();
        let logdet_xhx: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(p).map(|d| d.ln()).sum::<f64>();
        let dof = self.dof(crit);
        let reml = crit == Criterion::Reml;
        let dev = dof * (2.0 * std::f64::consts::PI * r / dof).ln() + logdet + dof + if reml { logdet_xhx } else { 0.0 };

        // Residual sums E_g and the X-part of Zᵀ H⁻¹ X.
        let e: Vec<f64> = self
            .sums
            .iter()
            .map(|s| s[p] - s.rows(0, p).dot(&beta))
            .collect();
        let outer_of = |g: usize| self.outer.as_ref().map(|o| o[g]);
        let te: Vec<f64> = (0..self.n_outer)
            .map(|s| self.members[s].iter().map(|&g| w[g] * e[g]).sum())
            .collect();
        let mut em = Vec::new();
        let mut grad = Vec::new();
        let quad = |v: &DVector<f64>| v.dot(&(&xhx_inv * v));
        if self.outer.is_some() {
            let (mut q, mut tr) = (0.0, 0.0);
            for s in 0..self.n_outer {
                let f = 1.0 / (1.0 + la * ms[s]);
                q += (te[s] * f).powi(2);
                tr += ms[s] * f;
                if reml {
                    let v = t[s].rows(0, p) * f;
                    tr -= quad(&v);
                }
            }
            em.push((q, tr));
            grad.push(tr - dof / r * q);
        }
        let (mut q, mut tr) = (0.0, 0.0);
        for g in 0..self.n_inner {
            let ng = self.sizes[g];
            let (d, tse, tx) = match outer_of(g) {
                Some(s) => (ds[s], te[s], Some(&t[s])),
                None => (0.0, 0.0, None),
            };
            q += (w[g] * e[g] - d * w[g] * ng * tse).powi(2);
            tr += ng * w[g] - d * (w[g] * ng).powi(2);
            if reml {
                let mut v = self.sums[g].rows(0, p) * w[g];
                if let Some(tx) = tx {
                    v.axpy(-d * w[g] * ng, &tx.rows(0, p).into_owned(), 1.0);
                }
                tr -= quad(&v);
            }
        }
        em.push((q, tr));
        grad.push(tr - dof / r * q);
        Ok(Eval {
            dev,
            beta,
            xhx_inv,
            r,
            grad,
            em,
        })
    }

    /// Profiled deviance (−2 log-likelihood, σ² profiled out) at `λ`.
    pub fn profiled_deviance(&self, crit: Criterion, lambda: &[f64]) -> Result<f64> {
        Ok(self.evaluate(crit, lambda)?.dev)
    }

    /// Deviance at explicit variances `[σ_outer², σ_inner², σ²]` (two-level)
    /// or `[σ_group², σ²]` (one-level), with β at its GLS value.
    pub fn deviance(&self, crit: Criterion, components: &[f64]) -> Result<f64> {
        let k = self.n_levels();
        if components.len() != k + 1 {
            return Err(Error::InvalidSpec(format!("expected {} variance components", k + 1)));
        }
        let s2 = components[k];
        if !(s2 > 0.0) || components.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidSpec("variances must be non-negative, residual positive".into()));
        }
        let lambda: Vec<f64> = components[..k].iter().map(|c| c / s2).collect();
        let ev = self.evaluate(crit, &lambda)?;
        let dof = self.dof(crit);
        // Undo the profiling: D(σ²) = D_prof − dof·ln(r/dof) − dof + dof·ln σ² + r/σ².
        Ok(ev.dev - dof * (ev.r / dof).ln() - dof + dof * s2.ln() + ev.r / s2)
    }

    fn start(&self, crit: Criterion) -> Result<Vec<f64>> {
        let k = self.n_levels();
        let grid: Vec<f64> = (-4..=3).map(|e| 10f64.powi(e)).collect();
        let mut best = (f64::INFINITY, vec![1.0; k]);
        let mut cand = vec![0.0; k];
        let total = grid.len().pow(k as u32);
        for idx in 0..total {
            let mut rem = idx;
            for c in cand.iter_mut() {
                *c = grid[rem % grid.len()];
                rem /= grid.len();
            }
            let d = self.evaluate(crit, &cand)?.dev;
            if d < best.0 {
                best = (d, cand.clone());
            }
        }
        Ok(best.1)
    }

    fn em_phase(&self, crit: Criterion, mut lambda: Vec<f64>) -> Result<(Vec<f64>, usize)> {
        let groups: Vec<f64> = self.n_groups().iter().map(|&g| g as f64).collect();
        let mut cur = self.evaluate(crit, &lambda)?;
        for it in 0..MAX_EM {
            let s2 = cur.r / self.dof(crit);
            let next: Vec<f64> = lambda
                .iter()
                .zip(&cur.em)
                .zip(&groups)
                .map(|((&l, &(q, tr)), &gk)| {
                    let v = l * s2 + l * l / gk * (q - s2 * tr);
                    (v / s2).max(0.0)
                })
                .collect();
            let ev = self.evaluate(crit, &next)?;
            if ev.dev > cur.dev {
                return Ok((lambda, it));
            }
            let change = next
                .iter()
                .zip(&lambda)
                .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-6))
                .fold(0.0, f64::max);
            lambda = next;
            cur = ev;
            if change < EM_REL_TOL {
                return Ok((lambda, it + 1));
            }
        }
        Ok((lambda, MAX_EM))
    }

    fn phi_grad(&self, crit: Criterion, phi: &[f64]) -> Result<(f64, DVector<f64>)> {
        let lambda: Vec<f64> = phi.iter().map(|f| f * f).collect();
        let ev = self.evaluate(crit, &lambda)?;
        let g = DVector::from_iterator(phi.len(), phi.iter().zip(&ev.grad).map(|(f, g)| 2.0 * f * g));
        Ok((ev.dev, g))
    }

    /// Newton steps on the profiled deviance in `φ = √λ`.
    fn newton_phase(&self, crit: Criterion, lambda: Vec<f64>) -> Result<(Vec<f64>, bool, usize)> {
        let k = lambda.len();
        let mut phi: Vec<f64> = lambda.iter().map(|l| l.sqrt()).collect();
        // Leave a boundary if the deviance decreases into the interior.
        let ev = self.evaluate(crit, &lambda)?;
        for j in 0..k {
            if phi[j] == 0.0 && ev.grad[j] < 0.0 {
                phi[j] = 1e-3;
            }
        }
        let (mut dev, mut g) = self.phi_grad(crit, &phi)?;
        for it in 0..MAX_NEWTON {
            if g.amax() < GRAD_TOL * (1.0 + dev.abs()) {
                return Ok((phi.iter().map(|f| f * f).collect(), true, it));
            }
            let mut h = DMatrix::zeros(k, k);
            for j in 0..k {
                let step = 1e-5 * phi[j].abs().max(1e-3);
                let mut up = phi.clone();
                let mut dn = phi.clone();
                up[j] += step;
                dn[j] -= step;
                let gu = self.phi_grad(crit, &up)?.1;
                let gd = self.phi_grad(crit, &dn)?.1;
                h.set_column(j, &((gu - gd) / (2.0 * step)));
            }
            let h = (&h + h.transpose()) * 0.5;
            let dir = match h.clone().cholesky() {
                Some(c) => -c.solve(&g),
                None => -&g / (g.amax().max(1.0)),
            };
            let mut t = 1.0;
            let moved = loop {
                let cand: Vec<f64> = phi.iter().zip(dir.iter()).map(|(f, d)| (f + t * d).abs()).collect();
                let (cd, cg) = self.phi_grad(crit, &cand)?;
                // Near the optimum the deviance is flat to rounding, so a
                // smaller gradient also counts as progress.
                let flat = cd <= dev + 1e-12 * (1.0 + dev.abs()) && cg.amax() < g.amax();
                if cd < dev || flat {
                    let small = dir.amax() * t < 1e-13 * (1.0 + phi.iter().cloned().fold(0.0, f64::max));
                    phi = cand;
                    dev = cd;
                    g = cg;
                    break !small;
                }
                t *= 0.5;
                if t < 1e-10 {
                    break false;
                }
            };
            if !moved {
                let ok = g.amax() < 1e-5 * (1.0 + dev.abs());
                return Ok((phi.iter().map(|f| f * f).collect(), ok, it + 1));
            }
        }
        let ok = g.amax() < 1e-5 * (1.0 + dev.abs());
        Ok((phi.iter().map(|f| f * f).collect(), ok, MAX_NEWTON))
    }

    pub fn fit(&self, crit: Criterion) -> Result<LmmEstimate> {
        let start = self.start(crit)?;
        let (lambda, em_iter) = self.em_phase(crit, start)?;
        let (lambda, converged, nt_iter) = self.newton_phase(crit, lambda)?;
        let ev = self.evaluate(crit, &lambda)?;
        let sigma2 = ev.r / self.dof(crit);
        if !converged {
            log::warn!("mixed model did not converge; returning best parameters found");
        }
        Ok(LmmEstimate {
            cov_beta: &ev.xhx_inv * sigma2,
            beta: ev.beta,
            sigma2,
            lambda,
            deviance: ev.dev,
            converged,
            iterations: em_iter + nt_iter,
        })
    }

    /// Draw random intercepts from their posterior given β and the variance
    /// components (outermost first, then residual). Returns `(outer, inner)`
    /// effects; `outer` is empty for one-level models.
    pub fn draw_random_effects(
        &self,
        rng: &mut RngStream,
        beta: &DVector<f64>,
        variances: &[f64],
        sigma2: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        self.effects(beta, variances, sigma2, &mut || rng.std_normal())
    }

    /// Posterior means (BLUPs) of the random intercepts, laid out as in
    /// [`LmmProblem::draw_random_effects`].
    pub fn random_effect_means(&self, beta: &DVector<f64>, variances: &[f64], sigma2: f64) -> (Vec<f64>, Vec<f64>) {
        self.effects(beta, variances, sigma2, &mut || 0.0)
    }

    /// Outer effects from their marginal posterior, then inner effects given
    /// the outer ones; `noise` supplies the standard-normal innovations.
    fn effects(
        &self,
        beta: &DVector<f64>,
        variances: &[f64],
        sigma2: f64,
        noise: &mut dyn FnMut() -> f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let p = self.n_fixed();
        let (va, vb) = if self.outer.is_some() {
            (variances[0], variances[1])
        } else {
            (0.0, variances[0])
        };
        let rbar: Vec<f64> = self
            .sums
            .iter()
            .zip(&self.sizes)
            .map(|(s, &n)| (s[p] - s.rows(0, p).dot(beta)) / n)
            .collect();
        let mut a = vec![0.0; self.n_outer];
        if self.outer.is_some() && va > 0.0 {
            for s in 0..self.n_outer {
                let (mut prec, mut num) = (1.0 / va, 0.0);
                for &g in &self.members[s] {
                    let v = vb + sigma2 / self.sizes[g];
                    prec += 1.0 / v;
                    num += rbar[g] / v;
                }
                a[s] = num / prec + noise() / prec.sqrt();
            }
        }
        let b = (0..self.n_inner)
            .map(|g| {
                if vb <= 0.0 {
                    return 0.0;
                }
                let shift = self.outer.as_ref().map_or(0.0, |o| a[o[g]]);
                let n = self.sizes[g];
                let denom = sigma2 + n * vb;
                let mean = vb * n * (rbar[g] - shift) / denom;
                let var = vb * sigma2 / denom;
                mean + var.sqrt() * noise()
            })
            .collect();
        (a, b)
    }

    pub fn inner_of_row(&self) -> &[usize] {
        &self.inner
    }
}

/// Design matrix, response and groups bound from a formula and a dataset.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub problem: LmmProblem,
    pub names: Vec<String>,
    pub group_names: Vec<String>,
}

/// Key used to order groups.
fn group_key(v: f64) -> i64 {
    v as i64
}

impl ModelFrame {
    pub fn build(formula: &ModelFormula, d: &Dataset) -> Result<Self> {
        if formula.random.is_empty() || formula.random.len() > 2 {
            return Err(Error::InvalidSpec(
                "mixed model needs one random intercept or two nested ones".into(),
            ));
        }
        let mut used: Vec<&str> = vec![formula.response.as_str()];
        used.extend(formula.fixed.iter().map(Term::column));
        used.extend(formula.random.iter().map(String::as_str));
        for name in &used {
            let c = d.column(name)?;
            if c.has_missing() {
                return Err(Error::IncompleteData(name.to_string()));
            }
        }
        let n = d.n_rows();
        let mut names = vec!["(Intercept)".to_string()];
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for term in &formula.fixed {
            let c = d.column(term.column())?;
            match term {
                Term::Column(name) => {
                    names.push(name.clone());
                    cols.push(c.values().to_vec());
                }
                Term::Factor(name) => {
                    let mut seen: Vec<i64> = c.values().iter().map(|&v| v as i64).collect();
                    seen.sort_unstable();
                    seen.dedup();
                    for &lv in seen.iter().skip(1) {
                        let label = match c.spec().kind.levels() {
                            Some(levels) => levels[lv as usize].clone(),
                            None => lv.to_string(),
                        };
                        names.push(format!("factor({name}){label}"));
                        cols.push(c.values().iter().map(|&v| f64::from(u8::from(v as i64 == lv))).collect());
                    }
                }
            }
        }
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let y = DVector::from_column_slice(d.column(&formula.response)?.values());

        let inner_col = d.column(formula.random.last().expect("checked"))?.values();
        let (inner, outer) = if formula.random.len() == 2 {
            let outer_col = d.column(&formula.random[0])?.values();
            let mut outer_idx: BTreeMap<i64, usize> = BTreeMap::new();
            for &v in outer_col {
                outer_idx.entry(group_key(v)).or_insert(0);
            }
            for (i, v) in outer_idx.values_mut().enumerate() {
                *v = i;
            }
            let mut inner_idx: BTreeMap<(i64, i64), usize> = BTreeMap::new();
            for r in 0..n {
                inner_idx.entry((group_key(outer_col[r]), group_key(inner_col[r]))).or_insert(0);
            }
            let mut outer_of = Vec::with_capacity(inner_idx.len());
            for (i, (k, v)) in inner_idx.iter_mut().enumerate() {
                *v = i;
                outer_of.push(outer_idx[&k.0]);
            }
            let inner: Vec<usize> = (0..n)
                .map(|r| inner_idx[&(group_key(outer_col[r]), group_key(inner_col[r]))])
                .collect();
            (inner, Some(outer_of))
        } else {
            let mut idx: BTreeMap<i64, usize> = BTreeMap::new();
            for &v in inner_col {
                idx.entry(group_key(v)).or_insert(0);
            }
            for (i, v) in idx.values_mut().enumerate() {
                *v = i;
            }
            (inner_col.iter().map(|&v| idx[&group_key(v)]).collect(), None)
        };
        Ok(ModelFrame {
            problem: LmmProblem::new(x, y, inner, outer)?,
            names,
            group_names: formula.random.clone(),
        })
    }
}

pub fn fit_lmm(formula: &ModelFormula, d: &Dataset, crit: Criterion) -> Result<LmmFit> {
    let frame = ModelFrame::build(formula, d)?;
    let est = frame.problem.fit(crit)?;
    Ok(summarize(formula, &frame, &est, crit))
}

fn summarize(formula: &ModelFormula, frame: &ModelFrame, est: &LmmEstimate, crit: Criterion) -> LmmFit {
    let fixed = frame
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| FixedEffect {
            name: name.clone(),
            estimate: est.beta[j],
            se: est.cov_beta[(j, j)].sqrt(),
        })
        .collect();
    let mut components: Vec<VarComponent> = frame
        .group_names
        .iter()
        .zip(est.variances())
        .zip(&est.lambda)
        .map(|((name, v), &l)| VarComponent {
            name: name.clone(),
            variance: v,
            sd: v.sqrt(),
            boundary: l < BOUNDARY_TOL,
        })
        .collect();
    components.push(VarComponent {
        name: "Residual".into(),
        variance: est.sigma2,
        sd: est.sigma2.sqrt(),
        boundary: false,
    });
    LmmFit {
        formula: formula.to_string(),
        criterion: crit,
        fixed,
        components,
        loglik: -0.5 * est.deviance,
        deviance: est.deviance,
        n_obs: frame.problem.n_obs(),
        n_groups: frame.problem.n_groups(),
        converged: est.converged,
        iterations: est.iterations,
    }
}

/// Deviance of the formula's model at explicit variance components
/// (outermost first, residual last).
pub fn lmm_deviance(formula: &ModelFormula, d: &Dataset, crit: Criterion, components: &[f64]) -> Result<f64> {
    ModelFrame::build(formula, d)?.problem.deviance(crit, components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, ColumnSpec, Role, Shape};
    use crate::fitters::parse_formula;
    use proptest::prelude::*;

    fn one_way(groups: usize, per: usize, sd_b: f64, seed: u64) -> (Dataset, Vec<Vec<f64>>) {
        let mut rng = RngStream::new(seed, 0);
        let mut ys = Vec::new();
        let mut rows = (Vec::new(), Vec::new(), Vec::new());
        for g in 0..groups {
            let b = sd_b * rng.std_normal();
            let mut gy = Vec::new();
            for i in 0..per {
                let y = 1.0 + b + rng.std_normal();
                gy.push(y);
                rows.0.push((g * per + i) as f64);
                rows.1.push(g as f64);
                rows.2.push(y);
            }
            ys.push(gy);
        }
        let d = Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("row", Role::UnitId), rows.0),
                Column::complete(ColumnSpec::continuous("g", Role::ClusterId), rows.1),
                Column::complete(ColumnSpec::continuous("y", Role::Analysis), rows.2),
            ],
        )
        .unwrap();
        (d, ys)
    }

    fn anova(ys: &[Vec<f64>]) -> (f64, f64) {
        let g = ys.len() as f64;
        let n = ys[0].len() as f64;
        let means: Vec<f64> = ys.iter().map(|v| v.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / g;
        let ssw: f64 = ys
            .iter()
            .zip(&means)
            .map(|(v, m)| v.iter().map(|y| (y - m).powi(2)).sum::<f64>())
            .sum();
        let ssb: f64 = means.iter().map(|m| n * (m - grand).powi(2)).sum();
        let msw = ssw / (g * (n - 1.0));
        let msb = ssb / (g - 1.0);
        (msw, ((msb - msw) / n).max(0.0))
    }

    #[test]
    fn balanced_one_way_reml_equals_anova() {
        for seed in 0..5 {
            let (d, ys) = one_way(12, 6, 0.8, seed);
            let fit = fit_lmm(&parse_formula("y ~ (1|g)").unwrap(), &d, Criterion::Reml).unwrap();
            let (msw, sb2) = anova(&ys);
            assert!(fit.converged);
            assert!((fit.components[1].variance - msw).abs() < 1e-8, "{} vs {msw}", fit.components[1].variance);
            assert!((fit.components[0].variance - sb2).abs() < 1e-8, "{} vs {sb2}", fit.components[0].variance);
        }
    }

    #[test]
    fn no_between_variation_hits_boundary() {
        let rows: Vec<(f64, f64)> = (0..20).map(|i| ((i % 4) as f64, [1.0, 2.0, 3.0, 4.0, 5.0][i / 4])).collect();
        let d = Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("row", Role::UnitId), (0..20).map(f64::from).collect()),
                Column::complete(ColumnSpec::continuous("g", Role::ClusterId), rows.iter().map(|r| r.0).collect()),
                Column::complete(ColumnSpec::continuous("y", Role::Analysis), rows.iter().map(|r| r.1).collect()),
            ],
        )
        .unwrap();
        let fit = fit_lmm(&parse_formula("y ~ (1|g)").unwrap(), &d, Criterion::Reml).unwrap();
        assert!(fit.components[0].variance < 1e-8);
        assert!(fit.components[0].boundary);
    }

    fn three_level(seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 0);
        let (mut id, mut school, mut time, mut y) = (vec![], vec![], vec![], vec![]);
        for s in 0..4 {
            let a = 0.05 * rng.std_normal();
            for j in 0..5 {
                let b = 0.25 * rng.std_normal();
                for t in 0..3 {
                    id.push((s * 5 + j) as f64);
                    school.push(s as f64);
                    time.push(t as f64);
                    y.push(0.5 + 0.1 * t as f64 + a + b + 0.25 * rng.std_normal());
                }
            }
        }
        Dataset::new(
            Shape::Long,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), id),
                Column::complete(ColumnSpec::continuous("school", Role::ClusterId), school),
                Column::complete(ColumnSpec::continuous("time", Role::Time), time),
                Column::complete(ColumnSpec::continuous("y", Role::Analysis), y),
            ],
        )
        .unwrap()
    }

    #[test]
    fn three_level_optimum_beats_grid() {
        let d = three_level(21);
        let f = parse_formula("y ~ time + (1|school/id)").unwrap();
        for crit in [Criterion::Ml, Criterion::Reml] {
            let fit = fit_lmm(&f, &d, crit).unwrap();
            let best: Vec<f64> = fit.components.iter().map(|c| c.variance).collect();
            let at_opt = lmm_deviance(&f, &d, crit, &best).unwrap();
            assert!((at_opt - fit.deviance).abs() < 1e-8);
            let axis = |hi: f64| (0..20).map(move |i| hi * i as f64 / 19.0);
            for a in axis(0.02) {
                for b in axis(0.2) {
                    for e in axis(0.2).skip(1) {
                        let dv = lmm_deviance(&f, &d, crit, &[a, b, e]).unwrap();
                        assert!(at_opt <= dv + 1e-9, "grid point ({a},{b},{e}) beats optimum");
                    }
                }
            }
        }
    }

    #[test]
    fn incomplete_model_variable_rejected() {
        let d = Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![0.0, 1.0]),
                Column::from_options(ColumnSpec::continuous("y", Role::Analysis), [Some(1.0), None]),
            ],
        )
        .unwrap();
        assert!(matches!(
            fit_lmm(&parse_formula("y ~ (1|id)").unwrap(), &d, Criterion::Reml),
            Err(Error::IncompleteData(_))
        ));
        assert!(matches!(
            fit_lmm(&parse_formula("z ~ (1|id)").unwrap(), &d, Criterion::Reml),
            Err(Error::UnknownColumn(_))
        ));
    }

    #[test]
    fn reml_and_ml_agree_on_fixed_effects_in_balanced_designs() {
        let (d, _) = one_way(10, 4, 0.5, 3);
        let f = parse_formula("y ~ (1|g)").unwrap();
        let a = fit_lmm(&f, &d, Criterion::Ml).unwrap();
        let b = fit_lmm(&f, &d, Criterion::Reml).unwrap();
        assert!((a.fixed[0].estimate - b.fixed[0].estimate).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ml_optimum_beats_random_probes(
            seed in 0u64..500,
            probes in proptest::collection::vec((0.0f64..0.3, 0.0f64..0.5, 0.01f64..0.5), 10),
        ) {
            let d = three_level(seed);
            let f = parse_formula("y ~ time + (1|school/id)").unwrap();
            let fit = fit_lmm(&f, &d, Criterion::Ml).unwrap();
            for (a, b, e) in probes {
                let dv = lmm_deviance(&f, &d, Criterion::Ml, &[a, b, e]).unwrap();
                prop_assert!(fit.deviance <= dv + 1e-8);
            }
        }
    }
}
