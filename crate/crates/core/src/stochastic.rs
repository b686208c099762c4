//! Seeded random streams and the samplers used by the imputers.
//!
//! A run has one user seed. Chain `i` draws from stream `i` of that seed, so
//! chains are reproducible and independent of scheduling.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Tolerance for the symmetry check on covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Tail cut-off (in SDs) above which truncated normals switch from inverse
/// CDF to exponential rejection.
const TAIL_SWITCH: f64 = 4.0;

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A stream for a sub-task, keyed by `(stream_id, key)`.
    pub fn derive(&self, key: u64) -> RngStream {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ key.wrapping_mul(0xD1B5_4A32_D192_ED03);
        RngStream::new(mixed, self.stream_id)
    }

    pub fn std_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.std_normal()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Draw a category index from (not necessarily normalized) weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (k, &w) in weights.iter().enumerate() {
            if u < w {
                return k;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Chi-square with `k > 0` degrees of freedom.
    pub fn chi_square(&mut self, k: f64) -> f64 {
        ChiSquared::new(k)
            .expect("degrees of freedom must be positive")
            .sample(&mut self.rng)
    }

    pub fn exp1(&mut self) -> f64 {
        Exp1.sample(&mut self.rng)
    }

    pub fn std_normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.std_normal())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Mean and covariance of a multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MvnParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = MvnParams { mean, cov };
        p.cholesky()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        spd_cholesky(&self.cov, "mvn covariance")
    }
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite(format!("{what}: not square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::NotPositiveDefinite(format!("{what}: not symmetric")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = spd_cholesky(m, what)?.inverse();
    Ok(symmetrize(inv))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `mean + L z` for a given `z`; the deterministic core of [`mvn_draw`].
pub fn mvn_transform(params: &MvnParams, z: &DVector<f64>) -> Result<DVector<f64>> {
    let l = params.cholesky()?.l();
    Ok(&params.mean + l * z)
}

pub fn mvn_draw(rng: &mut RngStream, params: &MvnParams) -> Result<DVector<f64>> {
    let l = params.cholesky()?.l();
    let z = rng.std_normal_vector(params.dim());
    Ok(&params.mean + l * z)
}

/// Draw from N(mean, L Lᵀ) given the lower Cholesky factor.
pub fn mvn_draw_chol(rng: &mut RngStream, mean: &DVector<f64>, l: &DMatrix<f64>) -> DVector<f64> {
    let z = rng.std_normal_vector(mean.len());
    mean + l * z
}

/// Regression of the unobserved block on the observed block:
/// `coef = Σ_mo Σ_oo⁻¹` and `cov = Σ_mm − coef Σ_om`.
#[derive(Debug, Clone)]
pub struct ConditionalMap {
    pub missing_idx: Vec<usize>,
    pub observed_idx: Vec<usize>,
    pub coef: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

impl ConditionalMap {
    pub fn new(cov: &DMatrix<f64>, observed_idx: &[usize]) -> Result<Self> {
        let p = cov.nrows();
        let missing_idx: Vec<usize> = (0..p).filter(|i| !observed_idx.contains(i)).collect();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])])
        };
        let s_oo = pick(observed_idx, observed_idx);
        let s_mo = pick(&missing_idx, observed_idx);
        let s_mm = pick(&missing_idx, &missing_idx);
        let coef = if observed_idx.is_empty() {
            DMatrix::zeros(missing_idx.len(), 0)
        } else {
            let chol = Cholesky::new(s_oo).ok_or(Error::SingularObservedBlock)?;
            chol.solve(&s_mo.transpose()).transpose()
        };
        let cond = symmetrize(&s_mm - &coef * s_mo.transpose());
        Ok(ConditionalMap {
            missing_idx,
            observed_idx: observed_idx.to_vec(),
            coef,
            cov: cond,
        })
    }

    pub fn mean(&self, mean: &DVector<f64>, observed_vals: &DVector<f64>) -> DVector<f64> {
        let mu_m = DVector::from_fn(self.missing_idx.len(), |i, _| mean[self.missing_idx[i]]);
        let dev = DVector::from_fn(self.observed_idx.len(), |i, _| {
            observed_vals[i] - mean[self.observed_idx[i]]
        });
        mu_m + &self.coef * dev
    }
}

/// Conditional distribution of the complement of `observed_idx`.
pub fn conditional_mvn(
    params: &MvnParams,
    observed_idx: &[usize],
    observed_vals: &DVector<f64>,
) -> Result<MvnParams> {
    let p = params.dim();
    if observed_idx.is_empty() || observed_idx.len() >= p || observed_idx.iter().any(|&i| i >= p) {
        return Err(Error::InvalidSpec(
            "observed index set must be a proper nonempty subset".into(),
        ));
    }
    if observed_vals.len() != observed_idx.len() {
        return Err(Error::InvalidSpec("observed values do not match indices".into()));
    }
    let map = ConditionalMap::new(&params.cov, observed_idx)?;
    Ok(MvnParams {
        mean: map.mean(&params.mean, observed_vals),
        cov: map.cov,
    })
}

/// Wishart(scale, dof) by the Bartlett decomposition. Returns the lower
/// triangular `T = L A` with draw `T Tᵀ`.
fn bartlett_factor(rng: &mut RngStream, scale_chol_l: &DMatrix<f64>, dof: f64) -> DMatrix<f64> {
    let p = scale_chol_l.nrows();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        a[(i, i)] = rng.chi_square(dof - i as f64).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.std_normal();
        }
    }
    scale_chol_l * a
}

fn check_dof(dof: f64, p: usize) -> Result<()> {
    if !(dof > p as f64 - 1.0) || !dof.is_finite() {
        return Err(Error::InvalidDof { dof, dim: p });
    }
    Ok(())
}

pub fn wishart_draw(rng: &mut RngStream, scale: &DMatrix<f64>, dof: f64) -> Result<DMatrix<f64>> {
    check_dof(dof, scale.nrows())?;
    let l = spd_cholesky(scale, "wishart scale")?.l();
    let t = bartlett_factor(rng, &l, dof);
    Ok(symmetrize(&t * t.transpose()))
}

/// Inverse-Wishart(scale, dof): the inverse of a Wishart(scale⁻¹, dof) draw.
/// The mean is `scale / (dof − p − 1)` when `dof > p + 1`.
pub fn inv_wishart_draw(rng: &mut RngStream, scale: &DMatrix<f64>, dof: f64) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    check_dof(dof, p)?;
    let inv_scale = spd_inverse(scale, "inverse-wishart scale")?;
    let l = spd_cholesky(&inv_scale, "inverse-wishart scale")?.l();
    let t = bartlett_factor(rng, &l, dof);
    let t_inv = t
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::NotPositiveDefinite("wishart factor".into()))?;
    Ok(symmetrize(t_inv.transpose() * t_inv))
}

fn std_normal_dist() -> Normal {
    Normal::new(0.0, 1.0).expect("valid standard normal")
}

pub fn norm_cdf(x: f64) -> f64 {
    std_normal_dist().cdf(x)
}

pub fn norm_sf(x: f64) -> f64 {
    std_normal_dist().sf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    std_normal_dist().inverse_cdf(p)
}

/// Standard normal restricted to `[a, b)` with `a ≥ TAIL_SWITCH`, by rejection
/// from a translated exponential with the optimal rate (truncated at `b`).
fn tail_rejection(rng: &mut RngStream, a: f64, b: f64) -> f64 {
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    let span = b - a;
    let cap = if span.is_finite() {
        -(-alpha * span).exp_m1()
    } else {
        1.0
    };
    loop {
        let u = rng.uniform();
        let z = a - (-u * cap).ln_1p() / alpha;
        if z >= b {
            continue;
        }
        let rho = (-0.5 * (z - alpha) * (z - alpha)).exp();
        if rng.uniform() <= rho {
            return z;
        }
    }
}

/// Standard normal restricted to `(a, b)`.
fn std_trunc_normal(rng: &mut RngStream, a: f64, b: f64) -> f64 {
    if a >= TAIL_SWITCH {
        return tail_rejection(rng, a, b);
    }
    if b <= -TAIL_SWITCH {
        return -tail_rejection(rng, -b, -a);
    }
    // Work in whichever tail keeps the probabilities away from 1.
    let z = if a > 0.0 {
        let (qa, qb) = (norm_sf(a), norm_sf(b));
        let u = qb + rng.uniform() * (qa - qb);
        -norm_quantile(u)
    } else {
        let (pa, pb) = (norm_cdf(a), norm_cdf(b));
        let u = pa + rng.uniform() * (pb - pa);
        norm_quantile(u)
    };
    let eps = f64::EPSILON * (1.0 + a.abs().max(b.abs()).min(1e6));
    if z.is_finite() {
        z.clamp(a.max(-1e300) + eps, b.min(1e300) - eps)
    } else {
        0.5 * (a.max(-TAIL_SWITCH) + b.min(TAIL_SWITCH))
    }
}

/// Normal(mean, sd) restricted to the open interval `(lower, upper)`.
pub fn trunc_normal_draw(rng: &mut RngStream, mean: f64, sd: f64, lower: f64, upper: f64) -> Result<f64> {
    if !(lower < upper) || !(sd > 0.0) {
        return Err(Error::EmptyInterval { lower, upper });
    }
    let a = (lower - mean) / sd;
    let b = (upper - mean) / sd;
    let x = mean + sd * std_trunc_normal(rng, a, b);
    Ok(x.clamp(
        if lower.is_finite() { lower.next_up() } else { lower },
        if upper.is_finite() { upper.next_down() } else { upper },
    ))
}
