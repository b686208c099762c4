use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stochastic::RngStream;

/// Smallest residual variance used for draws.
pub const S2_FLOOR: f64 = 1e-10;

/// Columns whose squared residual norm, after projecting on the earlier
/// columns, falls below this fraction of their own squared norm are treated
/// as collinear.
pub const COLLINEARITY_TOL: f64 = 1e-10;

/// OLS fit plus one draw of `(β, σ²)` from its posterior under a flat prior.
#[derive(Debug, Clone)]
pub struct LinearDraw {
    pub beta_hat: DVector<f64>,
    pub beta_draw: DVector<f64>,
    pub sigma2_draw: f64,
    pub xtx_inv: DMatrix<f64>,
    /// Unbiased residual variance (before flooring).
    pub s2: f64,
}

/// Cholesky of `XᵀX`, failing with `RankDeficient` when a column is (nearly)
/// a combination of earlier ones.
pub(crate) fn gram_cholesky(xtx: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = xtx.clone().cholesky().ok_or(Error::RankDeficient)?;
    let l = chol.l_dirty();
    for i in 0..xtx.nrows() {
        let d = xtx[(i, i)];
        if d <= 0.0 || l[(i, i)] * l[(i, i)] < COLLINEARITY_TOL * d {
            return Err(Error::RankDeficient);
        }
    }
    Ok(chol)
}

/// Indices of a maximal set of linearly independent columns, scanning left to
/// right (modified Gram–Schmidt with the same tolerance as [`gram_cholesky`]).
pub fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let mut v: DVector<f64> = x.column(j).into_owned();
        let norm2 = v.norm_squared();
        if norm2 == 0.0 {
            continue;
        }
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let r2 = v.norm_squared();
        if r2 >= COLLINEARITY_TOL * norm2 {
            basis.push(v / r2.sqrt());
            keep.push(j);
        }
    }
    keep
}

/// Least squares `β̂`, `(XᵀX)⁻¹` and the residual sum of squares.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let (n, p) = x.shape();
    if n < p || y.len() != n {
        return Err(Error::RankDeficient);
    }
    let xtx = x.transpose() * x;
    let chol = gram_cholesky(&xtx)?;
    let beta = chol.solve(&(x.transpose() * y));
    let rss = (y - x * &beta).norm_squared();
    Ok((beta, chol.inverse(), rss))
}

pub fn fit_linear_and_draw(rng: &mut RngStream, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearDraw> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::RankDeficient);
    }
    let xtx = x.transpose() * x;
    let chol = gram_cholesky(&xtx)?;
    let beta_hat = chol.solve(&(x.transpose() * y));
    let df = (n - p) as f64;
    let s2 = (y - x * &beta_hat).norm_squared() / df;
    let s2_used = if s2 < S2_FLOOR {
        log::warn!("residual variance {s2:e} floored at {S2_FLOOR:e}");
        S2_FLOOR
    } else {
        s2
    };
    let sigma2_draw = df * s2_used / rng.chi_square(df);
    // cov = σ² (XᵀX)⁻¹ = σ² L⁻ᵀ L⁻¹, so β = β̂ + σ L⁻ᵀ z.
    let z = rng.std_normal_vector(p);
    let lt = chol.l().transpose();
    let dev = lt
        .solve_upper_triangular(&z)
        .ok_or(Error::RankDeficient)?;
    let beta_draw = &beta_hat + dev * sigma2_draw.sqrt();
    Ok(LinearDraw {
        beta_hat,
        beta_draw,
        sigma2_draw,
        xtx_inv: chol.inverse(),
        s2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn design(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] })
    }

    #[test]
    fn exact_fit() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let y = DVector::from_iterator(10, xs.iter().map(|x| 2.0 * x));
        let mut rng = RngStream::new(0, 0);
        let d = fit_linear_and_draw(&mut rng, &design(&xs), &y).unwrap();
        assert!((d.beta_hat[1] - 2.0).abs() < 1e-12);
        assert!(d.s2 < 1e-20);
        assert!(d.sigma2_draw > 0.0 && d.sigma2_draw < 1e-8);
    }

    #[test]
    fn reproducible_draws() {
        let xs: Vec<f64> = (0..20).map(|i| f64::from(i) * 0.3).collect();
        let y = DVector::from_iterator(20, xs.iter().enumerate().map(|(i, x)| x + (i % 3) as f64));
        let a = fit_linear_and_draw(&mut RngStream::new(5, 2), &design(&xs), &y).unwrap();
        let b = fit_linear_and_draw(&mut RngStream::new(5, 2), &design(&xs), &y).unwrap();
        assert_eq!(a.beta_draw, b.beta_draw);
        assert_eq!(a.sigma2_draw.to_bits(), b.sigma2_draw.to_bits());
    }

    #[test]
    fn recovers_coefficients() {
        let mut rng = RngStream::new(1, 0);
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.std_normal()).collect();
        let y = DVector::from_iterator(n, xs.iter().map(|x| 1.0 + 3.0 * x));
        let y = y.map(|v| v + rng.std_normal());
        let d = fit_linear_and_draw(&mut rng, &design(&xs), &y).unwrap();
        assert!((d.beta_hat[0] - 1.0).abs() < 0.05);
        assert!((d.beta_hat[1] - 3.0).abs() < 0.05);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = DMatrix::from_fn(10, 3, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_element(10, 1.0);
        assert!(matches!(
            fit_linear_and_draw(&mut RngStream::new(0, 0), &x, &y),
            Err(Error::RankDeficient)
        ));
        assert_eq!(independent_columns(&x), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn ols_invariant_to_row_permutation(
            rows in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 5..30),
            seed in 0u64..1000,
        ) {
            let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
            prop_assume!(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min) > 0.5);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            let (b1, _, _) = ols(&design(&xs), &y).unwrap();
            let mut rng = RngStream::new(seed, 0);
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.index(i + 1));
            }
            let xs2: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
            let y2 = DVector::from_iterator(rows.len(), perm.iter().map(|&i| y[i]));
            let (b2, _, _) = ols(&design(&xs2), &y2).unwrap();
            prop_assert!((b1 - b2).amax() < 1e-8);
        }
    }
}
