//! Latent-normal representation of binary and categorical variables.
//!
//! A variable with `K` levels is carried by `K − 1` latent normals. Level
//! `k < K − 1` holds when latent `k` is the largest and positive; the last
//! level holds when every latent is non-positive. For a binary variable this
//! reads: first level when the latent is positive, second otherwise.

use crate::error::{Error, Result};
use crate::stochastic::{trunc_normal_draw, RngStream};

/// Level implied by a latent vector.
pub fn decode_latent(w: &[f64]) -> usize {
    let (arg, max) = w
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if max > 0.0 {
        arg
    } else {
        w.len()
    }
}

/// Whether `w` lies in the region of `level`.
pub fn in_region(w: &[f64], level: usize) -> bool {
    decode_latent(w) == level
}

/// Interval for `w[j]` that keeps the vector in `level`'s region given the
/// other coordinates.
pub fn latent_bounds(w: &[f64], level: usize, j: usize) -> (f64, f64) {
    let reference = w.len();
    if level == reference {
        (f64::NEG_INFINITY, 0.0)
    } else if j == level {
        let others = w
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != j)
            .map(|(_, &v)| v)
            .fold(0.0, f64::max);
        (others, f64::INFINITY)
    } else {
        (f64::NEG_INFINITY, w[level])
    }
}

/// A starting latent vector inside `level`'s region.
pub fn init_latent(rng: &mut RngStream, level: usize, n_levels: usize) -> Result<Vec<f64>> {
    let width = n_levels - 1;
    if level >= n_levels {
        return Err(Error::UnknownLevel {
            column: String::new(),
            level: level.to_string(),
        });
    }
    let mut w: Vec<f64> = (0..width).map(|_| rng.std_normal()).collect();
    for _ in 0..64 {
        if in_region(&w, level) {
            return Ok(w);
        }
        for v in w.iter_mut() {
            *v = rng.std_normal();
        }
    }
    // Deterministic point well inside the region.
    let mut w = vec![-1.0; width];
    if level < width {
        w[level] = 1.0;
    }
    Ok(w)
}

/// Gibbs update of latent coordinate `j` from its conditional normal,
/// truncated to the observed level's region.
pub fn refresh_coordinate(
    rng: &mut RngStream,
    w: &mut [f64],
    level: usize,
    j: usize,
    mean: f64,
    sd: f64,
) -> Result<()> {
    let (lo, hi) = latent_bounds(w, level, j);
    // Ties with another coordinate leave an empty interval; nudge apart.
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo, lo + f64::EPSILON.max(lo.abs() * 1e-12)) };
    w[j] = trunc_normal_draw(rng, mean, sd, lo, hi)?;
    Ok(())
}
