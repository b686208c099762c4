//! Joint-model imputation with a multivariate normal (single-level) or
//! multivariate linear mixed (two-level) model, fitted by Gibbs sampling.

mod latent;
mod model;
mod trace;

use serde::{Deserialize, Serialize};

pub use latent::{decode_latent, in_region, init_latent, latent_bounds};
pub use model::CLUSTER_COV_EXTRA_DOF;
pub use trace::{autocorr, ChainTrace};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stack::ImputedStack;
use crate::stochastic::RngStream;
use model::Model;

pub const DEFAULT_NBURN: usize = 1000;
pub const DEFAULT_NBETWEEN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovMode {
    /// One level-1 covariance shared by all clusters.
    #[default]
    Common,
    /// Level-1 covariances drawn per cluster around a common scale.
    ClusterSpecific,
}

fn default_nburn() -> usize {
    DEFAULT_NBURN
}

fn default_nbetween() -> usize {
    DEFAULT_NBETWEEN
}

fn default_nimp() -> usize {
    5
}

/// Column roles for the joint model. Intercepts are implicit in `x`, `x2`
/// and (when clustered) `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JmSpec {
    /// Incomplete level-1 variables.
    pub y: Vec<String>,
    /// Incomplete cluster-level variables.
    #[serde(default)]
    pub y2: Vec<String>,
    /// Complete level-1 predictors.
    #[serde(default)]
    pub x: Vec<String>,
    /// Complete cluster-level predictors of `y2`.
    #[serde(default)]
    pub x2: Vec<String>,
    /// Complete random-slope variables.
    #[serde(default)]
    pub z: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub cov_mode: CovMode,
    #[serde(default = "default_nburn")]
    pub nburn: usize,
    #[serde(default = "default_nbetween")]
    pub nbetween: usize,
    #[serde(default = "default_nimp")]
    pub nimp: usize,
    /// Impute binary outcomes as continuous and round them adaptively
    /// instead of using latent normals.
    #[serde(default)]
    pub adaptive_binary: bool,
    /// Hold the random effects at zero (diagnostic).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fix_psi_zero: bool,
}

impl JmSpec {
    pub fn new(y: Vec<String>) -> Self {
        JmSpec {
            y,
            y2: Vec::new(),
            x: Vec::new(),
            x2: Vec::new(),
            z: Vec::new(),
            cluster: None,
            cov_mode: CovMode::Common,
            nburn: DEFAULT_NBURN,
            nbetween: DEFAULT_NBETWEEN,
            nimp: default_nimp(),
            adaptive_binary: false,
            fix_psi_zero: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.nimp < 1 || self.nburn < 1 || self.nbetween < 1 {
            return Err(Error::InvalidSpec("nimp, nburn and nbetween must be at least 1".into()));
        }
        Ok(())
    }

    /// Sweep counts after which datasets are emitted (1-based).
    pub fn snapshot_sweeps(&self) -> Vec<usize> {
        (0..self.nimp).map(|k| self.nburn + k * self.nbetween).collect()
    }
}

#[derive(Debug, Clone)]
pub struct JmOutput {
    pub stack: ImputedStack,
    pub trace: ChainTrace,
}

/// Run one chain: `nburn` sweeps, then a completed dataset every `nbetween`
/// sweeps until `nimp` are collected. Every sweep is traced.
pub fn run_jm(rng: &mut RngStream, spec: &JmSpec, data: &Dataset) -> Result<JmOutput> {
    spec.validate()?;
    let model = Model::bind(spec, data)?;
    let mut state = model.init(rng)?;
    let mut trace = ChainTrace::new(model.param_names());
    let mut row = Vec::new();
    let total = spec.nburn + (spec.nimp - 1) * spec.nbetween;
    let snapshots = spec.snapshot_sweeps();
    let mut imputations = Vec::with_capacity(spec.nimp);
    for sweep in 1..=total {
        model.sweep(rng, &mut state)?;
        debug_assert!(model::latent_regions_hold(&model, &state));
        model.record(&state, &mut row);
        trace.push(&row);
        if snapshots.contains(&sweep) {
            imputations.push(model.completed(&state, data)?);
        }
    }
    Ok(JmOutput {
        stack: ImputedStack::new(data.clone(), imputations),
        trace,
    })
}

/// Run `sweeps` iterations without producing imputations, for convergence
/// checks.
pub fn run_jm_chain(rng: &mut RngStream, spec: &JmSpec, data: &Dataset, sweeps: usize) -> Result<ChainTrace> {
    let model = Model::bind(spec, data)?;
    let mut state = model.init(rng)?;
    let mut trace = ChainTrace::new(model.param_names());
    let mut row = Vec::new();
    for _ in 0..sweeps {
        model.sweep(rng, &mut state)?;
        model.record(&state, &mut row);
        trace.push(&row);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, ColumnKind, ColumnSpec, Role, Shape};
    use crate::stack::preserves_observed;
    use crate::stochastic::{ConditionalMap, MvnParams};
    use nalgebra::{DMatrix, DVector};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn ids(n: usize) -> Column {
        Column::complete(ColumnSpec::continuous("id", Role::UnitId), (0..n).map(|i| i as f64).collect())
    }

    #[test]
    fn complete_continuous_data_is_unchanged() {
        let d = Dataset::new(
            Shape::Wide,
            vec![
                ids(4),
                Column::complete(ColumnSpec::continuous("a", Role::Analysis), vec![1.0, 2.0, 0.5, 3.0]),
                Column::complete(ColumnSpec::continuous("b", Role::Analysis), vec![0.1, 0.4, 0.2, 0.9]),
            ],
        )
        .unwrap();
        let mut spec = JmSpec::new(names(&["a", "b"]));
        spec.nburn = 3;
        spec.nbetween = 2;
        spec.nimp = 2;
        let out = run_jm(&mut RngStream::new(1, 0), &spec, &d).unwrap();
        assert_eq!(out.stack.m(), 2);
        for imp in &out.stack.imputations {
            assert_eq!(imp, &d);
        }
        assert_eq!(out.trace.len(), 5);
        assert_eq!(spec.snapshot_sweeps(), vec![3, 5]);
    }

    /// Bivariate normal sample with one masked cell in `b`.
    fn bivariate(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 9);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let z1 = rng.std_normal();
            let z2 = rng.std_normal();
            a.push(1.0 + z1);
            b.push(-0.5 + 0.8 * z1 + 0.6 * z2);
        }
        let mut bcells: Vec<Option<f64>> = b.into_iter().map(Some).collect();
        bcells[0] = None;
        Dataset::new(
            Shape::Wide,
            vec![
                ids(n),
                Column::complete(ColumnSpec::continuous("a", Role::Analysis), a),
                Column::from_options(ColumnSpec::continuous("b", Role::Analysis), bcells),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_missing_cell_matches_conditional_mean() {
        let d = bivariate(2000, 3);
        // Keep `a` as an outcome so the cell is imputed from the joint model.
        let mut spec = JmSpec::new(names(&["a", "b"]));
        spec.nburn = 200;
        spec.nbetween = 1;
        spec.nimp = 2000;
        let out = run_jm(&mut RngStream::new(5, 0), &spec, &d).unwrap();
        let draws: Vec<f64> = out.stack.imputations.iter().map(|x| x.column("b").unwrap().values()[0]).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // Oracle: plug-in conditional mean from the complete-case moments.
        let a = d.column("a").unwrap().values();
        let b = d.column("b").unwrap().values();
        let rows: Vec<usize> = (1..a.len()).collect();
        let m = rows.len() as f64;
        let ma = rows.iter().map(|&i| a[i]).sum::<f64>() / m;
        let mb = rows.iter().map(|&i| b[i]).sum::<f64>() / m;
        let saa = rows.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / (m - 1.0);
        let sab = rows.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / (m - 1.0);
        let sbb = rows.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / (m - 1.0);
        let params = MvnParams::new(
            DVector::from_vec(vec![ma, mb]),
            DMatrix::from_row_slice(2, 2, &[saa, sab, sab, sbb]),
        )
        .unwrap();
        let map = ConditionalMap::new(&params.cov, &[0]).unwrap();
        let expect = map.mean(&params.mean, &DVector::from_vec(vec![a[0]]))[0];
        let rho = autocorr(&draws, 1).unwrap().max(0.0);
        let mcse = sd / (n * (1.0 - rho) / (1.0 + rho)).sqrt();
        assert!((mean - expect).abs() < 3.0 * mcse, "mean {mean} vs {expect} (mcse {mcse})");
    }

    fn binary_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 4);
        let cells: Vec<Option<f64>> = (0..n)
            .map(|_| {
                let v = f64::from(u8::from(rng.bernoulli(0.7)));
                if rng.bernoulli(0.3) {
                    None
                } else {
                    Some(v)
                }
            })
            .collect();
        Dataset::new(
            Shape::Wide,
            vec![ids(n), Column::from_options(ColumnSpec::new("g", ColumnKind::binary(), Role::Analysis), cells)],
        )
        .unwrap()
    }

    #[test]
    fn binary_marginal_is_preserved() {
        let d = binary_data(2000, 1);
        let mut spec = JmSpec::new(names(&["g"]));
        spec.nburn = 100;
        spec.nbetween = 20;
        spec.nimp = 20;
        let out = run_jm(&mut RngStream::new(2, 0), &spec, &d).unwrap();
        let missing = d.column("g").unwrap().missing();
        let mut ones = 0.0;
        let mut total = 0.0;
        for imp in &out.stack.imputations {
            let v = imp.column("g").unwrap().values();
            for (i, &m) in missing.iter().enumerate() {
                if m {
                    ones += v[i];
                    total += 1.0;
                }
            }
            assert!(preserves_observed(&d, imp));
        }
        let frac = ones / total;
        assert!((frac - 0.7).abs() < 0.03, "ones fraction {frac}");
    }

    #[test]
    fn categorical_and_adaptive_outputs_stay_in_range() {
        let mut rng = RngStream::new(7, 0);
        let n = 300;
        let cat: Vec<Option<f64>> = (0..n)
            .map(|_| (!rng.bernoulli(0.2)).then(|| rng.index(4) as f64))
            .collect();
        let bin: Vec<Option<f64>> = (0..n)
            .map(|_| (!rng.bernoulli(0.2)).then(|| f64::from(u8::from(rng.bernoulli(0.4)))))
            .collect();
        let x: Vec<Option<f64>> = (0..n).map(|_| (!rng.bernoulli(0.2)).then(|| rng.std_normal())).collect();
        let d = Dataset::new(
            Shape::Wide,
            vec![
                ids(n),
                Column::from_options(ColumnSpec::new("c", ColumnKind::categorical(4), Role::Analysis), cat),
                Column::from_options(ColumnSpec::new("b", ColumnKind::binary(), Role::Analysis), bin),
                Column::from_options(ColumnSpec::continuous("x", Role::Analysis), x),
            ],
        )
        .unwrap();
        for adaptive in [false, true] {
            let mut spec = JmSpec::new(names(&["c", "b", "x"]));
            spec.nburn = 30;
            spec.nbetween = 5;
            spec.nimp = 3;
            spec.adaptive_binary = adaptive;
            let out = run_jm(&mut RngStream::new(3, 0), &spec, &d).unwrap();
            assert_eq!(out.stack.first_altered(), None);
            for imp in &out.stack.imputations {
                assert!(imp.is_complete());
                assert!(imp.column("b").unwrap().values().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    /// Two-level data: `y = 1 + u_c + e` with var(u) = 0.3, var(e) = 0.7.
    fn two_level(clusters: usize, per: usize, seed: u64, missing: f64) -> Dataset {
        let mut rng = RngStream::new(seed, 2);
        let (mut id, mut cl, mut y, mut w) = (vec![], vec![], vec![], vec![]);
        for c in 0..clusters {
            let u = 0.3f64.sqrt() * rng.std_normal();
            let s = (c % 2) as f64;
            for _ in 0..per {
                id.push(id.len() as f64);
                cl.push(c as f64);
                let v = 1.0 + u + 0.7f64.sqrt() * rng.std_normal();
                y.push((!rng.bernoulli(missing)).then_some(v));
                w.push(s);
            }
        }
        let w_cells: Vec<Option<f64>> = w
            .iter()
            .enumerate()
            .map(|(i, &v)| (cl[i] as usize % 5 != 0).then_some(v))
            .collect();
        Dataset::new(
            Shape::Long,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), id),
                Column::complete(ColumnSpec::continuous("school", Role::ClusterId), cl),
                Column::from_options(ColumnSpec::continuous("y", Role::Analysis), y),
                Column::from_options(ColumnSpec::new("w", ColumnKind::binary(), Role::Analysis), w_cells),
            ],
        )
        .unwrap()
    }

    #[test]
    fn two_level_recovers_icc_and_keeps_level2_constant() {
        let d = two_level(60, 20, 11, 0.2);
        let mut spec = JmSpec::new(names(&["y"]));
        spec.y2 = names(&["w"]);
        spec.cluster = Some("school".into());
        spec.nburn = 300;
        spec.nbetween = 10;
        spec.nimp = 3;
        let out = run_jm(&mut RngStream::new(4, 0), &spec, &d).unwrap();
        let psi = out.trace.series("psi[(Intercept)|y,(Intercept)|y]").unwrap();
        let omega = out.trace.series("omega[y,y]").unwrap();
        let icc: f64 = psi
            .iter()
            .zip(&omega)
            .skip(100)
            .map(|(p, o)| p / (p + o))
            .sum::<f64>()
            / (psi.len() - 100) as f64;
        assert!((icc - 0.3).abs() < 0.05, "icc {icc}");
        let school = d.column("school").unwrap().values();
        for imp in &out.stack.imputations {
            assert!(preserves_observed(&d, imp));
            let w = imp.column("w").unwrap().values();
            for i in 0..w.len() {
                for j in 0..w.len() {
                    if school[i] == school[j] {
                        assert_eq!(w[i], w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn cluster_specific_mode_runs_and_needs_clusters() {
        let d = two_level(8, 15, 2, 0.2);
        let mut spec = JmSpec::new(names(&["y"]));
        spec.cluster = Some("school".into());
        spec.cov_mode = CovMode::ClusterSpecific;
        spec.nburn = 20;
        spec.nbetween = 5;
        spec.nimp = 2;
        let out = run_jm(&mut RngStream::new(8, 0), &spec, &d).unwrap();
        assert_eq!(out.stack.first_altered(), None);
        assert!(out.trace.series("omega_scale[y,y]").is_ok());

        let small = two_level(2, 5, 2, 0.2);
        assert!(matches!(run_jm(&mut RngStream::new(8, 0), &spec, &small), Err(Error::TooFewClusters(2))));
    }

    #[test]
    fn zero_random_effects_match_single_level_moments() {
        let d = two_level(30, 10, 5, 0.3);
        let base = {
            let mut s = JmSpec::new(names(&["y"]));
            s.nburn = 50;
            s.nbetween = 1;
            s.nimp = 4000;
            s
        };
        let mut clustered = base.clone();
        clustered.cluster = Some("school".into());
        clustered.fix_psi_zero = true;
        let mean_var = |spec: &JmSpec, seed: u64| {
            let t = run_jm_chain(&mut RngStream::new(seed, 0), spec, &d, 4000).unwrap();
            let b = t.series("beta[(Intercept),y]").unwrap();
            let o = t.series("omega[y,y]").unwrap();
            let m = |v: &[f64]| v[200..].iter().sum::<f64>() / (v.len() - 200) as f64;
            (m(&b), m(&o))
        };
        let (b1, o1) = mean_var(&base, 1);
        let (b2, o2) = mean_var(&clustered, 2);
        assert!((b1 - b2).abs() < 0.02, "{b1} vs {b2}");
        assert!((o1 - o2).abs() / o1 < 0.03, "{o1} vs {o2}");
    }

    #[test]
    fn spec_json_defaults_and_unknown_fields() {
        let s: JmSpec = crate::error::parse_json(r#"{"y": ["a"]}"#).unwrap();
        assert_eq!((s.nburn, s.nbetween), (1000, 1000));
        assert!(crate::error::parse_json::<JmSpec>(r#"{"y": ["a"], "bogus": 1}"#).is_err());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let d = bivariate(20, 1);
        let mut s = JmSpec::new(names(&["b"]));
        s.x = names(&["b"]);
        assert!(matches!(run_jm(&mut RngStream::new(0, 0), &s, &d), Err(Error::InvalidSpec(_))));
        let mut s = JmSpec::new(names(&["a"]));
        s.x = names(&["b"]);
        assert!(matches!(run_jm(&mut RngStream::new(0, 0), &s, &d), Err(Error::IncompleteData(_))));
        let mut s = JmSpec::new(names(&["b"]));
        s.nimp = 0;
        assert!(run_jm(&mut RngStream::new(0, 0), &s, &d).is_err());
    }
}
