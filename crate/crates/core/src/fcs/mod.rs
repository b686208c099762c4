//! Chained-equations (fully conditional specification) imputation.
//!
//! Each incomplete column gets a univariate method and a row of the coded
//! predictor matrix. A chain fills missing cells with random observed
//! values, then cycles `maxit` times over the incomplete columns, redrawing
//! each from its conditional model given the current values of the others.
//! Chains are independent, one per imputation.

mod multilevel;
mod plan;
mod predictor;
mod univariate;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use multilevel::{FIRST_VISIT_SWEEPS, LATER_VISIT_SWEEPS};
pub use predictor::{
    default_predictor_matrix, mtw_predictor_matrix, PredictorMatrix, CLUSTER, CLUSTER_MEAN, EXCLUDED, FIXED,
    RANDOM_SLOPE,
};
pub use crate::rounding::adaptive_round;

use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::stack::ImputedStack;
use crate::stochastic::RngStream;
use plan::{Cells, Engine, Plan, Target};
use univariate::{Ctx, UnitView};

pub const DEFAULT_MAXIT: usize = 10;
pub const DEFAULT_DONORS: usize = 5;

/// Univariate imputation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "norm")]
    Norm,
    #[serde(rename = "logreg")]
    Logreg,
    #[serde(rename = "polr")]
    Polr,
    #[serde(rename = "pmm")]
    Pmm,
    #[serde(rename = "2l.pan")]
    Pan2l,
    #[serde(rename = "2l.latent")]
    Latent2l,
    #[serde(rename = "2l.pmm")]
    Pmm2l,
    #[serde(rename = "2lonly.norm")]
    Norm2lOnly,
    #[serde(rename = "2lonly.pmm")]
    Pmm2lOnly,
    #[serde(rename = "ml.lmer.continuous")]
    LmerContinuous,
    #[serde(rename = "ml.lmer.pmm")]
    LmerPmm,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::None,
        Method::Norm,
        Method::Logreg,
        Method::Polr,
        Method::Pmm,
        Method::Pan2l,
        Method::Latent2l,
        Method::Pmm2l,
        Method::Norm2lOnly,
        Method::Pmm2lOnly,
        Method::LmerContinuous,
        Method::LmerPmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Norm => "norm",
            Method::Logreg => "logreg",
            Method::Polr => "polr",
            Method::Pmm => "pmm",
            Method::Pan2l => "2l.pan",
            Method::Latent2l => "2l.latent",
            Method::Pmm2l => "2l.pmm",
            Method::Norm2lOnly => "2lonly.norm",
            Method::Pmm2lOnly => "2lonly.pmm",
            Method::LmerContinuous => "ml.lmer.continuous",
            Method::LmerPmm => "ml.lmer.pmm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnsupportedMethod(s.to_string()))
    }
}

/// Measurement level and nesting clusters of a column, for the `ml.lmer`
/// methods. `level: None` means the column varies by row; otherwise it is
/// constant within `level` and imputed once per `level` unit. `clusters`
/// lists the random-intercept groupings, innermost first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    pub clusters: Vec<String>,
}

/// What to do when a logistic or ordinal fit separates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparationPolicy {
    /// Warn and impute that column by predictive mean matching.
    #[default]
    Pmm,
    Abort,
}

fn default_maxit() -> usize {
    DEFAULT_MAXIT
}

fn default_m() -> usize {
    5
}

fn default_donors() -> usize {
    DEFAULT_DONORS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcsSpec {
    /// Columns not listed use `none`.
    pub methods: BTreeMap<String, Method>,
    /// Defaults to [`default_predictor_matrix`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor_matrix: Option<PredictorMatrix>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub levels: BTreeMap<String, LevelSpec>,
    #[serde(default = "default_maxit")]
    pub maxit: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Column visit order; defaults to dataset order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit_sequence: Option<Vec<String>>,
    #[serde(default)]
    pub on_separation: SeparationPolicy,
    #[serde(default = "default_donors")]
    pub donors: usize,
}

impl FcsSpec {
    pub fn new(methods: BTreeMap<String, Method>) -> Self {
        FcsSpec {
            methods,
            predictor_matrix: None,
            levels: BTreeMap::new(),
            maxit: DEFAULT_MAXIT,
            m: default_m(),
            seed: None,
            visit_sequence: None,
            on_separation: SeparationPolicy::default(),
            donors: DEFAULT_DONORS,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::error::parse_json(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maxit == 0 {
            return Err(Error::InvalidSpec("maxit must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidSpec("m must be at least 1".into()));
        }
        if self.donors == 0 {
            return Err(Error::InvalidSpec("donors must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-kind defaults for incomplete columns: `pmm` for continuous, `logreg`
/// for binary, `polr` for categorical. Complete columns get `none`.
pub fn default_methods(d: &Dataset) -> BTreeMap<String, Method> {
    d.columns()
        .iter()
        .map(|c| {
            let m = if !c.has_missing() {
                Method::None
            } else {
                match c.spec().kind {
                    ColumnKind::Continuous => Method::Pmm,
                    ColumnKind::Binary { .. } => Method::Logreg,
                    ColumnKind::Categorical { .. } => Method::Polr,
                }
            };
            (c.name().to_string(), m)
        })
        .collect()
}

/// Mean and standard deviation of the imputed cells of one column after one
/// iteration of one chain. Chains and iterations count from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStat {
    pub chain: usize,
    pub iteration: usize,
    pub column: String,
    pub mean: f64,
    /// NaN with fewer than two imputed cells.
    pub sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainStats {
    pub rows: Vec<ChainStat>,
}

impl ChainStats {
    /// `(mean, sd)` per iteration for one chain and column.
    pub fn series(&self, chain: usize, column: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.chain == chain && r.column == column)
            .map(|r| (r.mean, r.sd))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iteration", "column", "mean", "sd"])?;
        let num = |v: f64| if v.is_nan() { "NA".to_string() } else { v.to_string() };
        for r in &self.rows {
            w.write_record([
                r.chain.to_string(),
                r.iteration.to_string(),
                r.column.clone(),
                num(r.mean),
                num(r.sd),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let bad = |what: &str| Error::InvalidDataset(format!("chain statistics: bad {what}"));
        let num = |s: &str| -> Result<f64> {
            if s == "NA" {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| bad("number"))
            }
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(bad("record length"));
            }
            rows.push(ChainStat {
                chain: rec[0].parse().map_err(|_| bad("chain"))?,
                iteration: rec[1].parse().map_err(|_| bad("iteration"))?,
                column: rec[2].to_string(),
                mean: num(&rec[3])?,
                sd: num(&rec[4])?,
            });
        }
        Ok(ChainStats { rows })
    }
}

#[derive(Debug, Clone)]
pub struct FcsOutput {
    pub stack: ImputedStack,
    pub stats: ChainStats,
}

/// State a target carries between visits within a chain.
type VisitState = Option<multilevel::PanState>;

fn visit(rng: &mut RngStream, t: &Target, ctx: Ctx, cur: &Cells, state: &mut VisitState) -> Result<Vec<(usize, f64)>> {
    match &t.engine {
        Engine::Norm | Engine::Logreg | Engine::Polr { .. } | Engine::Pmm => {
            let view = UnitView::new(t, t.design(cur), cur, None);
            let (xo, yo, xm) = view.split();
            let values = match t.engine {
                Engine::Norm => univariate::norm(rng, &xo, &yo, &xm)?,
                Engine::Pmm => univariate::pmm(rng, &xo, &yo, &xm, ctx.donors)?,
                Engine::Logreg => univariate::with_fallback(rng, ctx, &t.name, &xo, &yo, &xm, |r| {
                    univariate::logreg(r, &xo, &yo, &xm)
                })?,
                Engine::Polr { n_levels } => univariate::with_fallback(rng, ctx, &t.name, &xo, &yo, &xm, |r| {
                    univariate::polr(r, &xo, &yo, &xm, n_levels)
                })?,
                _ => unreachable!(),
            };
            Ok(view.fills(&values))
        }
        Engine::ClusterOnly { pmm } => {
            let view = UnitView::new(t, t.design(cur), cur, t.cluster.as_ref());
            if view.mis.is_empty() {
                return Ok(view.fills(&[]));
            }
            let (xo, yo, xm) = view.split();
            let values = if *pmm {
                univariate::pmm(rng, &xo, &yo, &xm, ctx.donors)?
            } else {
                univariate::norm(rng, &xo, &yo, &xm)?
            };
            Ok(view.fills(&values))
        }
        Engine::Pan { latent } => multilevel::pan(rng, t, *latent, cur, state),
        Engine::Lmm {
            pmm,
            units,
            inner,
            outer,
        } => multilevel::lmm(rng, t, *pmm, units.as_ref(), inner, outer.as_deref(), cur, ctx.donors),
    }
}

/// Fill each missing cell (or each missing unit, for cluster-level targets)
/// with a uniform draw from the column's observed values.
fn initialize(rng: &mut RngStream, t: &Target, cur: &mut Cells) {
    let col = &mut cur[t.col];
    let pool: Vec<f64> = t.observed.iter().map(|&r| col[r]).collect();
    match t.units() {
        None => {
            for &r in &t.missing {
                col[r] = pool[rng.index(pool.len())];
            }
        }
        Some(g) => {
            let mut missing = vec![false; col.len()];
            for &r in &t.missing {
                missing[r] = true;
            }
            for rows in &g.rows {
                let value = match rows.iter().find(|&&r| !missing[r]) {
                    Some(&r) => col[r],
                    None => pool[rng.index(pool.len())],
                };
                for &r in rows.iter().filter(|&&r| missing[r]) {
                    col[r] = value;
                }
            }
        }
    }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        f64::NAN
    } else {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, sd)
}

fn run_chain(rng: &mut RngStream, plan: &Plan, spec: &FcsSpec, d: &Dataset, chain: usize) -> Result<(Dataset, Vec<ChainStat>)> {
    let ctx = Ctx {
        donors: spec.donors,
        on_separation: spec.on_separation,
    };
    let mut cur: Cells = d.columns().iter().map(|c| c.values().to_vec()).collect();
    for t in &plan.targets {
        initialize(rng, t, &mut cur);
    }
    let mut states: Vec<VisitState> = vec![None; plan.targets.len()];
    let mut stats = Vec::with_capacity(spec.maxit * plan.targets.len());
    for iteration in 1..=spec.maxit {
        for &ti in &plan.visits {
            let t = &plan.targets[ti];
            let fills = visit(rng, t, ctx, &cur, &mut states[ti]).map_err(|e| Error::ChainFailed {
                chain,
                column: t.name.clone(),
                source: Box::new(e),
            })?;
            for (r, v) in fills {
                cur[t.col][r] = v;
            }
        }
        for t in &plan.targets {
            let (mean, sd) = mean_sd(t.missing.iter().map(|&r| cur[t.col][r]));
            stats.push(ChainStat {
                chain,
                iteration,
                column: t.name.clone(),
                mean,
                sd,
            });
        }
    }
    let fills = plan
        .targets
        .iter()
        .flat_map(|t| t.missing.iter().map(|&r| (t.col, r, cur[t.col][r])).collect::<Vec<_>>());
    Ok((d.with_fills(fills)?, stats))
}

/// Run `spec.m` independent chains; chain `i` (1-based) draws from
/// `rng.derive(i)`, so results do not depend on the execution schedule.
pub fn run_fcs(rng: &RngStream, d: &Dataset, spec: &FcsSpec, exec: Execution) -> Result<FcsOutput> {
    let plan = Plan::bind(spec, d)?;
    let chains = try_map_indexed(spec.m, exec, |i| {
        let chain = i + 1;
        let mut r = rng.derive(chain as u64);
        run_chain(&mut r, &plan, spec, d, chain)
    })?;
    let mut imputations = Vec::with_capacity(spec.m);
    let mut stats = ChainStats::default();
    for (imp, rows) in chains {
        imputations.push(imp);
        stats.rows.extend(rows);
    }
    Ok(FcsOutput {
        stack: ImputedStack::new(d.clone(), imputations),
        stats,
    })
}
