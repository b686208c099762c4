//! Named imputation recipes for panel data with an optional higher-level
//! cluster: each builds a joint-model or chained-equation spec from a long
//! dataset, runs it and returns completed datasets in long layout.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{dummy_expand, reshape_long_to_wide, reshape_wide_to_long, Column, ColumnKind, Dataset, ReshapeMap, Role};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fcs::{
    default_predictor_matrix, mtw_predictor_matrix, run_fcs, ChainStats, FcsSpec, LevelSpec, Method, PredictorMatrix,
    SeparationPolicy, CLUSTER, CLUSTER_MEAN, EXCLUDED, FIXED, RANDOM_SLOPE,
};
use crate::jm::{run_jm, ChainTrace, CovMode, JmSpec};
use crate::stack::ImputedStack;
use crate::stochastic::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Recipe {
    #[serde(rename = "jm-1l-wide")]
    Jm1lWide,
    #[serde(rename = "fcs-1l-wide")]
    Fcs1lWide,
    #[serde(rename = "fcs-1l-wide-mtw")]
    Fcs1lWideMtw,
    #[serde(rename = "jm-2l")]
    Jm2l,
    #[serde(rename = "fcs-2l")]
    Fcs2l,
    #[serde(rename = "jm-1l-di-wide")]
    Jm1lDiWide,
    #[serde(rename = "fcs-1l-di-wide")]
    Fcs1lDiWide,
    #[serde(rename = "jm-2l-wide")]
    Jm2lWide,
    #[serde(rename = "fcs-2l-wide")]
    Fcs2lWide,
    #[serde(rename = "jm-2l-di")]
    Jm2lDi,
    #[serde(rename = "fcs-2l-di")]
    Fcs2lDi,
    #[serde(rename = "fcs-3l")]
    Fcs3l,
}

impl Recipe {
    pub const ALL: [Recipe; 12] = [
        Recipe::Jm1lWide,
        Recipe::Fcs1lWide,
        Recipe::Fcs1lWideMtw,
        Recipe::Jm2l,
        Recipe::Fcs2l,
        Recipe::Jm1lDiWide,
        Recipe::Fcs1lDiWide,
        Recipe::Jm2lWide,
        Recipe::Fcs2lWide,
        Recipe::Jm2lDi,
        Recipe::Fcs2lDi,
        Recipe::Fcs3l,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Jm1lWide => "jm-1l-wide",
            Recipe::Fcs1lWide => "fcs-1l-wide",
            Recipe::Fcs1lWideMtw => "fcs-1l-wide-mtw",
            Recipe::Jm2l => "jm-2l",
            Recipe::Fcs2l => "fcs-2l",
            Recipe::Jm1lDiWide => "jm-1l-di-wide",
            Recipe::Fcs1lDiWide => "fcs-1l-di-wide",
            Recipe::Jm2lWide => "jm-2l-wide",
            Recipe::Fcs2lWide => "fcs-2l-wide",
            Recipe::Jm2lDi => "jm-2l-di",
            Recipe::Fcs2lDi => "fcs-2l-di",
            Recipe::Fcs3l => "fcs-3l",
        }
    }

    pub fn is_wide(self) -> bool {
        matches!(
            self,
            Recipe::Jm1lWide
                | Recipe::Fcs1lWide
                | Recipe::Fcs1lWideMtw
                | Recipe::Jm1lDiWide
                | Recipe::Fcs1lDiWide
                | Recipe::Jm2lWide
                | Recipe::Fcs2lWide
        )
    }

    pub fn is_joint(self) -> bool {
        matches!(
            self,
            Recipe::Jm1lWide | Recipe::Jm2l | Recipe::Jm1lDiWide | Recipe::Jm2lWide | Recipe::Jm2lDi
        )
    }

    /// Whether the recipe models the higher-level cluster at all.
    pub fn models_clusters(self) -> bool {
        !matches!(
            self,
            Recipe::Jm1lWide | Recipe::Fcs1lWide | Recipe::Fcs1lWideMtw | Recipe::Jm2l | Recipe::Fcs2l
        )
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        if key == "jm-3l" {
            return Err(Error::UnsupportedMethod(
                "jm-3l: a joint model with random effects at both the unit and cluster level is not implemented; \
                 use fcs-3l, jm-2l-wide or jm-2l-di"
                    .into(),
            ));
        }
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == key)
            .ok_or_else(|| Error::UnsupportedMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeOptions {
    pub m: usize,
    pub maxit: usize,
    pub nburn: usize,
    pub nbetween: usize,
    /// Half-width of the moving time window, in waves.
    pub window: usize,
    pub donors: usize,
    pub on_separation: SeparationPolicy,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        ImputeOptions {
            m: 5,
            maxit: crate::fcs::DEFAULT_MAXIT,
            nburn: crate::jm::DEFAULT_NBURN,
            nbetween: crate::jm::DEFAULT_NBETWEEN,
            window: 1,
            donors: crate::fcs::DEFAULT_DONORS,
            on_separation: SeparationPolicy::Pmm,
        }
    }
}

/// The spec a recipe resolved to, kept for the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum BuiltSpec {
    Jm(JmSpec),
    Fcs(FcsSpec),
}

/// Dataset handed to the imputer, plus columns added only for imputation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub recipe: Recipe,
    pub data: Dataset,
    pub spec: BuiltSpec,
    pub added: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RecipeOutput {
    /// Completed datasets in long layout, with the long original.
    pub stack: ImputedStack,
    pub trace: Option<ChainTrace>,
    pub stats: Option<ChainStats>,
    pub spec: BuiltSpec,
}

/// Structural columns of a long panel dataset.
struct Layout<'a> {
    unit: String,
    cluster: Option<String>,
    time: String,
    map: &'a ReshapeMap,
}

impl<'a> Layout<'a> {
    fn of(d: &Dataset, map: &'a ReshapeMap) -> Result<Self> {
        let cluster = d.columns_with_role(Role::ClusterId).next().map(|c| c.name().to_string());
        let time = d
            .time()
            .map(|c| c.name().to_string())
            .ok_or_else(|| Error::InvalidDataset("recipes need a long dataset with a time column".into()))?;
        if time != map.time_column {
            return Err(Error::InvalidDataset(format!(
                "time column `{time}` does not match the reshape map (`{}`)",
                map.time_column
            )));
        }
        Ok(Layout {
            unit: d.unit_id().name().to_string(),
            cluster,
            time,
            map,
        })
    }

    fn cluster(&self, r: Recipe) -> Result<&str> {
        self.cluster
            .as_deref()
            .ok_or_else(|| Error::InvalidSpec(format!("{r} needs a cluster-id column")))
    }

    fn is_varying(&self, name: &str) -> bool {
        self.map.stubs.iter().any(|s| s == name)
    }
}

fn is_variable(c: &Column) -> bool {
    matches!(c.spec().role, Role::Analysis | Role::Auxiliary)
}

fn names_where(d: &Dataset, f: impl Fn(&Column) -> bool) -> Vec<String> {
    d.columns()
        .iter()
        .filter(|c| is_variable(c) && f(c))
        .map(|c| c.name().to_string())
        .collect()
}

/// Append reference-coded indicators of `col` without removing it.
fn with_indicators(d: &Dataset, col: &str) -> Result<(Dataset, Vec<String>)> {
    let expanded = dummy_expand(d, col, true)?;
    let existing: Vec<&str> = d.names();
    let added: Vec<Column> = expanded
        .columns()
        .iter()
        .filter(|c| !existing.contains(&c.name()))
        .cloned()
        .collect();
    let names = added.iter().map(|c| c.name().to_string()).collect();
    let mut cols = d.columns().to_vec();
    cols.extend(added);
    Ok((d.with_columns(cols)?, names))
}

fn drop_columns(d: &Dataset, names: &[String]) -> Result<Dataset> {
    if names.is_empty() {
        return Ok(d.clone());
    }
    d.with_columns(d.columns().iter().filter(|c| !names.iter().any(|n| n == c.name())).cloned().collect())
}

fn is_balanced(d: &Dataset, layout: &Layout) -> bool {
    let units: std::collections::BTreeSet<u64> = d.unit_id().values().iter().map(|v| v.to_bits()).collect();
    d.n_rows() == units.len() * layout.map.times.len()
}

fn jm_base(opts: &ImputeOptions, y: Vec<String>) -> JmSpec {
    JmSpec {
        nburn: opts.nburn,
        nbetween: opts.nbetween,
        nimp: opts.m,
        ..JmSpec::new(y)
    }
}

fn fcs_base(opts: &ImputeOptions, methods: BTreeMap<String, Method>, pred: PredictorMatrix) -> FcsSpec {
    FcsSpec {
        predictor_matrix: Some(pred),
        maxit: opts.maxit,
        m: opts.m,
        on_separation: opts.on_separation,
        donors: opts.donors,
        ..FcsSpec::new(methods)
    }
}

/// Per-kind methods for the incomplete variables of `d`.
fn methods_by_kind(d: &Dataset, mut pick: impl FnMut(&Column) -> Method) -> BTreeMap<String, Method> {
    d.columns()
        .iter()
        .filter(|c| is_variable(c) && c.has_missing())
        .map(|c| (c.name().to_string(), pick(c)))
        .collect()
}

fn single_level(c: &Column) -> Method {
    match c.spec().kind {
        ColumnKind::Continuous => Method::Norm,
        ColumnKind::Binary { .. } => Method::Logreg,
        ColumnKind::Categorical { .. } => Method::Polr,
    }
}

/// Resolve a recipe against a long dataset.
pub fn prepare(recipe: Recipe, long: &Dataset, map: &ReshapeMap, opts: &ImputeOptions) -> Result<Prepared> {
    let layout = Layout::of(long, map)?;
    if recipe == Recipe::Fcs2lDi {
        log::warn!(
            "{recipe}: chained mixed models with cluster indicators often fail to converge when clusters are sparse"
        );
    }
    let d = if recipe.is_wide() {
        if !is_balanced(long, &layout) {
            log::warn!("UnbalancedDataForWideMethod: {recipe} marks absent waves as missing and imputes them");
        }
        reshape_long_to_wide(long, map)?
    } else {
        long.clone()
    };
    let unit = layout.unit.as_str();
    let mut added = Vec::new();
    let spec = match recipe {
        Recipe::Jm1lWide | Recipe::Jm1lDiWide | Recipe::Jm2lWide => {
            let mut d2 = d.clone();
            let mut x = names_where(&d, |c| !c.has_missing());
            if recipe == Recipe::Jm1lDiWide {
                let (dd, names) = with_indicators(&d, layout.cluster(recipe)?)?;
                d2 = dd;
                x.extend(names.iter().cloned());
                added = names;
            }
            let mut s = jm_base(opts, names_where(&d, Column::has_missing));
            s.x = x;
            if recipe == Recipe::Jm2lWide {
                s.cluster = Some(layout.cluster(recipe)?.to_string());
                s.cov_mode = CovMode::ClusterSpecific;
            }
            return Ok(Prepared {
                recipe,
                data: d2,
                spec: BuiltSpec::Jm(s),
                added,
            });
        }
        Recipe::Jm2l | Recipe::Jm2lDi => {
            let varying = |c: &Column| layout.is_varying(c.name());
            let mut s = jm_base(opts, names_where(&d, |c| c.has_missing() && varying(c)));
            s.y2 = names_where(&d, |c| c.has_missing() && !varying(c));
            s.x = names_where(&d, |c| !c.has_missing());
            s.x.push(layout.time.clone());
            s.x2 = names_where(&d, |c| !c.has_missing() && !varying(c));
            s.z = vec![layout.time.clone()];
            s.cluster = Some(unit.to_string());
            let mut d2 = d.clone();
            if recipe == Recipe::Jm2lDi {
                let (dd, names) = with_indicators(&d, layout.cluster(recipe)?)?;
                d2 = dd;
                s.x.extend(names.iter().cloned());
                s.x2.extend(names.iter().cloned());
                s.cov_mode = CovMode::ClusterSpecific;
                added = names;
            }
            return Ok(Prepared {
                recipe,
                data: d2,
                spec: BuiltSpec::Jm(s),
                added,
            });
        }
        Recipe::Fcs1lWide | Recipe::Fcs1lDiWide | Recipe::Fcs1lWideMtw => {
            let mut pred = if recipe == Recipe::Fcs1lWideMtw {
                let anchors = baseline_anchors(&d, map);
                let anchors: Vec<(&str, i64)> = anchors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
                mtw_predictor_matrix(&d, map, opts.window, &anchors)?
            } else {
                default_predictor_matrix(&d)
            };
            pred.set_column(unit, EXCLUDED)?;
            if let Some(c) = &layout.cluster {
                // Indicators of the cluster enter as predictors in the DI variant.
                let code = if recipe == Recipe::Fcs1lDiWide { FIXED } else { EXCLUDED };
                pred.set_column(c, code)?;
            } else if recipe == Recipe::Fcs1lDiWide {
                return Err(Error::InvalidSpec(format!("{recipe} needs a cluster-id column")));
            }
            fcs_base(opts, methods_by_kind(&d, single_level), pred)
        }
        Recipe::Fcs2l | Recipe::Fcs2lDi => {
            let methods = methods_by_kind(&d, |c| {
                let varying = layout.is_varying(c.name());
                match (&c.spec().kind, varying) {
                    (ColumnKind::Continuous, true) => Method::Pan2l,
                    (ColumnKind::Binary { .. }, true) => Method::Latent2l,
                    (ColumnKind::Categorical { .. }, true) => Method::Pmm2l,
                    (ColumnKind::Continuous, false) => Method::Norm2lOnly,
                    (_, false) => Method::Pmm2lOnly,
                }
            });
            let mut pred = default_predictor_matrix(&d);
            let di = recipe == Recipe::Fcs2lDi;
            if let Some(c) = &layout.cluster {
                pred.set_column(c, if di { FIXED } else { EXCLUDED })?;
            } else if di {
                return Err(Error::InvalidSpec(format!("{recipe} needs a cluster-id column")));
            }
            pred.set_column(unit, CLUSTER)?;
            let varying_predictors = names_where(&d, |c| layout.is_varying(c.name()));
            for name in methods.keys() {
                if layout.is_varying(name) {
                    pred.set(name, &layout.time, RANDOM_SLOPE)?;
                    for p in &varying_predictors {
                        if p != name {
                            pred.set(name, p, CLUSTER_MEAN)?;
                        }
                    }
                } else {
                    pred.set(name, &layout.time, EXCLUDED)?;
                }
            }
            fcs_base(opts, methods, pred)
        }
        Recipe::Fcs2lWide => {
            let cluster = layout.cluster(recipe)?;
            let methods = methods_by_kind(&d, |c| match c.spec().kind {
                ColumnKind::Continuous => Method::Pan2l,
                ColumnKind::Binary { .. } => Method::Latent2l,
                ColumnKind::Categorical { .. } => Method::Pmm2l,
            });
            let mut pred = default_predictor_matrix(&d);
            pred.set_column(unit, EXCLUDED)?;
            pred.set_column(cluster, CLUSTER)?;
            fcs_base(opts, methods, pred)
        }
        Recipe::Fcs3l => {
            let cluster = layout.cluster(recipe)?.to_string();
            let mut levels = BTreeMap::new();
            let methods = methods_by_kind(&d, |c| {
                let varying = layout.is_varying(c.name());
                levels.insert(
                    c.name().to_string(),
                    if varying {
                        LevelSpec {
                            level: None,
                            clusters: vec![unit.to_string(), cluster.clone()],
                        }
                    } else {
                        LevelSpec {
                            level: Some(unit.to_string()),
                            clusters: vec![cluster.clone()],
                        }
                    },
                );
                match c.spec().kind {
                    ColumnKind::Continuous => Method::LmerContinuous,
                    _ => Method::LmerPmm,
                }
            });
            let mut pred = default_predictor_matrix(&d);
            pred.set_column(unit, EXCLUDED)?;
            pred.set_column(&cluster, EXCLUDED)?;
            for name in methods.keys().filter(|n| !layout.is_varying(n)) {
                pred.set(name, &layout.time, EXCLUDED)?;
            }
            let mut s = fcs_base(opts, methods, pred);
            s.levels = levels;
            s
        }
    };
    Ok(Prepared {
        recipe,
        data: d,
        spec: BuiltSpec::Fcs(spec),
        added,
    })
}

/// Time-fixed continuous variables measured before the first wave (named
/// with a `w1` suffix) are pinned to wave 1 for the moving window.
fn baseline_anchors(d: &Dataset, map: &ReshapeMap) -> Vec<(String, i64)> {
    let first = map.times.iter().copied().min().unwrap_or(1);
    d.columns()
        .iter()
        .filter(|c| is_variable(c) && map.fixed.iter().any(|f| f == c.name()))
        .filter_map(|c| {
            let lower = c.name().to_ascii_lowercase();
            let (_, suffix) = lower.rsplit_once('w')?;
            let t: i64 = suffix.parse().ok()?;
            (t < first).then(|| (c.name().to_string(), t))
        })
        .collect()
}

/// Run a prepared recipe. Joint models use stream 0 of `seed`; chained
/// equations derive one stream per imputation from it.
pub fn run_prepared(p: &Prepared, long: &Dataset, map: &ReshapeMap, seed: u64, exec: Execution) -> Result<RecipeOutput> {
    let rng = RngStream::new(seed, 0);
    let (stack, trace, stats) = match &p.spec {
        BuiltSpec::Jm(s) => {
            let mut rng = rng;
            let out = run_jm(&mut rng, s, &p.data)?;
            (out.stack, Some(out.trace), None)
        }
        BuiltSpec::Fcs(s) => {
            let out = run_fcs(&rng, &p.data, s, exec)?;
            (out.stack, None, Some(out.stats))
        }
    };
    let names: Vec<&str> = long.names();
    let to_long = |d: &Dataset| -> Result<Dataset> {
        let d = drop_columns(d, &p.added)?;
        if p.recipe.is_wide() {
            reshape_wide_to_long(&d, map)?.reorder(&names)
        } else {
            Ok(d)
        }
    };
    let original = if p.recipe.is_wide() { to_long(&stack.original)? } else { long.clone() };
    let imputations = stack.imputations.iter().map(to_long).collect::<Result<Vec<_>>>()?;
    Ok(RecipeOutput {
        stack: ImputedStack::new(original, imputations),
        trace,
        stats,
        spec: p.spec.clone(),
    })
}

pub fn run_recipe(
    recipe: Recipe,
    long: &Dataset,
    map: &ReshapeMap,
    opts: &ImputeOptions,
    seed: u64,
    exec: Execution,
) -> Result<RecipeOutput> {
    let p = prepare(recipe, long, map, opts)?;
    run_prepared(&p, long, map, seed, exec)
}
