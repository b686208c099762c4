//! Binding a chained-equations spec to a dataset: per-target designs,
//! groupings and engines.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::predictor::{PredictorMatrix, CLUSTER, CLUSTER_MEAN, EXCLUDED, RANDOM_SLOPE};
use super::{default_predictor_matrix, FcsSpec, Method};
use crate::data::{ColumnKind, Dataset, Role};
use crate::error::{Error, Result};

/// Current cell values, `cur[col][row]`.
pub(crate) type Cells = Vec<Vec<f64>>;

/// One numeric design column derived from a dataset column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Source {
    Value(usize),
    /// 1 when the column equals the given value.
    Indicator(usize, f64),
}

impl Source {
    fn at(self, cur: &Cells, row: usize) -> f64 {
        match self {
            Source::Value(c) => cur[c][row],
            Source::Indicator(c, v) => f64::from(u8::from(cur[c][row] == v)),
        }
    }
}

/// Rows grouped by an integer label; groups in ascending label order.
#[derive(Debug, Clone)]
pub(crate) struct Grouping {
    pub of_row: Vec<usize>,
    pub labels: Vec<i64>,
    pub rows: Vec<Vec<usize>>,
}

impl Grouping {
    pub fn from_values(values: &[f64]) -> Self {
        let mut by: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (r, &v) in values.iter().enumerate() {
            by.entry(v as i64).or_default().push(r);
        }
        let mut of_row = vec![0; values.len()];
        let mut labels = Vec::with_capacity(by.len());
        let mut rows = Vec::with_capacity(by.len());
        for (g, (label, members)) in by.into_iter().enumerate() {
            for &r in &members {
                of_row[r] = g;
            }
            labels.push(label);
            rows.push(members);
        }
        Grouping { of_row, labels, rows }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Group means of every column of `x`.
    pub fn aggregate(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), x.ncols(), |g, j| {
            let rows = &self.rows[g];
            rows.iter().map(|&r| x[(r, j)]).sum::<f64>() / rows.len() as f64
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Engine {
    Norm,
    Logreg,
    Polr { n_levels: usize },
    Pmm,
    /// Cluster-level target imputed from cluster-mean predictors.
    ClusterOnly { pmm: bool },
    /// Gibbs-sampled mixed model, optionally on a latent probit scale.
    Pan { latent: bool },
    /// Nested random-intercept model fitted by REML. `units` aggregates rows
    /// for cluster-level targets; `inner`/`outer` label each unit.
    Lmm {
        pmm: bool,
        units: Option<Grouping>,
        inner: Vec<i64>,
        outer: Option<Vec<i64>>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Target {
    pub col: usize,
    pub name: String,
    pub engine: Engine,
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
    pub fixed: Vec<Source>,
    pub means: Vec<Source>,
    pub slopes: Vec<Source>,
    /// Grouping by the row's `-2` column.
    pub cluster: Option<Grouping>,
}

impl Target {
    /// Intercept, fixed predictors, then cluster means.
    pub fn design(&self, cur: &Cells) -> DMatrix<f64> {
        let n = cur[self.col].len();
        let p = 1 + self.fixed.len() + self.means.len();
        let mut x = DMatrix::zeros(n, p);
        x.column_mut(0).fill(1.0);
        for (j, s) in self.fixed.iter().enumerate() {
            for r in 0..n {
                x[(r, 1 + j)] = s.at(cur, r);
            }
        }
        if let Some(g) = &self.cluster {
            let off = 1 + self.fixed.len();
            for (j, s) in self.means.iter().enumerate() {
                for rows in &g.rows {
                    let mean = rows.iter().map(|&r| s.at(cur, r)).sum::<f64>() / rows.len() as f64;
                    for &r in rows {
                        x[(r, off + j)] = mean;
                    }
                }
            }
        }
        x
    }

    /// Random-effects design: intercept plus slope columns.
    pub fn random_design(&self, cur: &Cells) -> DMatrix<f64> {
        let n = cur[self.col].len();
        DMatrix::from_fn(n, 1 + self.slopes.len(), |r, j| {
            if j == 0 {
                1.0
            } else {
                self.slopes[j - 1].at(cur, r)
            }
        })
    }

    /// Units that carry one imputed value shared by all their rows.
    pub fn units(&self) -> Option<&Grouping> {
        match &self.engine {
            Engine::ClusterOnly { .. } => self.cluster.as_ref(),
            Engine::Lmm { units, .. } => units.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub targets: Vec<Target>,
    /// Indices into `targets`.
    pub visits: Vec<usize>,
}

fn kind_allows(method: Method, kind: &ColumnKind) -> bool {
    use Method::*;
    match method {
        None | Pmm | Pmm2l | Pmm2lOnly | LmerPmm => true,
        Norm | Pan2l | Norm2lOnly | LmerContinuous => matches!(kind, ColumnKind::Continuous),
        Logreg | Latent2l => matches!(kind, ColumnKind::Binary { .. }),
        Polr => kind.is_discrete(),
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidSpec(msg)
}

/// True when every observed value of `col` is the same within each group.
fn constant_within(d: &Dataset, col: usize, g: &Grouping) -> bool {
    g.rows.iter().all(|rows| {
        let mut vals = rows.iter().filter_map(|&r| d.get(r, col));
        match vals.next() {
            Some(first) => vals.all(|v| v == first),
            Option::None => true,
        }
    })
}

fn grouping_of(d: &Dataset, name: &str, target: &str) -> Result<Grouping> {
    let c = d.column(name)?;
    if c.has_missing() {
        return Err(invalid(format!("cluster variable `{name}` for `{target}` has missing cells")));
    }
    Ok(Grouping::from_values(c.values()))
}

/// Design sources for one predictor column.
fn expand(d: &Dataset, col: usize) -> Vec<Source> {
    let c = &d.columns()[col];
    match &c.spec().kind {
        ColumnKind::Categorical { levels } => (1..levels.len()).map(|k| Source::Indicator(col, k as f64)).collect(),
        _ if c.spec().role == Role::ClusterId => {
            let mut vals: Vec<i64> = c.values().iter().map(|&v| v as i64).collect();
            vals.sort_unstable();
            vals.dedup();
            vals.into_iter().skip(1).map(|v| Source::Indicator(col, v as f64)).collect()
        }
        _ => vec![Source::Value(col)],
    }
}

impl Plan {
    pub fn bind(spec: &FcsSpec, d: &Dataset) -> Result<Plan> {
        spec.validate()?;
        let pm: PredictorMatrix = match &spec.predictor_matrix {
            Some(m) => m.aligned(d)?,
            Option::None => default_predictor_matrix(d),
        };
        for name in spec.methods.keys().chain(spec.levels.keys()) {
            d.index_of(name)?;
        }
        let mut method = vec![Method::None; d.n_cols()];
        for (name, &m) in &spec.methods {
            let col = d.index_of(name)?;
            if m != Method::None && !d.columns()[col].has_missing() {
                log::warn!("`{name}` is complete; method {m} ignored");
                continue;
            }
            method[col] = m;
        }

        let mut targets = Vec::new();
        let mut target_of_col = vec![Option::None; d.n_cols()];
        for (col, c) in d.columns().iter().enumerate() {
            let m = method[col];
            if m == Method::None {
                continue;
            }
            let name = c.name();
            if !kind_allows(m, &c.spec().kind) {
                return Err(invalid(format!("method {m} does not suit the kind of `{name}`")));
            }
            if c.n_missing() == c.len() {
                return Err(invalid(format!("`{name}` has no observed values")));
            }
            target_of_col[col] = Some(targets.len());
            targets.push(bind_target(spec, d, &pm, &method, col, m)?);
        }

        let visits = match &spec.visit_sequence {
            Option::None => (0..targets.len()).collect(),
            Some(seq) => {
                let mut v = Vec::with_capacity(seq.len());
                for name in seq {
                    let col = d.index_of(name)?;
                    v.push(target_of_col[col].ok_or_else(|| {
                        invalid(format!("visit sequence names `{name}`, which is not imputed"))
                    })?);
                }
                if let Some(t) = targets.iter().enumerate().find(|(i, _)| !v.contains(i)) {
                    return Err(invalid(format!("visit sequence omits `{}`", t.1.name)));
                }
                v
            }
        };
        Ok(Plan { targets, visits })
    }
}

fn bind_target(
    spec: &FcsSpec,
    d: &Dataset,
    pm: &PredictorMatrix,
    method: &[Method],
    col: usize,
    m: Method,
) -> Result<Target> {
    let c = &d.columns()[col];
    let name = c.name();
    let row = pm.row(name)?;
    let (mut fixed, mut means, mut slopes) = (Vec::new(), Vec::new(), Vec::new());
    let mut cluster_col = Option::None;
    for (p, &code) in row.iter().enumerate() {
        if code == EXCLUDED {
            continue;
        }
        let pc = &d.columns()[p];
        if code == CLUSTER {
            cluster_col = Some(p);
            continue;
        }
        if pc.has_missing() && method[p] == Method::None {
            return Err(invalid(format!(
                "`{}` predicts `{name}` but is incomplete and not imputed",
                pc.name()
            )));
        }
        let src = expand(d, p);
        if code == RANDOM_SLOPE {
            if !matches!(m, Method::Pan2l | Method::Latent2l) {
                return Err(invalid(format!("random slope on `{}` needs a 2l.pan or 2l.latent row", pc.name())));
            }
            slopes.extend(&src);
        }
        if code == CLUSTER_MEAN {
            if !matches!(m, Method::Pan2l | Method::Latent2l | Method::Pmm2l) {
                return Err(invalid(format!("cluster mean of `{}` needs a two-level row", pc.name())));
            }
            means.extend(&src);
        }
        fixed.extend(src);
    }

    let needs_cluster = matches!(
        m,
        Method::Pan2l | Method::Latent2l | Method::Pmm2l | Method::Norm2lOnly | Method::Pmm2lOnly
    );
    if needs_cluster && cluster_col.is_none() {
        return Err(invalid(format!("method {m} for `{name}` needs a cluster variable (code -2)")));
    }
    if !needs_cluster && cluster_col.is_some() {
        return Err(invalid(format!("method {m} for `{name}` does not take a cluster variable")));
    }
    let cluster = cluster_col
        .map(|g| grouping_of(d, d.columns()[g].name(), name))
        .transpose()?;

    let engine = match m {
        Method::Norm => Engine::Norm,
        Method::Logreg => Engine::Logreg,
        Method::Polr => Engine::Polr {
            n_levels: c.spec().kind.n_levels().expect("discrete"),
        },
        Method::Pmm => Engine::Pmm,
        Method::Pan2l => Engine::Pan { latent: false },
        Method::Latent2l => Engine::Pan { latent: true },
        Method::Norm2lOnly | Method::Pmm2lOnly => {
            if !constant_within(d, col, cluster.as_ref().expect("checked")) {
                return Err(invalid(format!("`{name}` varies within clusters; 2lonly methods need a cluster-level variable")));
            }
            Engine::ClusterOnly {
                pmm: m == Method::Pmm2lOnly,
            }
        }
        Method::Pmm2l => {
            let g = cluster.as_ref().expect("checked");
            Engine::Lmm {
                pmm: true,
                units: Option::None,
                inner: g.of_row.iter().map(|&i| g.labels[i]).collect(),
                outer: Option::None,
            }
        }
        Method::LmerContinuous | Method::LmerPmm => bind_lmer(spec, d, col, m)?,
        Method::None => unreachable!("targets have a method"),
    };

    let (observed, missing): (Vec<usize>, Vec<usize>) = (0..c.len()).partition(|&r| !c.missing()[r]);
    Ok(Target {
        col,
        name: name.to_string(),
        engine,
        observed,
        missing,
        fixed,
        means,
        slopes,
        cluster,
    })
}

fn bind_lmer(spec: &FcsSpec, d: &Dataset, col: usize, m: Method) -> Result<Engine> {
    let name = d.columns()[col].name();
    let lv = spec
        .levels
        .get(name)
        .ok_or_else(|| invalid(format!("method {m} for `{name}` needs a levels entry")))?;
    if lv.clusters.is_empty() || lv.clusters.len() > 2 {
        return Err(invalid(format!("`{name}` must list one or two nesting clusters")));
    }
    let groupings = lv
        .clusters
        .iter()
        .map(|cname| grouping_of(d, cname, name))
        .collect::<Result<Vec<_>>>()?;
    let units = lv.level.as_deref().map(|l| grouping_of(d, l, name)).transpose()?;
    // Label each unit (a row, or a level-cluster) by its clusters.
    let label_units = |g: &Grouping| -> Result<Vec<i64>> {
        match &units {
            Option::None => Ok(g.of_row.iter().map(|&i| g.labels[i]).collect()),
            Some(u) => u
                .rows
                .iter()
                .map(|rows| {
                    let first = g.labels[g.of_row[rows[0]]];
                    if rows.iter().any(|&r| g.labels[g.of_row[r]] != first) {
                        return Err(invalid(format!("`{name}`: measurement units are not nested in the clusters")));
                    }
                    Ok(first)
                })
                .collect(),
        }
    };
    let inner = label_units(&groupings[0])?;
    let outer = groupings.get(1).map(label_units).transpose()?;
    if let Some(o) = &outer {
        let mut seen: BTreeMap<i64, i64> = BTreeMap::new();
        for (&i, &s) in inner.iter().zip(o) {
            if *seen.entry(i).or_insert(s) != s {
                return Err(invalid(format!("`{name}`: `{}` is not nested in `{}`", lv.clusters[0], lv.clusters[1])));
            }
        }
    }
    if let Some(u) = &units {
        if !constant_within(d, col, u) {
            return Err(invalid(format!("`{name}` varies within its measurement level `{}`", lv.level.as_deref().unwrap_or(""))));
        }
    }
    Ok(Engine::Lmm {
        pmm: m == Method::LmerPmm,
        units,
        inner,
        outer,
    })
}
