//! Binding of a [`JmSpec`] to a dataset and the Gibbs sweep of the
//! multivariate (mixed) normal imputation model.
//!
//! Level 1: `y_i = x_i B + z_i U_c + e_i`, `e_i ~ N(0, Ω_c)`.
//! Level 2: `v_c = [vec(U_c), y2_c − x2_c B2] ~ N(0, Ψ)`.
//! Without a cluster variable only the first line remains, with `U = 0`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, RowDVector};

use super::latent::{decode_latent, init_latent, refresh_coordinate};
use super::{CovMode, JmSpec};
use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::fitters::gram_cholesky;
use crate::rounding::adaptive_round;
use crate::stochastic::{
    inv_wishart_draw, spd_cholesky, spd_inverse, symmetrize, wishart_draw, ConditionalMap, RngStream,
};

/// Degrees of freedom of the inverse-Wishart for cluster-specific level-1
/// covariances, in excess of the dimension.
pub const CLUSTER_COV_EXTRA_DOF: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Encoding {
    Continuous,
    Latent { n_levels: usize },
    /// Binary carried as a continuous 0/1 variable and rounded on output.
    Rounded,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub col: usize,
    pub offset: usize,
    pub width: usize,
    pub enc: Encoding,
}

/// Incomplete variables at one level, expanded into latent coordinates.
#[derive(Debug, Clone)]
pub(crate) struct Outcomes {
    pub blocks: Vec<Block>,
    pub width: usize,
    pub names: Vec<String>,
    /// `rows × width`; true where the value is fixed or is the latent of an
    /// observed category (treated as known when drawing missing cells).
    pub known: Vec<bool>,
    /// `rows × blocks`; observed level of latent blocks.
    pub level: Vec<Option<usize>>,
    /// Distinct missingness patterns by row.
    pub pattern_of: Vec<usize>,
    pub patterns: Vec<Vec<usize>>,
}

impl Outcomes {
    fn n_rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.known.len() / self.width
        }
    }
}

fn outcome_blocks(d: &Dataset, names: &[String], adaptive_binary: bool) -> Result<(Vec<Block>, Vec<String>)> {
    let mut blocks = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for name in names {
        let col = d.index_of(name)?;
        let c = &d.columns()[col];
        if c.spec().role.is_structural() {
            return Err(Error::InvalidSpec(format!("`{name}` is an identifier and cannot be imputed")));
        }
        let (enc, width) = match &c.spec().kind {
            ColumnKind::Continuous => (Encoding::Continuous, 1),
            ColumnKind::Binary { .. } if adaptive_binary => (Encoding::Rounded, 1),
            kind => {
                let k = kind.n_levels().expect("discrete");
                (Encoding::Latent { n_levels: k }, k - 1)
            }
        };
        match enc {
            Encoding::Latent { .. } => {
                let levels = c.spec().kind.levels().expect("discrete");
                for l in &levels[..width] {
                    labels.push(format!("{name}:{l}"));
                }
            }
            _ => labels.push(name.clone()),
        }
        blocks.push(Block { col, offset, width, enc });
        offset += width;
    }
    Ok((blocks, labels))
}

/// Observed value of an outcome cell for each output row; level-2 rows take
/// the common observed value of their members.
fn build_outcomes(
    d: &Dataset,
    blocks: Vec<Block>,
    names: Vec<String>,
    groups: &[Vec<usize>],
) -> Result<(Outcomes, Vec<Vec<Option<f64>>>)> {
    let width = blocks.iter().map(|b| b.width).sum();
    let n = groups.len();
    let mut cells = vec![vec![None; blocks.len()]; n];
    for (bi, b) in blocks.iter().enumerate() {
        let c = &d.columns()[b.col];
        for (g, rows) in groups.iter().enumerate() {
            let mut value: Option<f64> = None;
            for &r in rows {
                if let Some(v) = c.get(r) {
                    match value {
                        Some(prev) if prev.to_bits() != v.to_bits() => {
                            return Err(Error::InvalidSpec(format!(
                                "level-2 variable `{}` varies within a cluster",
                                c.name()
                            )))
                        }
                        _ => value = Some(v),
                    }
                }
            }
            cells[g][bi] = value;
        }
    }
    let mut known = vec![false; n * width];
    let mut level = vec![None; n * blocks.len()];
    let mut pattern_ids: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut patterns = Vec::new();
    let mut pattern_of = Vec::with_capacity(n);
    for g in 0..n {
        for (bi, b) in blocks.iter().enumerate() {
            if let Some(v) = cells[g][bi] {
                known[g * width + b.offset..g * width + b.offset + b.width].fill(true);
                if let Encoding::Latent { .. } = b.enc {
                    level[g * blocks.len() + bi] = Some(v as usize);
                }
            }
        }
        let obs: Vec<usize> = (0..width).filter(|&j| known[g * width + j]).collect();
        let next = patterns.len();
        let id = *pattern_ids.entry(obs.clone()).or_insert(next);
        if id == next {
            patterns.push(obs);
        }
        pattern_of.push(id);
    }
    Ok((
        Outcomes {
            blocks,
            width,
            names,
            known,
            level,
            pattern_of,
            patterns,
        },
        cells,
    ))
}

fn design(d: &Dataset, names: &[String], rows: &[usize], what: &str) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let c = d.column(name)?;
        if c.has_missing() {
            return Err(Error::IncompleteData(name.clone()));
        }
        if matches!(c.spec().kind, ColumnKind::Categorical { .. }) {
            return Err(Error::InvalidSpec(format!(
                "{what} column `{name}` is categorical; expand it into indicators first"
            )));
        }
        cols.push(c.values());
    }
    let x = DMatrix::from_fn(rows.len(), names.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            cols[j - 1][rows[i]]
        }
    });
    let mut labels = vec!["(Intercept)".to_string()];
    labels.extend(names.iter().cloned());
    Ok((x, labels))
}

/// Everything fixed during sampling.
pub(crate) struct Model {
    pub n: usize,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub xtx_l: DMatrix<f64>,
    pub y: Outcomes,
    pub y_init: Vec<Vec<Option<f64>>>,
    pub clustered: Option<Clusters>,
    pub cov_mode: CovMode,
    pub fix_psi_zero: bool,
}

pub(crate) struct Clusters {
    pub of_row: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub z: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub ztz: Vec<DMatrix<f64>>,
    pub xtx: Vec<DMatrix<f64>>,
    pub x2: DMatrix<f64>,
    pub x2_names: Vec<String>,
    pub x2tx2_l: DMatrix<f64>,
    pub y2: Outcomes,
    pub y2_init: Vec<Vec<Option<f64>>>,
}

impl Clusters {
    fn q(&self) -> usize {
        self.z.ncols()
    }

    fn j(&self) -> usize {
        self.members.len()
    }
}

impl Model {
    pub fn bind(spec: &JmSpec, d: &Dataset) -> Result<Self> {
        if spec.y.is_empty() {
            return Err(Error::InvalidSpec("at least one level-1 outcome is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in spec.y.iter().chain(&spec.y2).chain(&spec.x).chain(&spec.x2).chain(&spec.z) {
            d.index_of(name)?;
            let role_clash = spec.y.contains(name) || spec.y2.contains(name);
            if role_clash && !seen.insert(name.as_str()) {
                return Err(Error::InvalidSpec(format!("`{name}` is listed more than once")));
            }
        }
        for name in spec.y.iter().chain(&spec.y2) {
            if spec.x.contains(name) || spec.x2.contains(name) || spec.z.contains(name) {
                return Err(Error::InvalidSpec(format!("`{name}` is both an outcome and a predictor")));
            }
        }
        let n = d.n_rows();
        let all: Vec<usize> = (0..n).collect();
        let (x, x_names) = design(d, &spec.x, &all, "predictor")?;
        let xtx_l = gram_cholesky(&(x.transpose() * &x))?.l();
        let (blocks, names) = outcome_blocks(d, &spec.y, spec.adaptive_binary)?;
        let singles: Vec<Vec<usize>> = all.iter().map(|&i| vec![i]).collect();
        let (y, y_init) = build_outcomes(d, blocks, names, &singles)?;

        let clustered = match &spec.cluster {
            None => {
                if !spec.y2.is_empty() || !spec.x2.is_empty() || !spec.z.is_empty() {
                    return Err(Error::InvalidSpec("level-2 terms need a cluster variable".into()));
                }
                if spec.cov_mode == CovMode::ClusterSpecific {
                    return Err(Error::InvalidSpec("cluster-specific covariances need a cluster variable".into()));
                }
                None
            }
            Some(cname) => {
                let c = d.column(cname)?;
                if c.has_missing() {
                    return Err(Error::IncompleteData(cname.clone()));
                }
                let mut ids: BTreeMap<i64, usize> = BTreeMap::new();
                for &v in c.values() {
                    ids.entry(v as i64).or_insert(0);
                }
                for (k, v) in ids.values_mut().enumerate() {
                    *v = k;
                }
                let of_row: Vec<usize> = c.values().iter().map(|&v| ids[&(v as i64)]).collect();
                let mut members = vec![Vec::new(); ids.len()];
                for (i, &g) in of_row.iter().enumerate() {
                    members[g].push(i);
                }
                if spec.cov_mode == CovMode::ClusterSpecific && members.len() < 3 {
                    return Err(Error::TooFewClusters(members.len()));
                }
                let (z, z_names) = design(d, &spec.z, &all, "random-effect")?;
                let firsts: Vec<usize> = members.iter().map(|m| m[0]).collect();
                for name in &spec.x2 {
                    let col = d.column(name)?;
                    for m in &members {
                        if m.iter().any(|&r| col.values()[r].to_bits() != col.values()[m[0]].to_bits()) {
                            return Err(Error::InvalidSpec(format!(
                                "level-2 predictor `{name}` varies within a cluster"
                            )));
                        }
                    }
                }
                let (x2, x2_names) = design(d, &spec.x2, &firsts, "level-2 predictor")?;
                let (b2, n2) = outcome_blocks(d, &spec.y2, spec.adaptive_binary)?;
                let (y2, y2_init) = build_outcomes(d, b2, n2, &members)?;
                let x2tx2_l = if y2.width > 0 {
                    gram_cholesky(&(x2.transpose() * &x2))?.l()
                } else {
                    DMatrix::identity(x2.ncols(), x2.ncols())
                };
                let block = |m: &DMatrix<f64>, rows: &[usize]| {
                    let sub = DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
                    sub.transpose() * sub
                };
                let ztz = members.iter().map(|r| block(&z, r)).collect();
                let xtx = if spec.cov_mode == CovMode::ClusterSpecific {
                    members.iter().map(|r| block(&x, r)).collect()
                } else {
                    Vec::new()
                };
                Some(Clusters {
                    of_row,
                    members,
                    z,
                    z_names,
                    ztz,
                    xtx,
                    x2,
                    x2_names,
                    x2tx2_l,
                    y2,
                    y2_init,
                })
            }
        };
        Ok(Model {
            n,
            x,
            x_names,
            xtx_l,
            y,
            y_init,
            clustered,
            cov_mode: spec.cov_mode,
            fix_psi_zero: spec.fix_psi_zero,
        })
    }

    pub fn p1(&self) -> usize {
        self.y.width
    }

    /// Dimension of the level-2 joint vector `[vec(U), y2 residual]`.
    fn r(&self) -> usize {
        self.clustered.as_ref().map_or(0, |c| c.q() * self.p1() + c.y2.width)
    }

    fn cluster_dof(&self) -> f64 {
        CLUSTER_COV_EXTRA_DOF + self.p1() as f64
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for r in &self.x_names {
            for c in &self.y.names {
                names.push(format!("beta[{r},{c}]"));
            }
        }
        let omega = if self.cov_mode == CovMode::ClusterSpecific {
            "omega_scale"
        } else {
            "omega"
        };
        push_upper(&mut names, omega, &self.y.names);
        if let Some(c) = &self.clustered {
            for r in &c.x2_names {
                for col in &c.y2.names {
                    names.push(format!("beta2[{r},{col}]"));
                }
            }
            let mut v = Vec::new();
            for yn in &self.y.names {
                for zn in &c.z_names {
                    v.push(format!("{zn}|{yn}"));
                }
            }
            v.extend(c.y2.names.iter().cloned());
            push_upper(&mut names, "psi", &v);
        }
        names
    }
}

fn push_upper(out: &mut Vec<String>, tag: &str, labels: &[String]) {
    for a in 0..labels.len() {
        for b in a..labels.len() {
            out.push(format!("{tag}[{},{}]", labels[a], labels[b]));
        }
    }
}

fn upper_values(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in a..m.ncols() {
            out.push(m[(a, b)]);
        }
    }
}

/// Current draws.
#[derive(Debug, Clone)]
pub(crate) struct State {
    pub y: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// Row `c` holds `vec(U_c)` with `U_c` of size `q × p1`, column-major.
    pub u: DMatrix<f64>,
    pub omega: Vec<DMatrix<f64>>,
    pub scale: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

fn init_values(rng: &mut RngStream, out: &Outcomes, cells: &[Vec<Option<f64>>]) -> Result<DMatrix<f64>> {
    let rows = out.n_rows().max(cells.len());
    let mut m = DMatrix::zeros(rows, out.width);
    for (bi, b) in out.blocks.iter().enumerate() {
        match b.enc {
            Encoding::Latent { n_levels } => {
                for (g, row) in cells.iter().enumerate() {
                    if let Some(v) = row[bi] {
                        let w = init_latent(rng, v as usize, n_levels)?;
                        for (k, wv) in w.into_iter().enumerate() {
                            m[(g, b.offset + k)] = wv;
                        }
                    }
                }
            }
            Encoding::Continuous | Encoding::Rounded => {
                let obs: Vec<f64> = cells.iter().filter_map(|r| r[bi]).collect();
                let mean = if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 };
                let sd = if obs.len() > 1 {
                    (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64).sqrt()
                } else {
                    1.0
                };
                for (g, row) in cells.iter().enumerate() {
                    m[(g, b.offset)] = match row[bi] {
                        Some(v) => v,
                        None => mean + 0.1 * sd * rng.std_normal(),
                    };
                }
            }
        }
    }
    Ok(m)
}

/// Matrix-normal draw `B̂ + L⁻ᵀ E L_Σᵀ` for `cov(vec B) = Σ ⊗ (XᵀX)⁻¹`.
fn matrix_normal(
    rng: &mut RngStream,
    xtx_l: &DMatrix<f64>,
    xty: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let lt = xtx_l.transpose();
    let tmp = xtx_l
        .solve_lower_triangular(xty)
        .ok_or(Error::RankDeficient)?;
    let bhat = lt.solve_upper_triangular(&tmp).ok_or(Error::RankDeficient)?;
    let (r, c) = bhat.shape();
    let e = DMatrix::from_fn(r, c, |_, _| rng.std_normal());
    let ls = spd_cholesky(sigma, "residual covariance")?.l();
    let left = lt.solve_upper_triangular(&e).ok_or(Error::RankDeficient)?;
    Ok(bhat + left * ls.transpose())
}

/// Draw from `N(P⁻¹h, P⁻¹)`.
fn precision_draw(rng: &mut RngStream, p: DMatrix<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = spd_cholesky(&symmetrize(p), "posterior precision")?;
    let mean = chol.solve(h);
    let z = rng.std_normal_vector(h.len());
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    Ok(mean + dev)
}

/// Kronecker product `A ⊗ M` laid out for column-major `vec`.
fn kron(a: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (mr, mc) = m.shape();
    DMatrix::from_fn(ar * mr, ac * mc, |i, j| a[(i / mr, j / mc)] * m[(i % mr, j % mc)])
}

fn scale_rc(m: &mut DMatrix<f64>, k: usize, s: f64) {
    for i in 0..m.nrows() {
        m[(i, k)] /= s;
    }
    for j in 0..m.ncols() {
        m[(k, j)] /= s;
    }
}

/// Draw of the unknown cells of one row from `N(mean, cov)`, followed by a
/// truncated-normal refresh of every latent coordinate of an observed
/// category.
#[allow(clippy::too_many_arguments)]
fn refresh_row(
    rng: &mut RngStream,
    out: &Outcomes,
    row: usize,
    values: &mut [f64],
    mean: &DVector<f64>,
    cond: Option<&ConditionalMap>,
    precision: &DMatrix<f64>,
) -> Result<()> {
    let w = out.width;
    if let Some(map) = cond {
        if !map.missing_idx.is_empty() {
            let obs = DVector::from_iterator(map.observed_idx.len(), map.observed_idx.iter().map(|&j| values[j]));
            let mu = map.mean(mean, &obs);
            let l = spd_cholesky(&map.cov, "conditional covariance")?.l();
            let z = rng.std_normal_vector(mu.len());
            let draw = mu + l * z;
            for (k, &j) in map.missing_idx.iter().enumerate() {
                values[j] = draw[k];
            }
        }
    }
    let nb = out.blocks.len();
    for (bi, b) in out.blocks.iter().enumerate() {
        let Some(level) = out.level[row * nb + bi] else { continue };
        for k in 0..b.width {
            let j = b.offset + k;
            let qjj = precision[(j, j)];
            let mut acc = 0.0;
            for t in 0..w {
                if t != j {
                    acc += precision[(j, t)] * (values[t] - mean[t]);
                }
            }
            let m = mean[j] - acc / qjj;
            let sd = 1.0 / qjj.sqrt();
            refresh_coordinate(rng, &mut values[b.offset..b.offset + b.width], level, k, m, sd)?;
        }
    }
    Ok(())
}

impl Model {
    pub fn init(&self, rng: &mut RngStream) -> Result<State> {
        let p1 = self.p1();
        let y = init_values(rng, &self.y, &self.y_init)?;
        let (y2, b2, u, psi, n_omega) = match &self.clustered {
            Some(c) => (
                init_values(rng, &c.y2, &c.y2_init)?,
                DMatrix::zeros(c.x2.ncols(), c.y2.width),
                DMatrix::zeros(c.j(), c.q() * p1),
                DMatrix::identity(self.r(), self.r()),
                if self.cov_mode == CovMode::ClusterSpecific { c.j() } else { 1 },
            ),
            None => (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), 1),
        };
        let scale = DMatrix::identity(p1, p1) * (self.cluster_dof() - p1 as f64 - 1.0);
        Ok(State {
            y,
            y2,
            b: DMatrix::zeros(self.x.ncols(), p1),
            b2,
            u,
            omega: vec![DMatrix::identity(p1, p1); n_omega],
            scale,
            psi,
        })
    }

    fn u_mat(&self, st: &State, c: usize) -> DMatrix<f64> {
        let q = self.clustered.as_ref().map_or(0, Clusters::q);
        DMatrix::from_fn(q, self.p1(), |k, a| st.u[(c, a * q + k)])
    }

    /// `Z U` for every row.
    fn zu(&self, st: &State) -> DMatrix<f64> {
        let p1 = self.p1();
        match &self.clustered {
            None => DMatrix::zeros(self.n, p1),
            Some(cl) => {
                let us: Vec<DMatrix<f64>> = (0..cl.j()).map(|c| self.u_mat(st, c)).collect();
                let mut out = DMatrix::zeros(self.n, p1);
                for i in 0..self.n {
                    let row = cl.z.row(i) * &us[cl.of_row[i]];
                    out.set_row(i, &row);
                }
                out
            }
        }
    }

    fn omega_of(&self, row: usize) -> usize {
        match (&self.clustered, self.cov_mode) {
            (Some(c), CovMode::ClusterSpecific) => c.of_row[row],
            _ => 0,
        }
    }

    pub fn sweep(&self, rng: &mut RngStream, st: &mut State) -> Result<()> {
        let p1 = self.p1();
        // Fixed effects.
        let ystar = &st.y - self.zu(st);
        st.b = match self.cov_mode {
            CovMode::Common => {
                let xty = self.x.transpose() * &ystar;
                matrix_normal(rng, &self.xtx_l, &xty, &st.omega[0])?
            }
            CovMode::ClusterSpecific => {
                let cl = self.clustered.as_ref().expect("bound with clusters");
                let px = self.x.ncols();
                let mut prec = DMatrix::zeros(px * p1, px * p1);
                let mut h = DVector::zeros(px * p1);
                for (c, rows) in cl.members.iter().enumerate() {
                    let oinv = spd_inverse(&st.omega[c], "cluster covariance")?;
                    prec += kron(&oinv, &cl.xtx[c]);
                    let mut xty = DMatrix::zeros(px, p1);
                    for &i in rows {
                        xty += self.x.row(i).transpose() * ystar.row(i);
                    }
                    h += DVector::from_column_slice((xty * oinv).as_slice());
                }
                let v = precision_draw(rng, prec, &h)?;
                DMatrix::from_column_slice(px, p1, v.as_slice())
            }
        };

        if let Some(cl) = &self.clustered {
            self.draw_level2(rng, st, cl)?;
        }

        // Level-1 covariance.
        let resid = &st.y - &self.x * &st.b - self.zu(st);
        match self.cov_mode {
            CovMode::Common => {
                let s = DMatrix::identity(p1, p1) + resid.transpose() * &resid;
                st.omega[0] = inv_wishart_draw(rng, &s, (p1 + 1 + self.n) as f64)?;
            }
            CovMode::ClusterSpecific => {
                let cl = self.clustered.as_ref().expect("bound with clusters");
                let a = self.cluster_dof();
                let mut inv_sum = DMatrix::identity(p1, p1);
                for (c, rows) in cl.members.iter().enumerate() {
                    let mut s = st.scale.clone();
                    for &i in rows {
                        let e = resid.row(i);
                        s += e.transpose() * e;
                    }
                    st.omega[c] = inv_wishart_draw(rng, &s, a + rows.len() as f64)?;
                    inv_sum += spd_inverse(&st.omega[c], "cluster covariance")?;
                }
                let w_scale = spd_inverse(&inv_sum, "scale posterior")?;
                st.scale = wishart_draw(rng, &w_scale, cl.j() as f64 * a + p1 as f64)?;
            }
        }
        self.normalize(st);

        if let Some(cl) = &self.clustered {
            self.draw_y2(rng, st, cl)?;
        }
        self.draw_y(rng, st)
    }

    fn draw_level2(&self, rng: &mut RngStream, st: &mut State, cl: &Clusters) -> Result<()> {
        let p1 = self.p1();
        let q = cl.q();
        let r1 = q * p1;
        let p2 = cl.y2.width;
        let qpsi = spd_inverse(&st.psi, "level-2 covariance")?;
        let q11 = qpsi.view((0, 0), (r1, r1)).into_owned();
        let q12 = qpsi.view((0, r1), (r1, p2)).into_owned();
        let resid = &st.y - &self.x * &st.b;
        let v2 = if p2 > 0 { &st.y2 - &cl.x2 * &st.b2 } else { DMatrix::zeros(cl.j(), 0) };
        if self.fix_psi_zero {
            st.u.fill(0.0);
        } else {
            let oinv_common = if self.cov_mode == CovMode::Common {
                Some(spd_inverse(&st.omega[0], "level-1 covariance")?)
            } else {
                None
            };
            for (c, rows) in cl.members.iter().enumerate() {
                let oinv = match &oinv_common {
                    Some(o) => o.clone(),
                    None => spd_inverse(&st.omega[c], "cluster covariance")?,
                };
                let mut ztr = DMatrix::zeros(q, p1);
                for &i in rows {
                    ztr += cl.z.row(i).transpose() * resid.row(i);
                }
                let mut h = DVector::from_column_slice((ztr * &oinv).as_slice());
                if p2 > 0 {
                    h -= &q12 * v2.row(c).transpose();
                }
                let prec = &q11 + kron(&oinv, &cl.ztz[c]);
                let draw = precision_draw(rng, prec, &h)?;
                st.u.set_row(c, &draw.transpose());
            }
        }
        if p2 > 0 {
            // y2 − x2 B2 | u ~ N(C u, Ψ22·1) with C = Ψ21 Ψ11⁻¹.
            let psi11 = st.psi.view((0, 0), (r1, r1)).into_owned();
            let psi21 = st.psi.view((r1, 0), (p2, r1)).into_owned();
            let psi22 = st.psi.view((r1, r1), (p2, p2)).into_owned();
            let chol11 = spd_cholesky(&psi11, "random-effect covariance")?;
            let c_mat = chol11.solve(&psi21.transpose()).transpose();
            let cond = symmetrize(&psi22 - &c_mat * psi21.transpose());
            let target = &st.y2 - &st.u * c_mat.transpose();
            let xty = cl.x2.transpose() * target;
            st.b2 = matrix_normal(rng, &cl.x2tx2_l, &xty, &cond)?;
        }
        let mut s = DMatrix::identity(self.r(), self.r());
        let v2 = if p2 > 0 { &st.y2 - &cl.x2 * &st.b2 } else { DMatrix::zeros(cl.j(), 0) };
        for c in 0..cl.j() {
            let mut v = RowDVector::zeros(self.r());
            v.columns_mut(0, r1).copy_from(&st.u.row(c));
            if p2 > 0 {
                v.columns_mut(r1, p2).copy_from(&v2.row(c));
            }
            s += v.transpose() * v;
        }
        st.psi = inv_wishart_draw(rng, &s, (self.r() + 1 + cl.j()) as f64)?;
        Ok(())
    }

    /// Rescale latent coordinates to unit level-1 (or level-2) variance.
    fn normalize(&self, st: &mut State) {
        let q = self.clustered.as_ref().map_or(0, Clusters::q);
        let a_dof = self.cluster_dof() - self.p1() as f64 - 1.0;
        for b in &self.y.blocks {
            if !matches!(b.enc, Encoding::Latent { .. }) {
                continue;
            }
            for k in b.offset..b.offset + b.width {
                let s = match self.cov_mode {
                    CovMode::Common => st.omega[0][(k, k)].sqrt(),
                    CovMode::ClusterSpecific => (st.scale[(k, k)] / a_dof).sqrt(),
                };
                st.y.column_mut(k).unscale_mut(s);
                st.b.column_mut(k).unscale_mut(s);
                for o in st.omega.iter_mut() {
                    scale_rc(o, k, s);
                }
                if self.cov_mode == CovMode::ClusterSpecific {
                    scale_rc(&mut st.scale, k, s);
                }
                for m in 0..q {
                    st.u.column_mut(k * q + m).unscale_mut(s);
                    scale_rc(&mut st.psi, k * q + m, s);
                }
            }
        }
        if let Some(cl) = &self.clustered {
            let r1 = q * self.p1();
            for b in &cl.y2.blocks {
                if !matches!(b.enc, Encoding::Latent { .. }) {
                    continue;
                }
                for k in b.offset..b.offset + b.width {
                    let s = st.psi[(r1 + k, r1 + k)].sqrt();
                    st.y2.column_mut(k).unscale_mut(s);
                    st.b2.column_mut(k).unscale_mut(s);
                    scale_rc(&mut st.psi, r1 + k, s);
                }
            }
        }
    }

    fn draw_y2(&self, rng: &mut RngStream, st: &mut State, cl: &Clusters) -> Result<()> {
        let p2 = cl.y2.width;
        if p2 == 0 {
            return Ok(());
        }
        let r1 = cl.q() * self.p1();
        let psi11 = st.psi.view((0, 0), (r1, r1)).into_owned();
        let psi21 = st.psi.view((r1, 0), (p2, r1)).into_owned();
        let psi22 = st.psi.view((r1, r1), (p2, p2)).into_owned();
        let c_mat = spd_cholesky(&psi11, "random-effect covariance")?
            .solve(&psi21.transpose())
            .transpose();
        let cov = symmetrize(&psi22 - &c_mat * psi21.transpose());
        let precision = spd_inverse(&cov, "level-2 conditional covariance")?;
        let maps = cl
            .y2
            .patterns
            .iter()
            .map(|obs| ConditionalMap::new(&cov, obs))
            .collect::<Result<Vec<_>>>()?;
        let mean_all = &cl.x2 * &st.b2 + &st.u * c_mat.transpose();
        for c in 0..cl.j() {
            let mean = mean_all.row(c).transpose();
            let mut vals: Vec<f64> = st.y2.row(c).iter().copied().collect();
            refresh_row(rng, &cl.y2, c, &mut vals, &mean, Some(&maps[cl.y2.pattern_of[c]]), &precision)?;
            for (j, v) in vals.into_iter().enumerate() {
                st.y2[(c, j)] = v;
            }
        }
        Ok(())
    }

    fn draw_y(&self, rng: &mut RngStream, st: &mut State) -> Result<()> {
        let n_om = st.omega.len();
        let precisions = st
            .omega
            .iter()
            .map(|o| spd_inverse(o, "level-1 covariance"))
            .collect::<Result<Vec<_>>>()?;
        let mut cache: HashMap<(usize, usize), ConditionalMap> = HashMap::new();
        let mean_all = &self.x * &st.b + self.zu(st);
        for i in 0..self.n {
            let om = self.omega_of(i);
            debug_assert!(om < n_om);
            let pat = self.y.pattern_of[i];
            if !cache.contains_key(&(om, pat)) {
                let map = ConditionalMap::new(&st.omega[om], &self.y.patterns[pat])?;
                cache.insert((om, pat), map);
            }
            let mean = mean_all.row(i).transpose();
            let mut vals: Vec<f64> = st.y.row(i).iter().copied().collect();
            refresh_row(rng, &self.y, i, &mut vals, &mean, cache.get(&(om, pat)), &precisions[om])?;
            for (j, v) in vals.into_iter().enumerate() {
                st.y[(i, j)] = v;
            }
        }
        Ok(())
    }

    pub fn record(&self, st: &State, out: &mut Vec<f64>) {
        out.clear();
        out.extend(st.b.transpose().iter());
        match self.cov_mode {
            CovMode::Common => upper_values(out, &st.omega[0]),
            CovMode::ClusterSpecific => upper_values(out, &st.scale),
        }
        if self.clustered.is_some() {
            out.extend(st.b2.transpose().iter());
            upper_values(out, &st.psi);
        }
    }

    /// Completed copy of `d` from the current state.
    pub fn completed(&self, st: &State, d: &Dataset) -> Result<Dataset> {
        let mut fills = Vec::new();
        let mut rounded: Vec<usize> = Vec::new();
        let mut emit = |out: &Outcomes, vals: &DMatrix<f64>, rows_of: &dyn Fn(usize) -> Vec<usize>| {
            for b in &out.blocks {
                let col = &d.columns()[b.col];
                for g in 0..vals.nrows() {
                    let v = match b.enc {
                        Encoding::Continuous | Encoding::Rounded => vals[(g, b.offset)],
                        Encoding::Latent { .. } => {
                            let w: Vec<f64> = (0..b.width).map(|k| vals[(g, b.offset + k)]).collect();
                            decode_latent(&w) as f64
                        }
                    };
                    for r in rows_of(g) {
                        if col.missing()[r] {
                            fills.push((b.col, r, v));
                        }
                    }
                }
                if b.enc == Encoding::Rounded && !rounded.contains(&b.col) {
                    rounded.push(b.col);
                }
            }
        };
        emit(&self.y, &st.y, &|g| vec![g]);
        if let Some(cl) = &self.clustered {
            emit(&cl.y2, &st.y2, &|g| cl.members[g].clone());
        }
        // Adaptive rounding per column on the completed scale.
        for col in rounded {
            let c = &d.columns()[col];
            let mut values = c.values().to_vec();
            for &(fc, r, v) in fills.iter().filter(|f| f.0 == col) {
                let _ = fc;
                values[r] = v;
            }
            let out = adaptive_round(&values, c.missing())?;
            for f in fills.iter_mut().filter(|f| f.0 == col) {
                f.2 = out[f.1];
            }
        }
        d.with_fills(fills)
    }
}

/// Sanity checks used in debug builds and tests.
pub(crate) fn latent_regions_hold(model: &Model, st: &State) -> bool {
    let check = |out: &Outcomes, vals: &DMatrix<f64>| {
        let nb = out.blocks.len();
        (0..vals.nrows()).all(|g| {
            out.blocks.iter().enumerate().all(|(bi, b)| match out.level[g * nb + bi] {
                Some(level) => {
                    let w: Vec<f64> = (0..b.width).map(|k| vals[(g, b.offset + k)]).collect();
                    decode_latent(&w) == level
                }
                None => true,
            })
        })
    };
    check(&model.y, &st.y) && model.clustered.as_ref().is_none_or(|c| check(&c.y2, &st.y2))
}
