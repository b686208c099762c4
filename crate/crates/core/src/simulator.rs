//! Synthetic school-clustered longitudinal cohort with MAR missingness.
//!
//! Students are nested in schools. Each student has a baseline block (age,
//! sex, SES quintile, baseline numeracy), depression and behaviour scores at
//! waves 2, 4, 6 and numeracy outcomes at waves 3, 5, 7. The long layout has
//! one row per student and outcome wave, with the exposure and auxiliary
//! score from the preceding wave stored as `prev_dep` and `prev_sdq`.

use serde::{Deserialize, Serialize};

use crate::data::{
    reshape_long_to_wide, Column, ColumnKind, ColumnSpec, Dataset, ReshapeMap, Role, Shape,
};
use crate::error::{Error, Result};
use crate::stochastic::RngStream;

pub const SCHOOL: &str = "school";
pub const ID: &str = "id";
pub const AGE: &str = "age";
pub const SEX: &str = "sex";
pub const SES: &str = "ses";
pub const BASELINE: &str = "numeracy_scorew1";
pub const TIME: &str = "time";
pub const PREV_DEP: &str = "prev_dep";
pub const OUTCOME: &str = "numeracy_score";
pub const PREV_SDQ: &str = "prev_sdq";

/// Number of SES quintiles.
pub const SES_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSizeLaw {
    /// Mean of the log size.
    pub location: f64,
    /// SD of the log size.
    pub scale: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Baseline numeracy: linear in sex, age and SES with N(0, sd²) error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineEq {
    pub intercept: f64,
    pub sex: f64,
    pub age: f64,
    /// Effects of SES quintiles 2..5 relative to quintile 1.
    pub ses: [f64; 4],
    pub sd: f64,
}

/// Depression at waves 2, 4, 6: logistic with school and student intercepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepressionEq {
    pub intercept: f64,
    pub age: f64,
    pub wave: f64,
    pub sex: f64,
    pub baseline: f64,
    pub ses: [f64; 4],
    pub sd_school: f64,
    pub sd_student: f64,
}

/// Behavioural score at waves 2, 4, 6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdqEq {
    pub intercept: f64,
    pub depression: f64,
    pub wave: f64,
    pub sd_residual: f64,
    pub sd_school: f64,
    pub sd_student: f64,
}

/// Numeracy at waves 3, 5, 7 given the preceding wave's depression and SDQ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeEq {
    pub intercept: f64,
    pub depression: f64,
    pub wave: f64,
    pub age: f64,
    pub sex: f64,
    pub baseline: f64,
    pub ses: [f64; 4],
    pub sdq: f64,
    pub sd_residual: f64,
    pub sd_school: f64,
    pub sd_student: f64,
}

/// Logistic missingness of a baseline variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineMissingEq {
    pub intercept: f64,
    pub age: f64,
    pub sex: f64,
}

/// Missingness of depression at wave k; depends on the outcome at k + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepressionMissingEq {
    pub intercept: f64,
    pub age: f64,
    pub wave: f64,
    pub sex: f64,
    pub baseline: f64,
    pub ses: [f64; 4],
    pub next_outcome: f64,
    pub sdq: f64,
    pub sd_student: f64,
    pub sd_school: f64,
}

/// Missingness of the outcome at wave k; depends on wave k − 1 exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeMissingEq {
    pub intercept: f64,
    pub age: f64,
    pub wave: f64,
    pub sex: f64,
    pub baseline: f64,
    pub ses: [f64; 4],
    pub depression: f64,
    pub sdq: f64,
    pub sd_student: f64,
    pub sd_school: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_schools: usize,
    pub n_students: usize,
    pub cluster_size: ClusterSizeLaw,
    pub age_range: [f64; 2],
    pub p_female: f64,
    pub ses_probs: [f64; SES_LEVELS],
    pub baseline: BaselineEq,
    pub depression: DepressionEq,
    pub sdq: SdqEq,
    pub outcome: OutcomeEq,
    pub missing_ses: BaselineMissingEq,
    pub missing_baseline: BaselineMissingEq,
    pub missing_depression: DepressionMissingEq,
    pub missing_outcome: OutcomeMissingEq,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_schools: 40,
            n_students: 1200,
            cluster_size: ClusterSizeLaw {
                location: 3.3,
                scale: 0.5,
                lower: 8.0,
                upper: 66.0,
            },
            age_range: [7.0, 10.0],
            p_female: 0.5,
            ses_probs: [0.1, 0.1, 0.2, 0.3, 0.3],
            baseline: BaselineEq {
                intercept: -1.2,
                sex: 0.22,
                age: 0.08,
                ses: [0.01, 0.37, 0.33, 0.65],
                sd: 1.0,
            },
            depression: DepressionEq {
                intercept: -4.0,
                age: 0.31,
                wave: 0.08,
                sex: -0.52,
                baseline: -0.05,
                ses: [-0.3, -0.4, -0.57, -0.86],
                sd_school: 0.25,
                sd_student: 1.5,
            },
            sdq: SdqEq {
                intercept: 16.0,
                depression: 1.6,
                wave: -0.1,
                sd_residual: 3.0,
                sd_school: 0.8,
                sd_student: 4.0,
            },
            outcome: OutcomeEq {
                intercept: 2.0,
                depression: -0.02,
                wave: -0.01,
                age: -0.2,
                sex: 0.15,
                baseline: 0.7,
                ses: [-0.02, -0.10, 0.02, -0.02],
                sdq: -0.01,
                sd_residual: 0.25,
                sd_school: 0.05,
                sd_student: 0.25,
            },
            missing_ses: BaselineMissingEq {
                intercept: -1.5,
                age: 0.03,
                sex: 0.01,
            },
            missing_baseline: BaselineMissingEq {
                intercept: -2.1,
                age: 0.05,
                sex: 0.02,
            },
            missing_depression: DepressionMissingEq {
                intercept: -8.0,
                age: 0.72,
                wave: -0.11,
                sex: 0.16,
                baseline: -0.17,
                ses: [-0.39, 0.27, 0.19, -0.03],
                next_outcome: -0.13,
                sdq: 0.04,
                sd_student: 0.05,
                sd_school: 0.01,
            },
            missing_outcome: OutcomeMissingEq {
                intercept: -23.0,
                age: 1.77,
                wave: 0.7,
                sex: 0.01,
                baseline: -0.70,
                ses: [-4.9, -1.9, 2.19, -2.35],
                depression: -0.25,
                sdq: 0.11,
                sd_student: 2.0,
                sd_school: 0.4,
            },
            seed: 2024,
        }
    }
}

fn bad(pointer: &str, msg: impl Into<String>) -> Error {
    Error::BadConfig {
        pointer: pointer.to_string(),
        msg: msg.into(),
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = crate::error::parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_schools == 0 {
            return Err(bad("/n_schools", "must be at least 1"));
        }
        if self.n_students < self.n_schools {
            return Err(bad("/n_students", "must be at least n_schools"));
        }
        let cs = &self.cluster_size;
        if !(cs.lower >= 8.0 && cs.lower < cs.upper) {
            return Err(bad("/cluster_size", "bounds must satisfy 8 <= lower < upper"));
        }
        if !(cs.scale >= 0.0) {
            return Err(bad("/cluster_size/scale", "must be non-negative"));
        }
        if !(self.age_range[0] < self.age_range[1]) {
            return Err(bad("/age_range", "lower bound must be below upper bound"));
        }
        if !(0.0..=1.0).contains(&self.p_female) {
            return Err(bad("/p_female", "must be a probability"));
        }
        if self.ses_probs.iter().any(|&p| !(p >= 0.0)) || (self.ses_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("/ses_probs", "must be non-negative and sum to 1"));
        }
        let sds = [
            ("/baseline/sd", self.baseline.sd),
            ("/depression/sd_school", self.depression.sd_school),
            ("/depression/sd_student", self.depression.sd_student),
            ("/sdq/sd_residual", self.sdq.sd_residual),
            ("/sdq/sd_school", self.sdq.sd_school),
            ("/sdq/sd_student", self.sdq.sd_student),
            ("/outcome/sd_residual", self.outcome.sd_residual),
            ("/outcome/sd_school", self.outcome.sd_school),
            ("/outcome/sd_student", self.outcome.sd_student),
            ("/missing_depression/sd_student", self.missing_depression.sd_student),
            ("/missing_depression/sd_school", self.missing_depression.sd_school),
            ("/missing_outcome/sd_student", self.missing_outcome.sd_student),
            ("/missing_outcome/sd_school", self.missing_outcome.sd_school),
        ];
        if let Some((ptr, _)) = sds.iter().find(|(_, sd)| !(*sd >= 0.0)) {
            return Err(bad(ptr, "standard deviations must be non-negative"));
        }
        Ok(())
    }
}

/// Waves at which depression and SDQ are measured.
pub const EXPOSURE_WAVES: [i64; 3] = [2, 4, 6];
/// Waves at which the outcome is measured (one long row each).
pub const OUTCOME_WAVES: [i64; 3] = [3, 5, 7];

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub complete: Dataset,
    pub observed: Dataset,
    /// Verbatim copy of the generating configuration.
    pub truth: SimConfig,
}

/// Scale raw sizes to sum to `total`, round, and let the last cluster absorb
/// the rounding surplus or deficit. Sizes are kept at 1 or more by taking
/// any shortfall of the last cluster from the largest clusters.
pub fn scale_cluster_sizes(raw: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = raw.iter().sum();
    let factor = total as f64 / sum;
    let mut sizes: Vec<i64> = raw.iter().map(|&r| ((r * factor).round() as i64).max(1)).collect();
    let diff = total as i64 - sizes.iter().sum::<i64>();
    let last = sizes.len() - 1;
    sizes[last] += diff;
    while sizes[last] < 1 {
        let big = (0..last).max_by_key(|&i| (sizes[i], usize::MAX - i)).expect("at least two clusters");
        sizes[big] -= 1;
        sizes[last] += 1;
    }
    sizes.into_iter().map(|s| s as usize).collect()
}

/// School sizes from a truncated log-normal, rescaled to `n_students`.
pub fn draw_cluster_sizes(rng: &mut RngStream, cfg: &SimConfig) -> Vec<usize> {
    let law = &cfg.cluster_size;
    let raw: Vec<f64> = (0..cfg.n_schools)
        .map(|_| loop {
            let x = (law.location + law.scale * rng.std_normal()).exp();
            if (law.lower..=law.upper).contains(&x) {
                break x;
            }
        })
        .collect();
    scale_cluster_sizes(&raw, cfg.n_students)
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn ses_effect(coefs: &[f64; 4], quintile: usize) -> f64 {
    if quintile == 0 {
        0.0
    } else {
        coefs[quintile - 1]
    }
}

/// Student-level draws that the missingness step needs to see.
struct Student {
    school: usize,
    age: f64,
    sex: f64,
    ses: usize,
    baseline: f64,
    dep: [f64; 3],
    sdq: [f64; 3],
    outcome: [f64; 3],
}

fn long_columns(students: &[Student], masks: Option<&Masks>) -> Vec<Column> {
    let n = students.len() * 3;
    let each = |f: &dyn Fn(&Student, usize) -> f64| -> Vec<f64> {
        students
            .iter()
            .flat_map(|s| (0..3).map(move |w| (s, w)))
            .map(|(s, w)| f(s, w))
            .collect()
    };
    let mask_of = |sel: &dyn Fn(&Masks, usize, usize) -> bool| -> Vec<bool> {
        match masks {
            None => vec![false; n],
            Some(m) => (0..students.len())
                .flat_map(|i| (0..3).map(move |w| (i, w)))
                .map(|(i, w)| sel(m, i, w))
                .collect(),
        }
    };
    let ses_levels = (1..=SES_LEVELS).map(|q| q.to_string()).collect();
    vec![
        Column::complete(
            ColumnSpec::continuous(SCHOOL, Role::ClusterId),
            each(&|s, _| (s.school + 1) as f64),
        ),
        Column::complete(
            ColumnSpec::continuous(ID, Role::UnitId),
            (0..n).map(|r| (r / 3 + 1) as f64).collect(),
        ),
        Column::complete(ColumnSpec::continuous(AGE, Role::Analysis), each(&|s, _| s.age)),
        Column::complete(
            ColumnSpec::new(SEX, ColumnKind::binary(), Role::Analysis),
            each(&|s, _| s.sex),
        ),
        Column::with_mask(
            ColumnSpec::new(SES, ColumnKind::Categorical { levels: ses_levels }, Role::Analysis),
            each(&|s, _| s.ses as f64),
            mask_of(&|m, i, _| m.ses[i]),
        ),
        Column::with_mask(
            ColumnSpec::continuous(BASELINE, Role::Analysis),
            each(&|s, _| s.baseline),
            mask_of(&|m, i, _| m.baseline[i]),
        ),
        Column::complete(
            ColumnSpec::continuous(TIME, Role::Time),
            each(&|_, w| OUTCOME_WAVES[w] as f64),
        ),
        Column::with_mask(
            ColumnSpec::new(PREV_DEP, ColumnKind::binary(), Role::Analysis),
            each(&|s, w| s.dep[w]),
            mask_of(&|m, i, w| m.dep[i][w]),
        ),
        Column::with_mask(
            ColumnSpec::continuous(OUTCOME, Role::Analysis),
            each(&|s, w| s.outcome[w]),
            mask_of(&|m, i, w| m.outcome[i][w]),
        ),
        Column::complete(
            ColumnSpec::continuous(PREV_SDQ, Role::Auxiliary),
            each(&|s, w| s.sdq[w]),
        ),
    ]
}

struct Masks {
    ses: Vec<bool>,
    baseline: Vec<bool>,
    dep: Vec<[bool; 3]>,
    outcome: Vec<[bool; 3]>,
}

fn generate_students(rng: &mut RngStream, cfg: &SimConfig) -> Vec<Student> {
    let sizes = draw_cluster_sizes(rng, cfg);
    let n = cfg.n_students;
    let school: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &k)| std::iter::repeat_n(s, k))
        .collect();
    let age: Vec<f64> = (0..n).map(|_| rng.uniform_range(cfg.age_range[0], cfg.age_range[1])).collect();
    let sex: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.bernoulli(cfg.p_female)))).collect();
    let ses: Vec<usize> = (0..n).map(|_| rng.categorical(&cfg.ses_probs)).collect();
    let b = &cfg.baseline;
    let baseline: Vec<f64> = (0..n)
        .map(|j| {
            b.intercept + b.sex * sex[j] + b.age * age[j] + ses_effect(&b.ses, ses[j]) + b.sd * rng.std_normal()
        })
        .collect();

    let school_re = |rng: &mut RngStream, sd: f64| -> Vec<f64> {
        (0..cfg.n_schools).map(|_| sd * rng.std_normal()).collect()
    };
    let student_re = |rng: &mut RngStream, sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.std_normal()).collect() };
    let d = &cfg.depression;
    let (u_s, u_j) = (school_re(rng, d.sd_school), student_re(rng, d.sd_student));
    let q = &cfg.sdq;
    let (v_s, v_j) = (school_re(rng, q.sd_school), student_re(rng, q.sd_student));
    let o = &cfg.outcome;
    let (a_s, a_j) = (school_re(rng, o.sd_school), student_re(rng, o.sd_student));

    let mut dep = vec![[0.0; 3]; n];
    let mut sdq = vec![[0.0; 3]; n];
    let mut outcome = vec![[0.0; 3]; n];
    for (w, &k) in EXPOSURE_WAVES.iter().enumerate() {
        let k = k as f64;
        for j in 0..n {
            let eta = d.intercept + d.age * age[j] + d.wave * k + d.sex * sex[j] + d.baseline * baseline[j]
                + ses_effect(&d.ses, ses[j])
                + u_s[school[j]]
                + u_j[j];
            dep[j][w] = f64::from(u8::from(rng.bernoulli(expit(eta))));
        }
        for j in 0..n {
            sdq[j][w] = q.intercept + q.depression * dep[j][w] + q.wave * k + v_s[school[j]] + v_j[j]
                + q.sd_residual * rng.std_normal();
        }
    }
    for (w, &k) in OUTCOME_WAVES.iter().enumerate() {
        let k = k as f64;
        for j in 0..n {
            outcome[j][w] = o.intercept + o.depression * dep[j][w] + o.wave * k + o.age * age[j]
                + o.sex * sex[j]
                + o.baseline * baseline[j]
                + ses_effect(&o.ses, ses[j])
                + o.sdq * sdq[j][w]
                + a_s[school[j]]
                + a_j[j]
                + o.sd_residual * rng.std_normal();
        }
    }
    (0..n)
        .map(|j| Student {
            school: school[j],
            age: age[j],
            sex: sex[j],
            ses: ses[j],
            baseline: baseline[j],
            dep: dep[j],
            sdq: sdq[j],
            outcome: outcome[j],
        })
        .collect()
}

fn draw_masks(rng: &mut RngStream, cfg: &SimConfig, students: &[Student]) -> Masks {
    let n = students.len();
    let mut flip = |p: f64| rng.uniform() < p;
    let ms = &cfg.missing_ses;
    let ses: Vec<bool> = students
        .iter()
        .map(|s| flip(expit(ms.intercept + ms.age * s.age + ms.sex * s.sex)))
        .collect();
    let mb = &cfg.missing_baseline;
    let baseline: Vec<bool> = students
        .iter()
        .map(|s| flip(expit(mb.intercept + mb.age * s.age + mb.sex * s.sex)))
        .collect();

    let md = &cfg.missing_depression;
    let mo = &cfg.missing_outcome;
    let n_schools = students.iter().map(|s| s.school).max().map_or(0, |m| m + 1);
    let re = |rng: &mut RngStream, k: usize, sd: f64| -> Vec<f64> { (0..k).map(|_| sd * rng.std_normal()).collect() };
    let (du_s, du_j) = (re(rng, n_schools, md.sd_school), re(rng, n, md.sd_student));
    let (ou_s, ou_j) = (re(rng, n_schools, mo.sd_school), re(rng, n, mo.sd_student));

    let mut dep = vec![[false; 3]; n];
    let mut outcome = vec![[false; 3]; n];
    for (w, &k) in EXPOSURE_WAVES.iter().enumerate() {
        let k = k as f64;
        for (j, s) in students.iter().enumerate() {
            let eta = md.intercept + md.age * s.age + md.wave * k + md.sex * s.sex + md.baseline * s.baseline
                + ses_effect(&md.ses, s.ses)
                + md.next_outcome * s.outcome[w]
                + md.sdq * s.sdq[w]
                + du_s[s.school]
                + du_j[j];
            dep[j][w] = rng.uniform() < expit(eta);
        }
    }
    for (w, &k) in OUTCOME_WAVES.iter().enumerate() {
        let k = k as f64;
        for (j, s) in students.iter().enumerate() {
            let eta = mo.intercept + mo.age * s.age + mo.wave * k + mo.sex * s.sex + mo.baseline * s.baseline
                + ses_effect(&mo.ses, s.ses)
                + mo.depression * s.dep[w]
                + mo.sdq * s.sdq[w]
                + ou_s[s.school]
                + ou_j[j];
            outcome[j][w] = rng.uniform() < expit(eta);
        }
    }
    Masks {
        ses,
        baseline,
        dep,
        outcome,
    }
}

fn students_from(d: &Dataset) -> Result<Vec<Student>> {
    let col = |name: &str| d.column(name).map(|c| c.values().to_vec());
    let (school, age, sex, ses, base) = (col(SCHOOL)?, col(AGE)?, col(SEX)?, col(SES)?, col(BASELINE)?);
    let (dep, out, sdq) = (col(PREV_DEP)?, col(OUTCOME)?, col(PREV_SDQ)?);
    if !d.is_complete() || d.n_rows() % 3 != 0 {
        return Err(Error::InvalidDataset(
            "expected a complete simulated dataset with three rows per student".into(),
        ));
    }
    Ok((0..d.n_rows() / 3)
        .map(|j| {
            let r = 3 * j;
            Student {
                school: school[r] as usize - 1,
                age: age[r],
                sex: sex[r],
                ses: ses[r] as usize,
                baseline: base[r],
                dep: [dep[r], dep[r + 1], dep[r + 2]],
                sdq: [sdq[r], sdq[r + 1], sdq[r + 2]],
                outcome: [out[r], out[r + 1], out[r + 2]],
            }
        })
        .collect())
}

/// Complete long dataset: three rows per student.
pub fn generate_complete(rng: &mut RngStream, cfg: &SimConfig) -> Result<Dataset> {
    cfg.validate()?;
    let students = generate_students(rng, cfg);
    Dataset::new(Shape::Long, long_columns(&students, None))
}

/// Apply the missingness model to a dataset from [`generate_complete`].
pub fn impose_missingness(rng: &mut RngStream, cfg: &SimConfig, complete: &Dataset) -> Result<Dataset> {
    let students = students_from(complete)?;
    let masks = draw_masks(rng, cfg, &students);
    Dataset::new(Shape::Long, long_columns(&students, Some(&masks)))
}

/// Generate and mask with streams 0 and 1 of `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    let complete = generate_complete(&mut RngStream::new(cfg.seed, 0), cfg)?;
    let observed = impose_missingness(&mut RngStream::new(cfg.seed, 1), cfg, &complete)?;
    Ok(SimOutput {
        complete,
        observed,
        truth: cfg.clone(),
    })
}

/// Reshape map between the long layout and `stub.t` wide columns.
pub fn reshape_map() -> ReshapeMap {
    ReshapeMap::new(
        &[PREV_DEP, OUTCOME, PREV_SDQ],
        &OUTCOME_WAVES,
        TIME,
        &[SCHOOL, ID, AGE, SEX, SES, BASELINE],
    )
    .expect("static map is valid")
}

pub fn to_wide(d: &Dataset) -> Result<Dataset> {
    reshape_long_to_wide(d, &reshape_map())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::incomplete_fraction;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn sizes_sum_to_total() {
        let mut rng = RngStream::new(11, 0);
        let cfg = SimConfig::default();
        let sizes = draw_cluster_sizes(&mut rng, &cfg);
        assert_eq!(sizes.len(), 40);
        assert_eq!(sizes.iter().sum::<usize>(), 1200);
        assert!(sizes.iter().all(|&s| s >= 1));
    }

    #[test]
    fn single_school_takes_everyone() {
        let mut rng = RngStream::new(0, 0);
        let cfg = SimConfig {
            n_schools: 1,
            ..SimConfig::default()
        };
        assert_eq!(draw_cluster_sizes(&mut rng, &cfg), vec![1200]);
    }

    #[test]
    fn last_cluster_absorbs_rounding() {
        // 3 × 1/3 of 100 rounds to 33 each; the last gets the extra one.
        assert_eq!(scale_cluster_sizes(&[1.0, 1.0, 1.0], 100), vec![33, 33, 34]);
        // 0.5-boundaries round away from zero, giving a surplus of one.
        assert_eq!(scale_cluster_sizes(&[1.0, 1.0], 3), vec![2, 1]);
        let raw = [10.0, 20.0, 30.0, 17.0];
        let total = 91;
        let f = total as f64 / raw.iter().sum::<f64>();
        let mut expect: Vec<usize> = raw.iter().map(|r| (r * f).round() as usize).collect();
        let s: usize = expect.iter().sum();
        let last = expect.len() - 1;
        expect[last] = expect[last] + total - s;
        assert_eq!(scale_cluster_sizes(&raw, total), expect);
    }

    #[test]
    fn marginal_proportions() {
        let cfg = SimConfig {
            n_students: 6000,
            n_schools: 150,
            ..SimConfig::default()
        };
        let d = generate_complete(&mut RngStream::new(3, 0), &cfg).unwrap();
        let rows: Vec<usize> = (0..d.n_rows()).step_by(3).collect();
        let w1 = d.select_rows(&rows);
        let mean = |name: &str, f: &dyn Fn(f64) -> bool| {
            let c = w1.column(name).unwrap();
            c.values().iter().filter(|&&v| f(v)).count() as f64 / c.len() as f64
        };
        assert!((mean(SEX, &|v| v == 1.0) - 0.5).abs() < 0.03);
        assert!((mean(SES, &|v| v == 4.0) - 0.3).abs() < 0.03);
        assert!(mean(AGE, &|v| (7.0..10.0).contains(&v)) == 1.0);
    }

    #[test]
    fn long_layout() {
        let out = simulate(&SimConfig::default()).unwrap();
        assert_eq!(out.observed.n_rows(), 3600);
        assert_eq!(
            out.observed.names(),
            vec![SCHOOL, ID, AGE, SEX, SES, BASELINE, TIME, PREV_DEP, OUTCOME, PREV_SDQ]
        );
        let w = to_wide(&out.observed).unwrap();
        assert_eq!(w.n_rows(), 1200);
    }

    #[test]
    fn observed_agrees_with_complete_on_unmasked_cells() {
        let out = simulate(&SimConfig::default()).unwrap();
        for (c, o) in out.complete.columns().iter().zip(out.observed.columns()) {
            for r in 0..c.len() {
                if let Some(v) = o.get(r) {
                    assert_eq!(Some(v), c.get(r));
                }
            }
        }
        for name in [SCHOOL, ID, AGE, SEX, TIME, PREV_SDQ] {
            assert!(!out.observed.column(name).unwrap().has_missing());
        }
    }

    #[test]
    fn no_missingness_when_intercepts_are_minus_infinity() {
        let mut cfg = SimConfig::default();
        cfg.missing_ses.intercept = f64::NEG_INFINITY;
        cfg.missing_baseline.intercept = f64::NEG_INFINITY;
        cfg.missing_depression.intercept = f64::NEG_INFINITY;
        cfg.missing_outcome.intercept = f64::NEG_INFINITY;
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.observed, out.complete);
        assert_eq!(incomplete_fraction(&out.observed), 0.0);
    }

    #[test]
    fn baseline_missingness_rates() {
        let (mut ses, mut base) = (0.0, 0.0);
        for seed in 0..5 {
            let cfg = SimConfig {
                seed,
                ..SimConfig::default()
            };
            let w = to_wide(&simulate(&cfg).unwrap().observed).unwrap();
            ses += w.column(SES).unwrap().n_missing() as f64 / 1200.0;
            base += w.column(BASELINE).unwrap().n_missing() as f64 / 1200.0;
        }
        assert!((ses / 5.0 - 0.224).abs() < 0.04);
        assert!((base / 5.0 - 0.160).abs() < 0.04);
    }

    #[test]
    fn outcome_coefficients_recovered_at_large_n() {
        let cfg = SimConfig {
            n_students: 50_000,
            n_schools: 1000,
            ..SimConfig::default()
        };
        let d = generate_complete(&mut RngStream::new(99, 0), &cfg).unwrap();
        let n = d.n_rows();
        let v = |name: &str| d.column(name).unwrap().values().to_vec();
        let (dep, time, age, sex, base, ses, sdq, y) =
            (v(PREV_DEP), v(TIME), v(AGE), v(SEX), v(BASELINE), v(SES), v(PREV_SDQ), v(OUTCOME));
        let x = DMatrix::from_fn(n, 11, |r, c| match c {
            0 => 1.0,
            1 => dep[r],
            2 => time[r],
            3 => age[r],
            4 => sex[r],
            5 => base[r],
            6..=9 => f64::from(u8::from(ses[r] as usize == c - 5)),
            _ => sdq[r],
        });
        let xtx = x.transpose() * &x;
        let beta = xtx.cholesky().unwrap().solve(&(x.transpose() * DVector::from_vec(y)));
        let o = &cfg.outcome;
        let truth = [
            o.intercept, o.depression, o.wave, o.age, o.sex, o.baseline, o.ses[0], o.ses[1], o.ses[2], o.ses[3],
            o.sdq,
        ];
        // The intercept is an extrapolation to age 0 and SDQ 0; its sampling
        // SD at this n is about 0.017, so it gets a wider band than the slopes.
        assert!((beta[0] - truth[0]).abs() < 0.06, "intercept {}", beta[0]);
        for (b, t) in beta.iter().zip(truth).skip(1) {
            assert!((b - t).abs() < 0.01, "estimate {b} vs {t}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate(&SimConfig::default()).unwrap();
        let b = simulate(&SimConfig::default()).unwrap();
        assert_eq!(a.observed, b.observed);
    }

    #[test]
    fn config_errors_carry_pointers() {
        let err = SimConfig::from_json(r#"{"cluster_size":{"location":3.3,"scale":0.5,"lower":9,"upper":"x"}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::BadConfig { ref pointer, .. } if pointer == "/cluster_size/upper"));
        let err = SimConfig::from_json(r#"{"ses_probs":[0.5,0.5,0.5,0,0]}"#).unwrap_err();
        assert!(matches!(err, Error::BadConfig { ref pointer, .. } if pointer == "/ses_probs"));
        let cfg = SimConfig::from_json(r#"{"n_students":12,"n_schools":2}"#).unwrap();
        assert_eq!(simulate(&cfg).unwrap().observed.n_rows(), 36);
    }
}
