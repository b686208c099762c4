//! Rubin's rules for combining per-imputation fits.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::io::write_atomic;
use crate::data::{incomplete_fraction, Dataset};
use crate::error::{Error, Result};
use crate::fitters::LmmFit;

/// Point estimates and standard errors from one completed-data analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    /// `(name, estimate, se)` per parameter.
    pub params: Vec<(String, f64, f64)>,
    /// `(name, variance, sd)` per variance component.
    #[serde(default)]
    pub components: Vec<(String, f64, f64)>,
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl Estimates {
    pub fn new(params: Vec<(String, f64, f64)>) -> Self {
        Estimates {
            params,
            components: Vec::new(),
            converged: true,
        }
    }
}

impl From<&LmmFit> for Estimates {
    fn from(f: &LmmFit) -> Self {
        Estimates {
            params: f.fixed.iter().map(|p| (p.name.clone(), p.estimate, p.se)).collect(),
            components: f.components.iter().map(|c| (c.name.clone(), c.variance, c.sd)).collect(),
            converged: f.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledParam {
    pub name: String,
    /// Q̄
    pub estimate: f64,
    /// W
    pub within: f64,
    /// B
    pub between: f64,
    /// T
    pub total: f64,
    pub se: f64,
    /// Infinite when the between-imputation variance is zero (written as
    /// `null` in JSON).
    #[serde(serialize_with = "ser_df", deserialize_with = "de_df")]
    pub df: f64,
    pub fmi: f64,
}

/// Component averages. `sd` is the mean of the per-fit SDs, not the root of
/// the mean variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledComponent {
    pub name: String,
    pub variance: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledResult {
    pub m: usize,
    pub non_converged: usize,
    pub params: Vec<PooledParam>,
    pub components: Vec<PooledComponent>,
}

fn ser_df<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_df<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl PooledResult {
    pub fn param(&self, name: &str) -> Result<&PooledParam> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn component(&self, name: &str) -> Result<&PooledComponent> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Columns `parameter,estimate,se,df,fmi`; components follow with their
    /// pooled variance in `estimate` and the remaining fields `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,estimate,se,df,fmi\n");
        for p in &self.params {
            let df = if p.df.is_finite() { p.df.to_string() } else { "Inf".into() };
            out.push_str(&format!("{},{},{},{},{}\n", p.name, p.estimate, p.se, df, p.fmi));
        }
        for c in &self.components {
            out.push_str(&format!("var({}),{},NA,NA,NA\n", c.name, c.variance));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// Pool all fits, counting non-converged ones.
pub fn pool(fits: &[Estimates]) -> Result<PooledResult> {
    let m = fits.len();
    if m < 2 {
        return Err(Error::TooFewImputations(m));
    }
    let first = &fits[0];
    let aligned = |a: &[(String, f64, f64)], b: &[(String, f64, f64)]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.0 == y.0)
    };
    if fits
        .iter()
        .any(|f| !aligned(&f.params, &first.params) || !aligned(&f.components, &first.components))
    {
        return Err(Error::MisalignedParams);
    }
    let mf = m as f64;
    let params = first
        .params
        .iter()
        .enumerate()
        .map(|(j, (name, _, _))| {
            let q0 = first.params[j].1;
            // Identical estimates give B = 0 exactly, not rounding noise.
            let (q, b) = if fits.iter().all(|f| f.params[j].1 == q0) {
                (q0, 0.0)
            } else {
                let q = mean(fits.iter().map(|f| f.params[j].1));
                (q, fits.iter().map(|f| (f.params[j].1 - q).powi(2)).sum::<f64>() / (mf - 1.0))
            };
            let w = mean(fits.iter().map(|f| f.params[j].2 * f.params[j].2));
            let inflated = (1.0 + 1.0 / mf) * b;
            let t = w + inflated;
            let df = if b > 0.0 {
                (mf - 1.0) * (1.0 + w / inflated).powi(2)
            } else {
                f64::INFINITY
            };
            PooledParam {
                name: name.clone(),
                estimate: q,
                within: w,
                between: b,
                total: t,
                se: t.sqrt(),
                df,
                fmi: if t > 0.0 { inflated / t } else { 0.0 },
            }
        })
        .collect();
    let components = first
        .components
        .iter()
        .enumerate()
        .map(|(j, (name, _, _))| PooledComponent {
            name: name.clone(),
            variance: mean(fits.iter().map(|f| f.components[j].1)),
            sd: mean(fits.iter().map(|f| f.components[j].2)),
        })
        .collect();
    Ok(PooledResult {
        m,
        non_converged: fits.iter().filter(|f| !f.converged).count(),
        params,
        components,
    })
}

/// Pool only the converged fits.
pub fn pool_strict(fits: &[Estimates]) -> Result<PooledResult> {
    let kept: Vec<Estimates> = fits.iter().filter(|f| f.converged).cloned().collect();
    if kept.len() < fits.len() {
        log::warn!("strict pooling drops {} non-converged fits", fits.len() - kept.len());
    }
    pool(&kept)
}

pub fn pool_lmm(fits: &[LmmFit], strict: bool) -> Result<PooledResult> {
    let est: Vec<Estimates> = fits.iter().map(Estimates::from).collect();
    if strict {
        pool_strict(&est)
    } else {
        pool(&est)
    }
}

/// At least as many imputations as the percentage of incomplete records,
/// never fewer than 2.
pub fn imputation_count_rule(d: &Dataset) -> usize {
    count_for_fraction(incomplete_fraction(d))
}

pub fn count_for_fraction(fraction: f64) -> usize {
    // Round away float noise such as 0.46 * 100 = 46.00000000000001.
    let pct = (fraction * 100.0 * 1e9).round() / 1e9;
    let m = pct.ceil() as usize;
    if m < 2 {
        log::warn!("incomplete fraction {fraction} suggests {m} imputations; using 2");
        2
    } else {
        m
    }
}
