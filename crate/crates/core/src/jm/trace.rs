//! Per-sweep parameter records and autocorrelation diagnostics.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Values of every imputation-model parameter at each sweep, stored
/// row-major (sweep × parameter).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainTrace {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ChainTrace {
    pub fn new(names: Vec<String>) -> Self {
        ChainTrace {
            names,
            values: Vec::new(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of sweeps recorded.
    pub fn len(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.values.len() / self.names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "trace row width");
        self.values.extend_from_slice(row);
    }

    pub fn series(&self, param: &str) -> Result<Vec<f64>> {
        let j = self
            .names
            .iter()
            .position(|n| n == param)
            .ok_or_else(|| Error::UnknownParam(param.to_string()))?;
        let k = self.names.len();
        Ok(self.values.iter().skip(j).step_by(k).copied().collect())
    }

    /// Long CSV with columns `iteration,parameter,value`; iterations start at 1.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "parameter", "value"])?;
        for (it, row) in self.values.chunks(self.names.len().max(1)).enumerate() {
            for (name, v) in self.names.iter().zip(row) {
                w.write_record([(it + 1).to_string(), name.clone(), format!("{v}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut names: Vec<String> = Vec::new();
        let mut values = Vec::new();
        let mut current = 0usize;
        let mut col = 0usize;
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::InvalidDataset(format!("malformed trace record {:?}", rec));
            let it: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let name = rec.get(1).ok_or_else(bad)?;
            let v: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if it != current {
                if current != 0 && col != names.len() {
                    return Err(Error::InvalidDataset(format!("iteration {current} is incomplete")));
                }
                current = it;
                col = 0;
            }
            if it == 1 {
                names.push(name.to_string());
            } else if names.get(col).map(String::as_str) != Some(name) {
                return Err(Error::InvalidDataset(format!("iteration {it} lists `{name}` out of order")));
            }
            values.push(v);
            col += 1;
        }
        if current != 0 && col != names.len() {
            return Err(Error::InvalidDataset(format!("iteration {current} is incomplete")));
        }
        Ok(ChainTrace { names, values })
    }
}

/// Lag-`lag` sample autocorrelation.
pub fn autocorr(series: &[f64], lag: usize) -> Result<f64> {
    let n = series.len();
    if lag >= n {
        return Err(Error::InvalidSpec(format!("lag {lag} needs more than {n} values")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateSeries);
    }
    let num: f64 = series
        .iter()
        .zip(&series[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum();
    Ok((num / denom).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::RngStream;

    #[test]
    fn constant_series_is_degenerate() {
        assert!(matches!(autocorr(&[2.0; 50], 1), Err(Error::DegenerateSeries)));
    }

    #[test]
    fn white_noise_has_small_lag_one() {
        let mut rng = RngStream::new(1, 0);
        let s: Vec<f64> = (0..10_000).map(|_| rng.std_normal()).collect();
        assert!(autocorr(&s, 1).unwrap().abs() < 0.05);
    }

    #[test]
    fn ar1_recovers_coefficient() {
        let mut rng = RngStream::new(2, 0);
        let mut x = 0.0;
        let s: Vec<f64> = (0..20_000)
            .map(|_| {
                x = 0.9 * x + rng.std_normal();
                x
            })
            .collect();
        assert!((autocorr(&s, 1).unwrap() - 0.9).abs() < 0.05);
    }

    #[test]
    fn series_and_csv_round_trip() {
        let mut t = ChainTrace::new(vec!["a".into(), "b".into()]);
        t.push(&[1.0, 2.0]);
        t.push(&[3.0, 4.5]);
        assert_eq!(t.series("b").unwrap(), vec![2.0, 4.5]);
        assert!(matches!(t.series("c"), Err(Error::UnknownParam(_))));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(ChainTrace::read_csv(buf.as_slice()).unwrap(), t);
    }
}
