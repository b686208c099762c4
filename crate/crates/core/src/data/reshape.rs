//! Conversion between long (one row per unit and wave) and wide (one row per
//! unit, `stub.time` columns) layouts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::column::{Column, ColumnSpec, Role};
use super::dataset::{Dataset, Shape};
use crate::error::{Error, Result};

/// Which columns vary over time and at which waves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshapeMap {
    /// Time-varying variable names, in output order.
    pub stubs: Vec<String>,
    /// Wave values, in output order.
    pub times: Vec<i64>,
    /// Name of the time column in long layout.
    pub time_column: String,
    /// Time-fixed columns (including the unit id), in output order.
    pub fixed: Vec<String>,
}

impl ReshapeMap {
    pub fn new(
        stubs: &[&str],
        times: &[i64],
        time_column: &str,
        fixed: &[&str],
    ) -> Result<Self> {
        let map = ReshapeMap {
            stubs: stubs.iter().map(|s| s.to_string()).collect(),
            times: times.to_vec(),
            time_column: time_column.to_string(),
            fixed: fixed.iter().map(|s| s.to_string()).collect(),
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if let Some(s) = self.stubs.iter().find(|s| self.fixed.contains(s)) {
            return Err(Error::InvalidDataset(format!(
                "`{s}` is declared both time-varying and time-fixed"
            )));
        }
        let mut times = self.times.clone();
        times.sort_unstable();
        times.dedup();
        if times.len() != self.times.len() || times.is_empty() {
            return Err(Error::InvalidDataset(
                "wave list must be non-empty and distinct".into(),
            ));
        }
        Ok(())
    }

    pub fn wide_name(stub: &str, time: i64) -> String {
        format!("{stub}.{time}")
    }

    /// Split `stub.time`; `None` if the suffix is not an integer.
    pub fn parse_wide_name(name: &str) -> Option<(&str, i64)> {
        let (stub, t) = name.rsplit_once('.')?;
        Some((stub, t.parse().ok()?))
    }

    /// Wave position of a wide column, if it belongs to this map.
    pub fn wave_of<'a>(&self, name: &'a str) -> Option<(usize, &'a str)> {
        let (stub, t) = Self::parse_wide_name(name)?;
        if !self.stubs.iter().any(|s| s == stub) {
            return None;
        }
        let idx = self.times.iter().position(|&x| x == t)?;
        Some((idx, stub))
    }
}

pub fn reshape_long_to_wide(d: &Dataset, map: &ReshapeMap) -> Result<Dataset> {
    map.validate()?;
    if d.shape() != Shape::Long {
        return Err(Error::InvalidDataset("expected a long dataset".into()));
    }
    let time_idx = d.index_of(&map.time_column)?;
    for c in d.columns() {
        let name = c.name();
        if name != map.time_column
            && !map.stubs.iter().any(|s| s == name)
            && !map.fixed.iter().any(|s| s == name)
        {
            return Err(Error::UnknownStub(name.to_string()));
        }
    }
    let id = d.unit_id();
    let times = &d.columns()[time_idx];

    // Units in first-appearance order; row lookup per (unit, wave).
    let mut unit_order: Vec<i64> = Vec::new();
    let mut unit_rows: HashMap<i64, Vec<usize>> = HashMap::new();
    let mut cell: HashMap<(i64, usize), usize> = HashMap::new();
    for row in 0..d.n_rows() {
        let u = id.values()[row] as i64;
        let t = times.values()[row] as i64;
        let w = map
            .times
            .iter()
            .position(|&x| x == t)
            .ok_or_else(|| Error::InvalidDataset(format!("time {t} not in the wave list")))?;
        if cell.insert((u, w), row).is_some() {
            return Err(Error::DuplicateTimePoint { unit: u, time: t });
        }
        unit_rows
            .entry(u)
            .or_insert_with(|| {
                unit_order.push(u);
                Vec::new()
            })
            .push(row);
    }
    let unbalanced = unit_order.len() * map.times.len() != d.n_rows();
    if unbalanced {
        log::warn!(
            "unbalanced long data: {} of {} unit-waves absent; materialized as missing",
            unit_order.len() * map.times.len() - d.n_rows(),
            unit_order.len() * map.times.len()
        );
    }

    let mut out = Vec::with_capacity(map.fixed.len() + map.stubs.len() * map.times.len());
    for name in &map.fixed {
        let c = d.column(name)?;
        let cells = unit_order.iter().map(|u| {
            let rows = &unit_rows[u];
            rows.iter().find_map(|&r| c.get(r))
        });
        out.push(Column::from_options(c.spec().clone(), cells));
    }
    for (w, &t) in map.times.iter().enumerate() {
        for stub in &map.stubs {
            let c = d.column(stub)?;
            let spec = ColumnSpec::new(ReshapeMap::wide_name(stub, t), c.spec().kind.clone(), c.spec().role);
            let cells = unit_order
                .iter()
                .map(|u| cell.get(&(*u, w)).and_then(|&r| c.get(r)));
            out.push(Column::from_options(spec, cells));
        }
    }
    Dataset::new(Shape::Wide, out)
}

pub fn reshape_wide_to_long(d: &Dataset, map: &ReshapeMap) -> Result<Dataset> {
    map.validate()?;
    if d.shape() != Shape::Wide {
        return Err(Error::InvalidDataset("expected a wide dataset".into()));
    }
    for c in d.columns() {
        let name = c.name();
        if map.fixed.iter().any(|f| f == name) {
            continue;
        }
        if map.wave_of(name).is_none() {
            return Err(Error::MalformedWideName(name.to_string()));
        }
    }
    let n = d.n_rows();
    let nt = map.times.len();
    let mut out = Vec::new();
    for name in &map.fixed {
        let c = d.column(name)?;
        let cells = (0..n).flat_map(|r| std::iter::repeat_n(c.get(r), nt));
        out.push(Column::from_options(c.spec().clone(), cells));
    }
    let time_spec = ColumnSpec::continuous(map.time_column.clone(), Role::Time);
    let tvals = (0..n).flat_map(|_| map.times.iter().map(|&t| t as f64));
    out.push(Column::complete(time_spec, tvals.collect()));
    for stub in &map.stubs {
        let cols = map
            .times
            .iter()
            .map(|&t| {
                let wn = ReshapeMap::wide_name(stub, t);
                d.column(&wn).map_err(|_| Error::MalformedWideName(wn))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ColumnSpec::new(stub.clone(), cols[0].spec().kind.clone(), cols[0].spec().role);
        let cells = (0..n).flat_map(|r| cols.iter().map(move |c| c.get(r)));
        out.push(Column::from_options(spec, cells));
    }
    Dataset::new(Shape::Long, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnKind;

    fn toy_long(rows: &[(i64, i64, Option<f64>, Option<f64>)]) -> Dataset {
        let id = Column::complete(
            ColumnSpec::continuous("id", Role::UnitId),
            rows.iter().map(|r| r.0 as f64).collect(),
        );
        let time = Column::complete(
            ColumnSpec::continuous("time", Role::Time),
            rows.iter().map(|r| r.1 as f64).collect(),
        );
        let dep = Column::from_options(
            ColumnSpec::new("prev_dep", ColumnKind::binary(), Role::Analysis),
            rows.iter().map(|r| r.2),
        );
        let y = Column::from_options(
            ColumnSpec::continuous("numeracy_score", Role::Analysis),
            rows.iter().map(|r| r.3),
        );
        Dataset::new(Shape::Long, vec![id, time, dep, y]).unwrap()
    }

    fn map357() -> ReshapeMap {
        ReshapeMap::new(&["prev_dep", "numeracy_score"], &[3, 5, 7], "time", &["id"]).unwrap()
    }

    #[test]
    fn figure_one_participant() {
        // id=1: prev_dep (1,1,1), numeracy_score (2,2,2).
        let d = toy_long(&[
            (1, 3, Some(1.0), Some(2.0)),
            (1, 5, Some(1.0), Some(2.0)),
            (1, 7, Some(1.0), Some(2.0)),
        ]);
        let w = reshape_long_to_wide(&d, &map357()).unwrap();
        assert_eq!(w.n_rows(), 1);
        assert_eq!(
            w.names(),
            vec![
                "id",
                "prev_dep.3",
                "numeracy_score.3",
                "prev_dep.5",
                "numeracy_score.5",
                "prev_dep.7",
                "numeracy_score.7"
            ]
        );
        for t in [3, 5, 7] {
            assert_eq!(w.column(&format!("prev_dep.{t}")).unwrap().get(0), Some(1.0));
            assert_eq!(w.column(&format!("numeracy_score.{t}")).unwrap().get(0), Some(2.0));
        }
        let back = reshape_wide_to_long(&w, &map357()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn single_unit_single_wave_is_identity_with_suffix() {
        let d = toy_long(&[(4, 3, Some(0.0), Some(-1.5))]);
        let map = ReshapeMap::new(&["prev_dep", "numeracy_score"], &[3], "time", &["id"]).unwrap();
        let w = reshape_long_to_wide(&d, &map).unwrap();
        assert_eq!(w.names(), vec!["id", "prev_dep.3", "numeracy_score.3"]);
        assert_eq!(w.get(0, 0), Some(4.0));
        assert_eq!(w.get(0, 1), Some(0.0));
        assert_eq!(w.get(0, 2), Some(-1.5));
    }

    #[test]
    fn absent_wave_is_materialized_missing() {
        let d = toy_long(&[(1, 3, Some(1.0), Some(0.5)), (1, 7, Some(0.0), None)]);
        let w = reshape_long_to_wide(&d, &map357()).unwrap();
        let expect: Vec<Option<f64>> = vec![Some(1.0), Some(1.0), Some(0.5), None, None, Some(0.0), None];
        let got: Vec<Option<f64>> = (0..w.n_cols()).map(|c| w.get(0, c)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn two_by_two_wide_to_long_enumeration() {
        let map = ReshapeMap::new(&["y"], &[1, 2], "time", &["id"]).unwrap();
        let id = Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![10.0, 20.0]);
        let y1 = Column::from_options(ColumnSpec::continuous("y.1", Role::Analysis), [Some(1.0), None]);
        let y2 = Column::from_options(ColumnSpec::continuous("y.2", Role::Analysis), [Some(2.0), Some(4.0)]);
        let w = Dataset::new(Shape::Wide, vec![id, y1, y2]).unwrap();
        let l = reshape_wide_to_long(&w, &map).unwrap();
        let rows: Vec<(Option<f64>, Option<f64>, Option<f64>)> =
            (0..l.n_rows()).map(|r| (l.get(r, 0), l.get(r, 1), l.get(r, 2))).collect();
        assert_eq!(
            rows,
            vec![
                (Some(10.0), Some(1.0), Some(1.0)),
                (Some(10.0), Some(2.0), Some(2.0)),
                (Some(20.0), Some(1.0), None),
                (Some(20.0), Some(2.0), Some(4.0)),
            ]
        );
    }

    #[test]
    fn duplicate_time_point_rejected() {
        let id = Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0, 1.0]);
        let t = Column::complete(ColumnSpec::continuous("time", Role::Time), vec![3.0, 3.0]);
        let err = Dataset::new(Shape::Long, vec![id, t]).unwrap_err();
        assert!(matches!(err, Error::DuplicateTimePoint { unit: 1, time: 3 }));
    }

    #[test]
    fn unknown_stub_rejected() {
        let d = toy_long(&[(1, 3, Some(1.0), Some(2.0))]);
        let map = ReshapeMap::new(&["prev_dep"], &[3], "time", &["id"]).unwrap();
        assert!(matches!(
            reshape_long_to_wide(&d, &map),
            Err(Error::UnknownStub(s)) if s == "numeracy_score"
        ));
    }

    #[test]
    fn malformed_wide_name_rejected() {
        let map = ReshapeMap::new(&["y"], &[1], "time", &["id"]).unwrap();
        let id = Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0]);
        let y = Column::complete(ColumnSpec::continuous("y", Role::Analysis), vec![1.0]);
        let w = Dataset::new(Shape::Wide, vec![id, y]).unwrap();
        assert!(matches!(
            reshape_wide_to_long(&w, &map),
            Err(Error::MalformedWideName(s)) if s == "y"
        ));
    }

    /// Balanced long data sorted by unit then wave, with one time-fixed
    /// column and `stubs` time-varying ones, about 30% missing.
    fn balanced(units: usize, waves: usize, stubs: usize, seed: u64) -> (Dataset, ReshapeMap) {
        let mut rng = crate::stochastic::RngStream::new(seed, 0);
        let times: Vec<i64> = (0..waves as i64).map(|w| 2 * w + 1).collect();
        let cell = |rng: &mut crate::stochastic::RngStream| (!rng.bernoulli(0.3)).then(|| rng.normal(0.0, 2.0));
        let n = units * waves;
        let unit: Vec<f64> = (0..n).map(|r| (r / waves) as f64 + 10.0).collect();
        let time: Vec<f64> = (0..n).map(|r| times[r % waves] as f64).collect();
        let fixed_per_unit: Vec<Option<f64>> = (0..units).map(|_| cell(&mut rng)).collect();
        let mut cols = vec![
            Column::complete(ColumnSpec::continuous("id", Role::UnitId), unit),
            Column::from_options(
                ColumnSpec::continuous("f", Role::Analysis),
                (0..n).map(|r| fixed_per_unit[r / waves]),
            ),
            Column::complete(ColumnSpec::continuous("time", Role::Time), time),
        ];
        let names: Vec<String> = (0..stubs).map(|k| format!("s{k}")).collect();
        for name in &names {
            let cells: Vec<Option<f64>> = (0..n).map(|_| cell(&mut rng)).collect();
            cols.push(Column::from_options(ColumnSpec::continuous(name.clone(), Role::Analysis), cells));
        }
        let stub_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let map = ReshapeMap::new(&stub_refs, &times, "time", &["id", "f"]).unwrap();
        (Dataset::new(Shape::Long, cols).unwrap(), map)
    }

    proptest::proptest! {
        #[test]
        fn long_wide_long_is_identity(units in 1usize..8, waves in 1usize..5, stubs in 1usize..4, seed in 0u64..10_000) {
            let (d, map) = balanced(units, waves, stubs, seed);
            let wide = reshape_long_to_wide(&d, &map).unwrap();
            proptest::prop_assert_eq!(wide.n_rows(), units);
            let back = reshape_wide_to_long(&wide, &map).unwrap();
            proptest::prop_assert_eq!(back, d);
        }
    }
}
