//! Coded predictor matrices.
//!
//! Row = variable being imputed, column = candidate predictor. Codes:
//! `0` excluded, `1` fixed effect, `2` fixed effect plus random slope,
//! `3` fixed effect plus cluster mean, `-2` cluster identifier.

use std::collections::BTreeMap;

use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ReshapeMap, Shape};
use crate::error::{Error, Result};

pub const EXCLUDED: i8 = 0;
pub const FIXED: i8 = 1;
pub const RANDOM_SLOPE: i8 = 2;
pub const CLUSTER_MEAN: i8 = 3;
pub const CLUSTER: i8 = -2;

const VALID_CODES: [i8; 5] = [CLUSTER, EXCLUDED, FIXED, RANDOM_SLOPE, CLUSTER_MEAN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorMatrix {
    names: Vec<String>,
    /// Row-major `names.len()²` codes.
    codes: Vec<i8>,
}

impl PredictorMatrix {
    /// All-zero matrix over `names`.
    pub fn zeros(names: &[&str]) -> Self {
        PredictorMatrix {
            names: names.iter().map(|s| s.to_string()).collect(),
            codes: vec![0; names.len() * names.len()],
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn pos(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn get(&self, row: &str, col: &str) -> Result<i8> {
        let (r, c) = (self.pos(row)?, self.pos(col)?);
        Ok(self.codes[r * self.len() + c])
    }

    pub fn code_at(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.len() + c]
    }

    /// Codes of one row, in `names()` order.
    pub fn row(&self, name: &str) -> Result<&[i8]> {
        let r = self.pos(name)?;
        let n = self.len();
        Ok(&self.codes[r * n..(r + 1) * n])
    }

    pub fn set(&mut self, row: &str, col: &str, code: i8) -> Result<()> {
        check_code(code)?;
        let (r, c) = (self.pos(row)?, self.pos(col)?);
        if r == c && code != 0 {
            return Err(Error::InvalidSpec(format!("diagonal entry for `{row}` must be 0")));
        }
        let n = self.len();
        self.codes[r * n + c] = code;
        Ok(())
    }

    /// Set a whole column (every row except the diagonal).
    pub fn set_column(&mut self, col: &str, code: i8) -> Result<()> {
        check_code(code)?;
        let c = self.pos(col)?;
        let n = self.len();
        for r in (0..n).filter(|&r| r != c) {
            self.codes[r * n + c] = code;
        }
        Ok(())
    }

    /// Copy over the names of `d`, in dataset order. Names absent from this
    /// matrix get all-zero rows and columns; names unknown to `d` are errors.
    pub fn aligned(&self, d: &Dataset) -> Result<PredictorMatrix> {
        if let Some(extra) = self.names.iter().find(|n| !d.has_column(n)) {
            return Err(Error::UnknownColumn(extra.clone()));
        }
        let names = d.names();
        let mut out = PredictorMatrix::zeros(&names);
        for (r, rn) in self.names.iter().enumerate() {
            let rr = out.pos(rn)?;
            for (c, cn) in self.names.iter().enumerate() {
                let cc = out.pos(cn)?;
                out.codes[rr * names.len() + cc] = self.code_at(r, c);
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Structural checks that do not depend on the method vector.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for r in 0..n {
            if self.code_at(r, r) != 0 {
                return Err(Error::InvalidSpec(format!(
                    "diagonal entry for `{}` must be 0",
                    self.names[r]
                )));
            }
            let mut clusters = 0;
            for c in 0..n {
                let code = self.code_at(r, c);
                check_code(code)?;
                clusters += usize::from(code == CLUSTER);
            }
            if clusters > 1 {
                return Err(Error::InvalidSpec(format!(
                    "row `{}` names more than one cluster variable",
                    self.names[r]
                )));
            }
        }
        Ok(())
    }
}

fn check_code(code: i8) -> Result<()> {
    if VALID_CODES.contains(&code) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("predictor code {code} is not one of -2, 0, 1, 2, 3")))
    }
}

impl Serialize for PredictorMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Row<'a>(&'a PredictorMatrix, usize);
        impl Serialize for Row<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                let m = self.0;
                let mut map = serializer.serialize_map(Some(m.len()))?;
                for (c, name) in m.names.iter().enumerate() {
                    map.serialize_entry(name, &m.code_at(self.1, c))?;
                }
                map.end()
            }
        }
        let mut map = serializer.serialize_map(Some(self.len()))?;
        for (r, name) in self.names.iter().enumerate() {
            map.serialize_entry(name, &Row(self, r))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PredictorMatrix {
    /// Rows and columns are keyed by name; omitted entries are 0. Names are
    /// stored sorted; use [`PredictorMatrix::aligned`] to match a dataset.
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = BTreeMap::<String, BTreeMap<String, i8>>::deserialize(deserializer)?;
        let mut names: Vec<&str> = raw.keys().map(String::as_str).collect();
        for cols in raw.values() {
            names.extend(cols.keys().map(String::as_str));
        }
        names.sort_unstable();
        names.dedup();
        let mut m = PredictorMatrix::zeros(&names);
        for (r, cols) in &raw {
            for (c, &code) in cols {
                if r == c && code == 0 {
                    continue;
                }
                m.set(r, c, code).map_err(D::Error::custom)?;
            }
        }
        m.validate().map_err(D::Error::custom)?;
        Ok(m)
    }
}

/// Every other column predicts every column.
pub fn default_predictor_matrix(d: &Dataset) -> PredictorMatrix {
    let names = d.names();
    let n = names.len();
    let mut m = PredictorMatrix::zeros(&names);
    for r in 0..n {
        for c in (0..n).filter(|&c| c != r) {
            m.codes[r * n + c] = FIXED;
        }
    }
    m
}

/// Moving-time-window matrix: starting from the default, a wave-`t` row
/// drops wave-`s` predictors whenever their positions in the sorted wave
/// list differ by more than `window`.
///
/// Time-varying columns are located through `map` (`stub.t` names).
/// `anchors` pins time-fixed columns to a wave, e.g. a baseline measurement
/// taken at wave 1; the wave list is the union of `map.times` and the anchor
/// waves. Other time-fixed columns are untouched.
pub fn mtw_predictor_matrix(
    d: &Dataset,
    map: &ReshapeMap,
    window: usize,
    anchors: &[(&str, i64)],
) -> Result<PredictorMatrix> {
    if d.shape() != Shape::Wide {
        return Err(Error::InvalidDataset("moving time window needs a wide dataset".into()));
    }
    let mut waves: Vec<i64> = map.times.clone();
    for &(name, t) in anchors {
        d.index_of(name)?;
        waves.push(t);
    }
    waves.sort_unstable();
    waves.dedup();
    let names = d.names();
    let mut index = Vec::with_capacity(names.len());
    for name in &names {
        let t = match anchors.iter().find(|(a, _)| a == name) {
            Some(&(_, t)) => Some(t),
            None => wave_time(map, name)?,
        };
        index.push(t.map(|t| waves.iter().position(|&w| w == t).expect("wave listed")));
    }
    let mut m = default_predictor_matrix(d);
    let n = names.len();
    for r in 0..n {
        for c in 0..n {
            if let (Some(a), Some(b)) = (index[r], index[c]) {
                if a.abs_diff(b) > window {
                    m.codes[r * n + c] = EXCLUDED;
                }
            }
        }
    }
    Ok(m)
}

/// Wave of a `stub.t` column, `None` for time-fixed columns.
fn wave_time(map: &ReshapeMap, name: &str) -> Result<Option<i64>> {
    if map.fixed.iter().any(|f| f == name) {
        return Ok(None);
    }
    let Some((stub, suffix)) = name.rsplit_once('.') else {
        return Ok(None);
    };
    if !map.stubs.iter().any(|s| s == stub) {
        return Ok(None);
    }
    match suffix.parse::<i64>() {
        Ok(t) if map.times.contains(&t) => Ok(Some(t)),
        _ => Err(Error::MalformedWideName(name.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, ColumnSpec, Role};
    use proptest::prelude::*;

    fn frame(names: &[&str]) -> Dataset {
        let mut cols = vec![Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0, 2.0])];
        cols.extend(
            names
                .iter()
                .map(|n| Column::complete(ColumnSpec::continuous(*n, Role::Analysis), vec![0.0, 1.0])),
        );
        Dataset::new(Shape::Wide, cols).unwrap()
    }

    fn cats_wide() -> Dataset {
        frame(&[
            "school", "age", "sex", "ses", "numeracy_scoreW1",
            "prev_dep.3", "prev_dep.5", "prev_dep.7",
            "numeracy_score.3", "numeracy_score.5", "numeracy_score.7",
            "prev_sdq.3", "prev_sdq.5", "prev_sdq.7",
        ])
    }

    fn cats_map() -> ReshapeMap {
        ReshapeMap::new(
            &["prev_dep", "numeracy_score", "prev_sdq"],
            &[3, 5, 7],
            "time",
            &["school", "id", "age", "sex", "ses", "numeracy_scoreW1"],
        )
        .unwrap()
    }

    fn dense(m: &PredictorMatrix) -> Vec<Vec<i8>> {
        (0..m.len()).map(|r| (0..m.len()).map(|c| m.code_at(r, c)).collect()).collect()
    }

    #[test]
    fn default_three_columns() {
        let d = Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0]),
                Column::complete(ColumnSpec::continuous("a", Role::Analysis), vec![1.0]),
                Column::complete(ColumnSpec::continuous("b", Role::Analysis), vec![1.0]),
            ],
        )
        .unwrap();
        let m = default_predictor_matrix(&d);
        assert_eq!(dense(&m), vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]);
    }

    #[test]
    fn default_single_column() {
        let d = Dataset::new(
            Shape::Wide,
            vec![Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0])],
        )
        .unwrap();
        assert_eq!(dense(&default_predictor_matrix(&d)), vec![vec![0]]);
    }

    #[test]
    fn zeroing_identifiers_matches_listing() {
        let d = cats_wide();
        let mut m = default_predictor_matrix(&d);
        m.set_column("id", 0).unwrap();
        m.set_column("school", 0).unwrap();
        for r in d.names() {
            for c in d.names() {
                let want = i8::from(r != c && c != "id" && c != "school");
                assert_eq!(m.get(r, c).unwrap(), want, "{r} <- {c}");
            }
        }
    }

    /// The hand-written window-1 matrix from the case study.
    fn hand_built(d: &Dataset) -> PredictorMatrix {
        let names = d.names();
        let grep = |pat: &str| -> Vec<&str> { names.iter().copied().filter(|n| n.contains(pat)).collect() };
        let mut m = default_predictor_matrix(d);
        m.set_column("id", 0).unwrap();
        m.set_column("school", 0).unwrap();
        let mut zero = |rows: &[&str], cols: &[&str]| {
            for r in rows {
                for c in cols {
                    m.set(r, c, 0).unwrap();
                }
            }
        };
        let (w5, w7, w3) = (grep("5"), grep("7"), grep("3"));
        zero(&["numeracy_scoreW1"], &[w5.as_slice(), w7.as_slice()].concat());
        zero(&["prev_dep.3", "prev_sdq.3", "numeracy_score.3"], &w7);
        zero(&["prev_dep.5", "prev_sdq.5", "numeracy_score.5"], &["numeracy_scoreW1"]);
        zero(&["prev_dep.7", "prev_sdq.7", "numeracy_score.7"], &w3);
        zero(&["prev_dep.7", "prev_sdq.7", "numeracy_score.7"], &["numeracy_scoreW1"]);
        m
    }

    #[test]
    fn window_one_reproduces_hand_built_matrix() {
        let d = cats_wide();
        let mut m = mtw_predictor_matrix(&d, &cats_map(), 1, &[("numeracy_scoreW1", 1)]).unwrap();
        m.set_column("id", 0).unwrap();
        m.set_column("school", 0).unwrap();
        assert_eq!(m, hand_built(&d));
        assert_eq!(m.get("prev_dep.3", "numeracy_score.7").unwrap(), 0);
        assert_eq!(m.get("prev_dep.3", "numeracy_score.5").unwrap(), 1);
    }

    #[test]
    fn window_two_drops_only_first_last_pairs() {
        let d = cats_wide();
        let m = mtw_predictor_matrix(&d, &cats_map(), 2, &[("numeracy_scoreW1", 1)]).unwrap();
        let def = default_predictor_matrix(&d);
        // Positions: wave 1 -> 0, 3 -> 1, 5 -> 2, 7 -> 3. Distance 3 only
        // between wave 1 and wave 7.
        let wave = |n: &str| -> Option<i64> {
            if n == "numeracy_scoreW1" {
                Some(1)
            } else {
                ReshapeMap::parse_wide_name(n).map(|(_, t)| t)
            }
        };
        for r in d.names() {
            for c in d.names() {
                let dropped = matches!((wave(r), wave(c)), (Some(1), Some(7)) | (Some(7), Some(1)));
                let want = if dropped { 0 } else { def.get(r, c).unwrap() };
                assert_eq!(m.get(r, c).unwrap(), want, "{r} <- {c}");
            }
        }
    }

    #[test]
    fn malformed_wave_suffix() {
        let d = frame(&["prev_dep.x"]);
        let map = ReshapeMap::new(&["prev_dep"], &[3], "time", &["id"]).unwrap();
        assert!(matches!(
            mtw_predictor_matrix(&d, &map, 1, &[]),
            Err(Error::MalformedWideName(n)) if n == "prev_dep.x"
        ));
    }

    #[test]
    fn json_round_trip_and_alignment() {
        let d = cats_wide();
        let mut m = default_predictor_matrix(&d);
        m.set_column("school", CLUSTER).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: PredictorMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back.aligned(&d).unwrap(), m);
        let sparse: PredictorMatrix = serde_json::from_str(r#"{"age":{"sex":1}}"#).unwrap();
        let al = sparse.aligned(&d).unwrap();
        assert_eq!(al.get("age", "sex").unwrap(), 1);
        assert_eq!(al.get("sex", "age").unwrap(), 0);
    }

    #[test]
    fn invalid_codes_rejected() {
        assert!(serde_json::from_str::<PredictorMatrix>(r#"{"a":{"b":4}}"#).is_err());
        assert!(serde_json::from_str::<PredictorMatrix>(r#"{"a":{"a":1}}"#).is_err());
        assert!(serde_json::from_str::<PredictorMatrix>(r#"{"a":{"b":-2,"c":-2}}"#).is_err());
    }

    proptest! {
        #[test]
        fn wide_window_equals_default(waves in proptest::collection::btree_set(1i64..40, 1..6), extra in 0usize..3) {
            let times: Vec<i64> = waves.into_iter().collect();
            let mut names = vec!["age".to_string()];
            for t in &times {
                names.push(format!("y.{t}"));
                names.push(format!("x.{t}"));
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let d = frame(&refs);
            let map = ReshapeMap::new(&["y", "x"], &times, "time", &["id", "age"]).unwrap();
            let m = mtw_predictor_matrix(&d, &map, times.len() + extra, &[]).unwrap();
            prop_assert_eq!(m, default_predictor_matrix(&d));
        }
    }
}
