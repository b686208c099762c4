use std::collections::{BTreeMap, HashMap};

use super::column::{Column, ColumnKind, ColumnSpec, Role};
use super::dataset::{Dataset, Shape};
use crate::error::{Error, Result};

/// Replace `col` by 0/1 indicator columns named `col_<level>`.
///
/// Discrete columns use their declared level order. Other columns (cluster
/// ids, integer codes) use their distinct values in ascending order. With
/// `drop_first` the first level is the reference and gets no indicator.
/// Indicators of a structural column become auxiliary predictors.
pub fn dummy_expand(d: &Dataset, col: &str, drop_first: bool) -> Result<Dataset> {
    let idx = d.index_of(col)?;
    let c = &d.columns()[idx];
    if c.has_missing() {
        return Err(Error::MissingInFactor(col.to_string()));
    }
    let (labels, codes): (Vec<String>, Vec<usize>) = match c.spec().kind.levels() {
        Some(levels) => (
            levels.to_vec(),
            c.values().iter().map(|&v| v as usize).collect(),
        ),
        None => {
            let mut distinct: Vec<i64> = c.values().iter().map(|&v| v as i64).collect();
            if c.values().iter().any(|v| v.fract() != 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "`{col}` is continuous and cannot be used as a factor"
                )));
            }
            distinct.sort_unstable();
            distinct.dedup();
            let pos: HashMap<i64, usize> =
                distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            (
                distinct.iter().map(|v| v.to_string()).collect(),
                c.values().iter().map(|&v| pos[&(v as i64)]).collect(),
            )
        }
    };
    let role = if c.spec().role.is_structural() {
        Role::Auxiliary
    } else {
        c.spec().role
    };
    let start = usize::from(drop_first);
    let indicators = labels.iter().enumerate().skip(start).map(|(k, label)| {
        let spec = ColumnSpec::new(format!("{col}_{label}"), ColumnKind::binary(), role);
        let vals = codes.iter().map(|&code| f64::from(u8::from(code == k))).collect();
        Column::complete(spec, vals)
    });
    let mut cols: Vec<Column> = d.columns()[..idx].to_vec();
    cols.extend(indicators);
    cols.extend_from_slice(&d.columns()[idx + 1..]);
    d.with_columns(cols)
}

/// Per-group arithmetic means of `vars` over observed cells. Groups appear in
/// ascending order; a group with no observed cell for a variable yields a
/// masked cell. The result is wide-shaped with `group` as its unit id.
pub fn cluster_aggregate(d: &Dataset, group: &str, vars: &[&str]) -> Result<Dataset> {
    let g = d.column(group)?;
    if g.has_missing() {
        return Err(Error::IncompleteData(group.to_string()));
    }
    let mut rows_of: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (r, &v) in g.values().iter().enumerate() {
        rows_of.entry(v as i64).or_default().push(r);
    }
    let mut out = Vec::with_capacity(vars.len() + 1);
    out.push(Column::complete(
        ColumnSpec::continuous(group, Role::UnitId),
        rows_of.keys().map(|&k| k as f64).collect(),
    ));
    for &name in vars {
        let c = d.column(name)?;
        let cells = rows_of.values().map(|rows| {
            let (sum, n) = rows
                .iter()
                .filter_map(|&r| c.get(r))
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| sum / n as f64)
        });
        let role = if c.spec().role.is_structural() {
            Role::Auxiliary
        } else {
            c.spec().role
        };
        out.push(Column::from_options(ColumnSpec::continuous(name, role), cells));
    }
    Dataset::new(Shape::Wide, out)
}

/// Keep the rows that are observed on every one of `model_vars`.
pub fn available_case_filter(d: &Dataset, model_vars: &[&str]) -> Result<Dataset> {
    let cols = model_vars
        .iter()
        .map(|v| d.column(v))
        .collect::<Result<Vec<_>>>()?;
    let keep: Vec<usize> = (0..d.n_rows())
        .filter(|&r| cols.iter().all(|c| !c.missing()[r]))
        .collect();
    Ok(d.select_rows(&keep))
}

/// Fraction of rows with at least one masked analysis-role cell, in the
/// dataset's own shape. Reshape first to measure the other layout.
pub fn incomplete_fraction(d: &Dataset) -> f64 {
    if d.n_rows() == 0 {
        return 0.0;
    }
    let cols: Vec<&Column> = d.columns_with_role(Role::Analysis).collect();
    let n = (0..d.n_rows())
        .filter(|&r| cols.iter().any(|c| c.missing()[r]))
        .count();
    n as f64 / d.n_rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_school(schools: &[f64], y: &[Option<f64>]) -> Dataset {
        let n = schools.len();
        Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(
                    ColumnSpec::continuous("id", Role::UnitId),
                    (0..n).map(|i| i as f64).collect(),
                ),
                Column::complete(ColumnSpec::continuous("school", Role::ClusterId), schools.to_vec()),
                Column::from_options(ColumnSpec::continuous("y", Role::Analysis), y.iter().copied()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reference_coding_of_three_clusters() {
        let d = with_school(&[1.0, 2.0, 3.0, 1.0], &[Some(0.0); 4]);
        let e = dummy_expand(&d, "school", true).unwrap();
        assert_eq!(e.names(), vec!["id", "school_2", "school_3", "y"]);
        assert_eq!((e.get(0, 1), e.get(0, 2)), (Some(0.0), Some(0.0)));
        assert_eq!((e.get(1, 1), e.get(1, 2)), (Some(1.0), Some(0.0)));
        assert_eq!((e.get(2, 1), e.get(2, 2)), (Some(0.0), Some(1.0)));
        assert_eq!((e.get(3, 1), e.get(3, 2)), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn binary_expands_to_second_level_indicator() {
        let id = Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![0.0, 1.0, 2.0]);
        let sex = Column::complete(
            ColumnSpec::new("sex", ColumnKind::binary(), Role::Analysis),
            vec![0.0, 1.0, 1.0],
        );
        let d = Dataset::new(Shape::Wide, vec![id, sex.clone()]).unwrap();
        let e = dummy_expand(&d, "sex", true).unwrap();
        assert_eq!(e.names(), vec!["id", "sex_1"]);
        assert_eq!(e.column("sex_1").unwrap().values(), sex.values());
    }

    #[test]
    fn forty_schools_give_thirty_nine_indicators() {
        let schools: Vec<f64> = (0..200).map(|i| (i % 40 + 1) as f64).collect();
        let d = with_school(&schools, &vec![Some(1.0); 200]);
        let e = dummy_expand(&d, "school", true).unwrap();
        let dummies: Vec<&Column> = e
            .columns()
            .iter()
            .filter(|c| c.name().starts_with("school_"))
            .collect();
        assert_eq!(dummies.len(), 39);
        for r in 0..200 {
            let s: f64 = dummies.iter().map(|c| c.values()[r]).sum();
            assert!(s <= 1.0);
            let expect_ref = schools[r] == 1.0;
            assert_eq!(s == 0.0, expect_ref);
        }
    }

    #[test]
    fn missing_factor_rejected() {
        let id = Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![0.0, 1.0]);
        let f = Column::from_options(
            ColumnSpec::new("ses", ColumnKind::categorical(3), Role::Analysis),
            [Some(1.0), None],
        );
        let d = Dataset::new(Shape::Wide, vec![id, f]).unwrap();
        assert!(matches!(dummy_expand(&d, "ses", true), Err(Error::MissingInFactor(_))));
    }

    #[test]
    fn aggregate_means_skip_missing() {
        let d = with_school(
            &[1.0, 1.0, 1.0, 2.0, 2.0],
            &[Some(1.0), Some(2.0), Some(3.0), Some(1.0), None],
        );
        let a = cluster_aggregate(&d, "school", &["y"]).unwrap();
        assert_eq!(a.get(0, 1), Some(2.0));
        assert_eq!(a.get(1, 1), Some(1.0));
        let d = with_school(&[1.0, 1.0, 1.0], &[Some(1.0), None, Some(3.0)]);
        let a = cluster_aggregate(&d, "school", &["y"]).unwrap();
        assert_eq!(a.get(0, 1), Some(2.0));
        let d = with_school(&[1.0, 2.0], &[Some(1.0), None]);
        let a = cluster_aggregate(&d, "school", &["y"]).unwrap();
        assert_eq!(a.get(1, 1), None);
    }

    #[test]
    fn available_case_filter_drops_incomplete_rows() {
        let d = with_school(&[1.0, 1.0, 2.0], &[Some(1.0), None, Some(3.0)]);
        let f = available_case_filter(&d, &["y"]).unwrap();
        assert_eq!(f.n_rows(), 2);
        assert!(!f.column("y").unwrap().has_missing());
        let d = with_school(&[1.0, 2.0], &[Some(1.0), Some(2.0)]);
        assert_eq!(available_case_filter(&d, &["y", "school"]).unwrap(), d);
    }

    #[test]
    fn complete_data_has_zero_incomplete_fraction() {
        let d = with_school(&[1.0, 2.0], &[Some(1.0), Some(2.0)]);
        assert_eq!(incomplete_fraction(&d), 0.0);
        let d = with_school(&[1.0, 2.0], &[Some(1.0), None]);
        assert_eq!(incomplete_fraction(&d), 0.5);
    }
}
