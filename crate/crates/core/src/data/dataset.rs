use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::column::{Column, ColumnSpec, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Wide,
    Long,
}

/// Immutable columnar table with an explicit missingness mask.
///
/// Invariants checked at construction: equal column lengths, exactly one
/// unit-id column, at most one time column, structural columns complete and
/// integer-valued, discrete cells hold valid level indices, and row keys are
/// unique (`unit` in wide shape, `(unit, time)` in long shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    columns: Vec<Column>,
}

impl Dataset {
    pub fn new(shape: Shape, columns: Vec<Column>) -> Result<Self> {
        let d = Dataset { shape, columns };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let n = self.columns.first().map_or(0, Column::len);
        let mut names = HashSet::new();
        for c in &self.columns {
            c.spec.validate()?;
            if c.len() != n || c.missing.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "column `{}` has {} rows, expected {n}",
                    c.name(),
                    c.len()
                )));
            }
            if !names.insert(c.name()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate column `{}`",
                    c.name()
                )));
            }
            if c.spec.role.is_structural() {
                if c.has_missing() {
                    return Err(Error::InvalidDataset(format!(
                        "structural column `{}` has missing cells",
                        c.name()
                    )));
                }
                if c.values.iter().any(|v| v.fract() != 0.0 || !v.is_finite()) {
                    return Err(Error::InvalidDataset(format!(
                        "structural column `{}` must hold integers",
                        c.name()
                    )));
                }
            }
            if let Some(k) = c.spec.kind.n_levels() {
                let bad = c
                    .values
                    .iter()
                    .zip(&c.missing)
                    .any(|(&v, &m)| !m && (v.fract() != 0.0 || v < 0.0 || v >= k as f64));
                if bad {
                    return Err(Error::InvalidDataset(format!(
                        "column `{}` holds a value outside its {k} levels",
                        c.name()
                    )));
                }
            }
        }
        let ids: Vec<_> = self.columns_with_role(Role::UnitId).collect();
        if ids.len() != 1 {
            return Err(Error::InvalidDataset(format!(
                "expected exactly one unit-id column, found {}",
                ids.len()
            )));
        }
        let times: Vec<_> = self.columns_with_role(Role::Time).collect();
        if times.len() > 1 {
            return Err(Error::InvalidDataset("more than one time column".into()));
        }
        let id = ids[0];
        let mut seen = HashSet::with_capacity(n);
        match (self.shape, times.first()) {
            (Shape::Long, Some(t)) => {
                for row in 0..n {
                    let key = (id.values[row] as i64, t.values[row] as i64);
                    if !seen.insert(key) {
                        return Err(Error::DuplicateTimePoint {
                            unit: key.0,
                            time: key.1,
                        });
                    }
                }
            }
            (Shape::Wide, _) => {
                for row in 0..n {
                    if !seen.insert((id.values[row] as i64, 0)) {
                        return Err(Error::InvalidDataset(format!(
                            "unit {} appears twice in a wide dataset",
                            id.values[row]
                        )));
                    }
                }
            }
            (Shape::Long, None) => {}
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn into_columns(self) -> Vec<Column> {
        self.columns
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(Column::name).collect()
    }

    pub fn specs(&self) -> Vec<ColumnSpec> {
        self.columns.iter().map(|c| c.spec.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.index_of(name)?])
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name() == name)
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.columns[col].get(row)
    }

    pub fn columns_with_role(&self, role: Role) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(move |c| c.spec.role == role)
    }

    pub fn unit_id(&self) -> &Column {
        self.columns_with_role(Role::UnitId)
            .next()
            .expect("validated: one unit-id column")
    }

    pub fn time(&self) -> Option<&Column> {
        self.columns_with_role(Role::Time).next()
    }

    /// New dataset with the same shape and different columns.
    pub fn with_columns(&self, columns: Vec<Column>) -> Result<Dataset> {
        Dataset::new(self.shape, columns)
    }

    /// Replace one column (same name position), keeping everything else.
    pub fn replace_column(&self, column: Column) -> Result<Dataset> {
        let idx = self.index_of(column.name())?;
        let mut cols = self.columns.clone();
        cols[idx] = column;
        Dataset::new(self.shape, cols)
    }

    /// Replace the values of observed-or-not cells in place of missing ones.
    /// `fills[col]` gives `(row, value)` pairs; mask is cleared for those cells.
    pub fn fill_cells(&self, col: usize, fills: &[(usize, f64)]) -> Result<Dataset> {
        let mut cols = self.columns.clone();
        let c = &mut cols[col];
        for &(row, v) in fills {
            c.values[row] = v;
            c.missing[row] = false;
        }
        Dataset::new(self.shape, cols)
    }

    /// Copy with the given `(column, row, value)` cells set and unmasked.
    /// Only masked cells may be filled.
    pub fn with_fills(&self, fills: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Dataset> {
        let mut cols = self.columns.clone();
        for (col, row, v) in fills {
            let c = &mut cols[col];
            if !c.missing[row] {
                return Err(Error::InvalidDataset(format!(
                    "cell ({row}, `{}`) is observed and cannot be filled",
                    c.name()
                )));
            }
            c.values[row] = v;
            c.missing[row] = false;
        }
        Dataset::new(self.shape, cols)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                spec: c.spec.clone(),
                values: rows.iter().map(|&r| c.values[r]).collect(),
                missing: rows.iter().map(|&r| c.missing[r]).collect(),
            })
            .collect();
        Dataset {
            shape: self.shape,
            columns,
        }
    }

    /// Same data, different column order (all columns must be named).
    pub fn reorder(&self, names: &[&str]) -> Result<Dataset> {
        if names.len() != self.n_cols() {
            return Err(Error::InvalidDataset("reorder must name every column".into()));
        }
        let cols = names
            .iter()
            .map(|n| self.column(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.shape, cols)
    }

    pub fn with_shape(mut self, shape: Shape) -> Result<Dataset> {
        self.shape = shape;
        self.validate()?;
        Ok(self)
    }

    /// Count of masked cells over all columns.
    pub fn n_missing(&self) -> usize {
        self.columns.iter().map(Column::n_missing).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.columns.iter().all(|c| !c.has_missing())
    }

    /// Numeric value of a cell for modelling. Discrete columns yield their
    /// level index.
    pub fn numeric(&self, row: usize, col: usize) -> f64 {
        self.columns[col].values[row]
    }
}
