//! Completed datasets from one imputation run, kept next to the incomplete
//! original.

use std::io::{Read, Write};

use crate::data::io::{read_stacked, write_stacked, DatasetMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedStack {
    pub original: Dataset,
    pub imputations: Vec<Dataset>,
}

impl ImputedStack {
    pub fn new(original: Dataset, imputations: Vec<Dataset>) -> Self {
        ImputedStack {
            original,
            imputations,
        }
    }

    pub fn m(&self) -> usize {
        self.imputations.len()
    }

    /// Writes the original as imputation 0 followed by the completed sets.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut all = Vec::with_capacity(self.m() + 1);
        all.push(self.original.clone());
        all.extend(self.imputations.iter().cloned());
        write_stacked(writer, &all)
    }

    pub fn read_csv<R: Read>(reader: R, meta: &DatasetMeta) -> Result<Self> {
        let mut sets = read_stacked(reader, meta)?;
        if sets.first().map(|s| s.0) != Some(0) {
            return Err(Error::InvalidDataset("stacked file lacks imputation 0".into()));
        }
        for (k, (i, _)) in sets.iter().enumerate() {
            if *i != k {
                return Err(Error::InvalidDataset(format!("imputation {k} is missing")));
            }
        }
        let original = sets.remove(0).1;
        Ok(ImputedStack {
            original,
            imputations: sets.into_iter().map(|s| s.1).collect(),
        })
    }

    /// First imputation whose observed cells differ from the original, if any.
    pub fn first_altered(&self) -> Option<usize> {
        self.imputations
            .iter()
            .position(|d| !preserves_observed(&self.original, d))
    }
}

/// True when every observed cell of `original` is bit-identical in `completed`.
pub fn preserves_observed(original: &Dataset, completed: &Dataset) -> bool {
    if original.names() != completed.names() || original.n_rows() != completed.n_rows() {
        return false;
    }
    original.columns().iter().zip(completed.columns()).all(|(a, b)| {
        a.values()
            .iter()
            .zip(a.missing())
            .zip(b.values())
            .all(|((&va, &m), &vb)| m || va.to_bits() == vb.to_bits())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, ColumnSpec, Role, Shape};

    fn toy() -> Dataset {
        Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0, 2.0]),
                Column::from_options(ColumnSpec::continuous("y", Role::Analysis), [Some(0.5), None]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_through_csv() {
        let d = toy();
        let filled = d.with_fills([(1, 1, 2.25)]).unwrap();
        let stack = ImputedStack::new(d.clone(), vec![filled.clone(), filled]);
        let mut buf = Vec::new();
        stack.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("Imputation,id,y\n0,1,0.5\n0,2,NA\n1,"));
        let back = ImputedStack::read_csv(buf.as_slice(), &DatasetMeta::of(&d)).unwrap();
        assert_eq!(back, stack);
        assert_eq!(back.first_altered(), None);
    }

    #[test]
    fn detects_altered_observed_cell() {
        let d = toy();
        let bad = Dataset::new(
            Shape::Wide,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0, 2.0]),
                Column::complete(ColumnSpec::continuous("y", Role::Analysis), vec![0.6, 1.0]),
            ],
        )
        .unwrap();
        assert!(!preserves_observed(&d, &bad));
        assert!(d.with_fills([(1, 0, 1.0)]).is_err());
    }
}
