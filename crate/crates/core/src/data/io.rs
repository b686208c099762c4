//! CSV tables with a JSON metadata sidecar.
//!
//! Missing cells are written as `NA`; both `NA` and the empty string read as
//! missing. Discrete cells are written as their level label.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::column::{Column, ColumnMeta, ColumnSpec};
use super::dataset::{Dataset, Shape};
use crate::error::{Error, Result};

pub const MISSING: &str = "NA";
pub const IMPUTATION_COLUMN: &str = "Imputation";

/// Column metadata and shape, as stored in `metadata.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub shape: Shape,
    pub columns: Vec<ColumnSpec>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    shape: Shape,
    columns: Vec<ColumnMeta>,
}

impl DatasetMeta {
    pub fn of(d: &Dataset) -> Self {
        DatasetMeta {
            shape: d.shape(),
            columns: d.specs(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MetaFile {
            shape: self.shape,
            columns: self.columns.iter().map(ColumnMeta::from).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MetaFile = crate::error::parse_json(text)?;
        Ok(DatasetMeta {
            shape: file.shape,
            columns: file
                .columns
                .into_iter()
                .map(ColumnSpec::try_from)
                .collect::<Result<_>>()?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn spec(&self, name: &str) -> Result<&ColumnSpec> {
        self.columns
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }
}

fn parse_cell(spec: &ColumnSpec, text: &str) -> Result<Option<f64>> {
    let t = text.trim();
    if t.is_empty() || t == MISSING {
        return Ok(None);
    }
    if spec.kind.is_discrete() {
        return Ok(Some(spec.level_index(t)? as f64));
    }
    t.parse::<f64>().map(Some).map_err(|_| {
        Error::InvalidDataset(format!("column `{}`: cannot parse `{t}` as a number", spec.name))
    })
}

fn header_specs<'a>(meta: &'a DatasetMeta, header: &csv::StringRecord, skip: usize) -> Result<Vec<&'a ColumnSpec>> {
    header.iter().skip(skip).map(|h| meta.spec(h)).collect()
}

/// Read a dataset; column kinds and roles come from `meta`, column order
/// from the CSV header.
pub fn read_csv<R: Read>(reader: R, meta: &DatasetMeta) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let specs = header_specs(meta, &header, 0)?;
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); specs.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (j, spec) in specs.iter().enumerate() {
            cells[j].push(parse_cell(spec, rec.get(j).unwrap_or(""))?);
        }
    }
    let columns = specs
        .into_iter()
        .zip(cells)
        .map(|(s, c)| Column::from_options(s.clone(), c))
        .collect();
    Dataset::new(meta.shape, columns)
}

fn write_row<W: Write>(wtr: &mut csv::Writer<W>, prefix: Option<usize>, d: &Dataset, row: usize) -> Result<()> {
    let mut rec: Vec<String> = Vec::with_capacity(d.n_cols() + 1);
    if let Some(i) = prefix {
        rec.push(i.to_string());
    }
    rec.extend(
        d.columns()
            .iter()
            .map(|c| c.label(row).unwrap_or_else(|| MISSING.to_string())),
    );
    wtr.write_record(&rec)?;
    Ok(())
}

pub fn write_csv<W: Write>(writer: W, d: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(d.names())?;
    for row in 0..d.n_rows() {
        write_row(&mut wtr, None, d, row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write datasets one after another with a leading `Imputation` column
/// holding each dataset's position (0 = the original incomplete data).
pub fn write_stacked<W: Write>(writer: W, datasets: &[Dataset]) -> Result<()> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidDataset("nothing to write".into()))?;
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![IMPUTATION_COLUMN];
    header.extend(first.names());
    wtr.write_record(&header)?;
    for (i, d) in datasets.iter().enumerate() {
        if d.names() != first.names() {
            return Err(Error::InvalidDataset("stacked datasets differ in columns".into()));
        }
        for row in 0..d.n_rows() {
            write_row(&mut wtr, Some(i), d, row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Inverse of [`write_stacked`]; returns datasets ordered by imputation index.
pub fn read_stacked<R: Read>(reader: R, meta: &DatasetMeta) -> Result<Vec<(usize, Dataset)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some(IMPUTATION_COLUMN) {
        return Err(Error::UnknownColumn(IMPUTATION_COLUMN.to_string()));
    }
    let specs = header_specs(meta, &header, 1)?;
    let mut groups: Vec<(usize, Vec<Vec<Option<f64>>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let imp: usize = rec[0].trim().parse().map_err(|_| {
            Error::InvalidDataset(format!("bad imputation index `{}`", &rec[0]))
        })?;
        if groups.last().map(|g| g.0) != Some(imp) {
            if groups.iter().any(|g| g.0 == imp) {
                return Err(Error::InvalidDataset(format!(
                    "rows of imputation {imp} are not contiguous"
                )));
            }
            groups.push((imp, vec![Vec::new(); specs.len()]));
        }
        let cells = &mut groups.last_mut().expect("pushed above").1;
        for (j, spec) in specs.iter().enumerate() {
            cells[j].push(parse_cell(spec, rec.get(j + 1).unwrap_or(""))?);
        }
    }
    groups.sort_by_key(|g| g.0);
    groups
        .into_iter()
        .map(|(i, cells)| {
            let columns = specs
                .iter()
                .zip(cells)
                .map(|(s, c)| Column::from_options((*s).clone(), c))
                .collect();
            Ok((i, Dataset::new(meta.shape, columns)?))
        })
        .collect()
}

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_csv(path: &Path, d: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, d)?;
    write_atomic(path, &buf)
}

pub fn load_csv(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    read_csv(fs::File::open(path)?, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, Role};

    fn sample() -> Dataset {
        Dataset::new(
            Shape::Long,
            vec![
                Column::complete(ColumnSpec::continuous("id", Role::UnitId), vec![1.0, 1.0, 2.0]),
                Column::complete(ColumnSpec::continuous("time", Role::Time), vec![3.0, 5.0, 3.0]),
                Column::from_options(
                    ColumnSpec::new(
                        "ses",
                        ColumnKind::Categorical {
                            levels: vec!["low".into(), "mid".into(), "high".into()],
                        },
                        Role::Analysis,
                    ),
                    [Some(2.0), None, Some(0.0)],
                ),
                Column::from_options(
                    ColumnSpec::continuous("y", Role::Analysis),
                    [Some(0.1), Some(-2.5e-7), None],
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_preserves_cells_and_mask() {
        let d = sample();
        let mut buf = Vec::new();
        write_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,time,ses,y\n1,3,high,0.1\n1,5,NA,"));
        let meta = DatasetMeta::from_json(&DatasetMeta::of(&d).to_json().unwrap()).unwrap();
        assert_eq!(read_csv(buf.as_slice(), &meta).unwrap(), d);
    }

    #[test]
    fn empty_and_na_both_read_as_missing() {
        let meta = DatasetMeta::of(&sample());
        let text = "id,time,ses,y\n1,3,,NA\n";
        let d = read_csv(text.as_bytes(), &meta).unwrap();
        assert_eq!(d.n_missing(), 2);
    }

    #[test]
    fn unknown_level_is_reported() {
        let meta = DatasetMeta::of(&sample());
        let text = "id,time,ses,y\n1,3,top,1\n";
        assert!(matches!(
            read_csv(text.as_bytes(), &meta),
            Err(Error::UnknownLevel { .. })
        ));
    }

    #[test]
    fn stacked_round_trip() {
        let d = sample();
        let mut buf = Vec::new();
        write_stacked(&mut buf, &[d.clone(), d.clone()]).unwrap();
        let back = read_stacked(buf.as_slice(), &DatasetMeta::of(&d)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], (1, d));
    }

    #[test]
    fn bad_metadata_reports_pointer() {
        let err = DatasetMeta::from_json(r#"{"shape":"long","columns":[{"name":"a","kind":"continuous","role":"bogus"}]}"#)
            .unwrap_err();
        match err {
            Error::BadConfig { pointer, .. } => assert_eq!(pointer, "/columns/0/role"),
            e => panic!("unexpected {e}"),
        }
    }
}
