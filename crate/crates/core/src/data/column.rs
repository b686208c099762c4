use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a column means in the study design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    UnitId,
    ClusterId,
    Time,
    Analysis,
    Auxiliary,
}

impl Role {
    /// Identifier-like roles are never missing and never imputed.
    pub fn is_structural(self) -> bool {
        matches!(self, Role::UnitId | Role::ClusterId | Role::Time)
    }
}

/// Measurement scale. Discrete kinds carry their ordered level labels; cells
/// store the 0-based level index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnKind {
    Continuous,
    Binary { levels: Vec<String> },
    Categorical { levels: Vec<String> },
}

impl ColumnKind {
    pub fn binary() -> Self {
        ColumnKind::Binary {
            levels: vec!["0".into(), "1".into()],
        }
    }

    /// Categorical with labels `"0".."k-1"`.
    pub fn categorical(k: usize) -> Self {
        ColumnKind::Categorical {
            levels: (0..k).map(|i| i.to_string()).collect(),
        }
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Continuous => None,
            ColumnKind::Binary { levels } | ColumnKind::Categorical { levels } => Some(levels),
        }
    }

    pub fn n_levels(&self) -> Option<usize> {
        self.levels().map(<[String]>::len)
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, ColumnKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: Role) -> Self {
        ColumnSpec {
            name: name.into(),
            kind,
            role,
        }
    }

    pub fn continuous(name: impl Into<String>, role: Role) -> Self {
        Self::new(name, ColumnKind::Continuous, role)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match &self.kind {
            ColumnKind::Binary { levels } if levels.len() != 2 => Err(Error::InvalidDataset(
                format!("binary column `{}` must have exactly 2 levels", self.name),
            )),
            ColumnKind::Categorical { levels } if levels.len() < 2 => Err(Error::InvalidDataset(
                format!("categorical column `{}` needs at least 2 levels", self.name),
            )),
            _ => Ok(()),
        }
    }

    /// Level index for a label.
    pub fn level_index(&self, label: &str) -> Result<usize> {
        let levels = self
            .kind
            .levels()
            .ok_or_else(|| Error::InvalidDataset(format!("`{}` is not discrete", self.name)))?;
        levels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLevel {
                column: self.name.clone(),
                level: label.to_string(),
            })
    }
}

/// Serialized form of a column in the metadata sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ColumnMeta {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    pub role: Role,
}

impl From<&ColumnSpec> for ColumnMeta {
    fn from(spec: &ColumnSpec) -> Self {
        let (kind, levels) = match &spec.kind {
            ColumnKind::Continuous => ("continuous", None),
            ColumnKind::Binary { levels } => ("binary", Some(levels.clone())),
            ColumnKind::Categorical { levels } => ("categorical", Some(levels.clone())),
        };
        ColumnMeta {
            name: spec.name.clone(),
            kind: kind.to_string(),
            levels,
            role: spec.role,
        }
    }
}

impl TryFrom<ColumnMeta> for ColumnSpec {
    type Error = Error;

    fn try_from(meta: ColumnMeta) -> Result<Self> {
        let kind = match (meta.kind.as_str(), meta.levels) {
            ("continuous", _) => ColumnKind::Continuous,
            ("binary", Some(levels)) => ColumnKind::Binary { levels },
            ("binary", None) => ColumnKind::binary(),
            ("categorical", Some(levels)) => ColumnKind::Categorical { levels },
            (other, _) => {
                return Err(Error::InvalidDataset(format!(
                    "column `{}`: kind `{other}` needs levels or is unknown",
                    meta.name
                )))
            }
        };
        let spec = ColumnSpec::new(meta.name, kind, meta.role);
        spec.validate()?;
        Ok(spec)
    }
}

/// One column of values with its missingness mask. Masked cells hold NaN.
#[derive(Debug, Clone)]
pub struct Column {
    pub(crate) spec: ColumnSpec,
    pub(crate) values: Vec<f64>,
    pub(crate) missing: Vec<bool>,
}

impl Column {
    pub fn from_options(spec: ColumnSpec, cells: impl IntoIterator<Item = Option<f64>>) -> Self {
        let (values, missing) = cells
            .into_iter()
            .map(|c| match c {
                Some(v) => (v, false),
                None => (f64::NAN, true),
            })
            .unzip();
        Column {
            spec,
            values,
            missing,
        }
    }

    pub fn complete(spec: ColumnSpec, values: Vec<f64>) -> Self {
        let missing = vec![false; values.len()];
        Column {
            spec,
            values,
            missing,
        }
    }

    /// Build from values and a mask; masked values are replaced by NaN.
    pub fn with_mask(spec: ColumnSpec, mut values: Vec<f64>, missing: Vec<bool>) -> Self {
        for (v, &m) in values.iter_mut().zip(&missing) {
            if m {
                *v = f64::NAN;
            }
        }
        Column {
            spec,
            values,
            missing,
        }
    }

    pub fn spec(&self) -> &ColumnSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<f64> {
        (!self.missing[row]).then(|| self.values[row])
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    /// Label for a cell as written to CSV; `None` when missing.
    pub fn label(&self, row: usize) -> Option<String> {
        let v = self.get(row)?;
        Some(match self.spec.kind.levels() {
            Some(levels) => levels
                .get(v as usize)
                .cloned()
                .unwrap_or_else(|| format!("{v}")),
            None => format!("{v}"),
        })
    }
}

impl PartialEq for Column {
    /// Masks must agree; observed values must agree bit-for-bit.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.missing == other.missing
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.missing)
                .all(|((a, b), &m)| m || a.to_bits() == b.to_bits())
    }
}
