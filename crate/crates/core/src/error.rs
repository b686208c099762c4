use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface. Variant names are stable: the CLI
/// prints them as the "module error name" on numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    // tabular
    #[error("unit {unit} has more than one row at time {time}")]
    DuplicateTimePoint { unit: i64, time: i64 },
    #[error("column `{0}` is neither time-fixed nor a declared time-varying stub")]
    UnknownStub(String),
    #[error("wide column `{0}` does not parse as <stub>.<time>")]
    MalformedWideName(String),
    #[error("factor column `{0}` has missing cells")]
    MissingInFactor(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("unknown level `{level}` in column `{column}`")]
    UnknownLevel { column: String, level: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("column `{0}` has missing cells where complete data is required")]
    IncompleteData(String),

    // stochastic
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),
    #[error("observed block of the covariance is singular")]
    SingularObservedBlock,
    #[error("invalid degrees of freedom {dof} for dimension {dim}")]
    InvalidDof { dof: f64, dim: usize },
    #[error("empty truncation interval ({lower}, {upper})")]
    EmptyInterval { lower: f64, upper: f64 },

    // fitters
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("perfect separation detected")]
    PerfectSeparation,
    #[error("ordinal level {0} is never observed")]
    EmptyCategory(usize),
    #[error("cutpoints are not strictly increasing")]
    NonMonotoneCutpoints,
    #[error("parse error at offset {pos}: {msg}")]
    ParseError { pos: usize, msg: String },
    #[error("singular fit: {0}")]
    SingularFit(String),

    // imputers
    #[error("cluster-specific covariances need at least 3 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("unknown trace parameter `{0}`")]
    UnknownParam(String),
    #[error("series has zero variance; autocorrelation undefined")]
    DegenerateSeries,
    #[error("mean {0} outside (0, 1); adaptive rounding undefined")]
    DegenerateMean(f64),
    #[error("invalid imputation spec: {0}")]
    InvalidSpec(String),
    #[error("chain {chain} failed on column `{column}`: {source}")]
    ChainFailed {
        chain: usize,
        column: String,
        #[source]
        source: Box<Error>,
    },
    #[error("unsupported method `{0}`")]
    UnsupportedMethod(String),

    // pooling
    #[error("fits do not share the same parameter names")]
    MisalignedParams,
    #[error("pooling needs at least 2 imputations, got {0}")]
    TooFewImputations(usize),

    // io
    #[error("bad config at {pointer}: {msg}")]
    BadConfig { pointer: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short variant name, used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DuplicateTimePoint { .. } => "DuplicateTimePoint",
            Error::UnknownStub(_) => "UnknownStub",
            Error::MalformedWideName(_) => "MalformedWideName",
            Error::MissingInFactor(_) => "MissingInFactor",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::UnknownLevel { .. } => "UnknownLevel",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::IncompleteData(_) => "IncompleteData",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::SingularObservedBlock => "SingularObservedBlock",
            Error::InvalidDof { .. } => "InvalidDof",
            Error::EmptyInterval { .. } => "EmptyInterval",
            Error::RankDeficient => "RankDeficient",
            Error::PerfectSeparation => "PerfectSeparation",
            Error::EmptyCategory(_) => "EmptyCategory",
            Error::NonMonotoneCutpoints => "NonMonotoneCutpoints",
            Error::ParseError { .. } => "ParseError",
            Error::SingularFit(_) => "SingularFit",
            Error::TooFewClusters(_) => "TooFewClusters",
            Error::UnknownParam(_) => "UnknownParam",
            Error::DegenerateSeries => "DegenerateSeries",
            Error::DegenerateMean(_) => "DegenerateMean",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::ChainFailed { .. } => "ChainFailed",
            Error::UnsupportedMethod(_) => "UnsupportedMethod",
            Error::MisalignedParams => "MisalignedParams",
            Error::TooFewImputations(_) => "TooFewImputations",
            Error::BadConfig { .. } => "BadConfig",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownStub(_)
                | Error::MalformedWideName(_)
                | Error::UnknownColumn(_)
                | Error::UnknownLevel { .. }
                | Error::InvalidDataset(_)
                | Error::ParseError { .. }
                | Error::InvalidSpec(_)
                | Error::UnsupportedMethod(_)
                | Error::BadConfig { .. }
                | Error::MisalignedParams
                | Error::TooFewImputations(_)
                | Error::UnknownParam(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Io(_)
        )
    }
}

/// Deserialize JSON, reporting failures as [`Error::BadConfig`] with a JSON
/// pointer to the offending field.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::BadConfig {
        pointer: json_pointer(e.path()),
        msg: e.inner().to_string(),
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}
