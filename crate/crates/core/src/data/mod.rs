//! Columnar datasets with explicit missingness, reshaping and I/O.

mod column;
mod dataset;
pub mod io;
mod ops;
mod reshape;

pub use column::{Column, ColumnKind, ColumnSpec, Role};
pub use dataset::{Dataset, Shape};
pub use io::DatasetMeta;
pub use ops::{available_case_filter, cluster_aggregate, dummy_expand, incomplete_fraction};
pub use reshape::{reshape_long_to_wide, reshape_wide_to_long, ReshapeMap};
