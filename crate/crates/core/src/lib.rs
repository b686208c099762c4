pub mod analysis;
pub mod catalog;
pub mod data;
pub mod error;
pub mod exec;
pub mod fcs;
pub mod fitters;
pub mod jm;
pub mod pooling;
pub mod rounding;
pub mod simulator;
pub mod stack;
pub mod stochastic;

pub use error::{Error, Result};
