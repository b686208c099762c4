//! Regression fitters used by the imputation samplers and the analysis step.

mod formula;
mod linear;
mod lmm;
mod logistic;
mod polr;

pub use formula::{parse_formula, ModelFormula, Term};
pub(crate) use linear::gram_cholesky;
pub use linear::{fit_linear_and_draw, independent_columns, ols, LinearDraw, COLLINEARITY_TOL, S2_FLOOR};
pub use lmm::{
    fit_lmm, lmm_deviance, Criterion, FixedEffect, LmmEstimate, LmmFit, LmmProblem, ModelFrame, VarComponent,
};
pub use logistic::{expit, fit_logistic, GlmFit};
pub use polr::{fit_polr, polr_probs};
