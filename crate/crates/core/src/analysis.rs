//! Substantive mixed-model fits on completed datasets.

use crate::data::{available_case_filter, Dataset};
use crate::error::Result;
use crate::exec::{try_map_indexed, Execution};
use crate::fitters::{fit_lmm, Criterion, LmmFit, ModelFormula};

/// Outcome on exposure and confounders with a unit random intercept.
pub const UNIT_MODEL: &str =
    "numeracy_score ~ prev_dep + time + age + numeracy_scorew1 + sex + factor(ses) + (1 | id)";

/// As [`UNIT_MODEL`] with units nested in schools.
pub const NESTED_MODEL: &str =
    "numeracy_score ~ prev_dep + time + age + numeracy_scorew1 + sex + factor(ses) + (1 | school/id)";

/// Fit `formula` to every dataset. Non-converged fits are kept (flagged in
/// [`LmmFit::converged`]) and logged.
pub fn fit_each(datasets: &[Dataset], formula: &ModelFormula, crit: Criterion, exec: Execution) -> Result<Vec<LmmFit>> {
    let fits = try_map_indexed(datasets.len(), exec, |i| fit_lmm(formula, &datasets[i], crit))?;
    let bad = fits.iter().filter(|f| !f.converged).count();
    if bad > 0 {
        log::warn!("{bad} of {} fits did not converge", fits.len());
    }
    Ok(fits)
}

/// Available-case fit: rows missing any model variable are dropped first.
pub fn fit_available_cases(d: &Dataset, formula: &ModelFormula, crit: Criterion) -> Result<(LmmFit, usize)> {
    let vars = formula.variables();
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    let kept = available_case_filter(d, &names)?;
    let n = kept.n_rows();
    Ok((fit_lmm(formula, &kept, crit)?, n))
}
