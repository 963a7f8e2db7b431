//! Splits, test sets, evaluation, the experiment grid and its reports.

pub mod eval;
pub mod experiment;
pub mod report;
pub mod splits;
pub mod testsets;
