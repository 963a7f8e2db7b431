//! Pair accuracy.

use crate::error::{Error, Result};
use crate::pairgen::{Label, OrderedPair};

/// Fraction of `tests` whose predicted winner matches the stored label.
pub fn eval_pair_accuracy<F>(tests: &[OrderedPair], mut predict: F) -> Result<f64>
where
    F: FnMut(&OrderedPair) -> Result<Label>,
{
    if tests.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty test set".into()));
    }
    let mut correct = 0usize;
    for p in tests {
        if predict(p)? == p.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / tests.len() as f64)
}

/// Accuracy of precomputed labels, aligned with `tests`.
pub fn accuracy_of(tests: &[OrderedPair], predicted: &[Label]) -> Result<f64> {
    if predicted.len() != tests.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} test pairs",
            predicted.len(),
            tests.len()
        )));
    }
    let mut it = predicted.iter();
    eval_pair_accuracy(tests, |_| Ok(*it.next().expect("lengths checked")))
}
