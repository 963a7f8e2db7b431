//! L2-regularised logistic regression over descriptors.
//!
//! Trained by full-batch gradient descent. With no penalty on the bias the
//! weights stay in the span of the training rows, so the iteration runs on
//! expansion coefficients over an `n × n` Gram matrix.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::linalg::{dot, gemm_tn};
use super::FeatureTable;
use crate::attrworld::Image;
use crate::error::{Error, Result};
use crate::features::{extract_descriptor, Normalizer};
use crate::pairgen::{Label, OrderedPair, PairKind, Provenance, Split};
use crate::rankers::ranksvm::gram_of_rows;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            iterations: 500,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "classifier lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("classifier iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryClassifierModel {
    pub w: Vec<f64>,
    pub bias: f64,
    /// Ground-truth value above which an item counted as positive.
    pub threshold: f64,
    pub normalizer: Option<Normalizer>,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Binarises ground-truth values at their median: `(threshold, labels)`.
pub fn presence_labels(values: &[f64]) -> Result<(f64, Vec<bool>)> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no values to binarise".into()));
    }
    let t = median(&mut values.to_vec());
    Ok((t, values.iter().map(|&v| v > t).collect()))
}

/// Fits on the rows of `items` in table order with one label per row.
pub fn train_classifier(
    items: &FeatureTable,
    labels: &[bool],
    threshold: f64,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<BinaryClassifierModel> {
    cfg.validate()?;
    let (n, d) = (items.len(), items.dim());
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} items", labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::Config(format!(
            "classifier needs both classes; got {positives} positive of {n}"
        )));
    }
    let gram = gram_of_rows(items.data(), n, d);
    // step 1/L with L bounding the Hessian: ¼·λ_max(G)/n + λ, λ_max ≤ trace
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    let step = 1.0 / (0.25 * (trace / n as f64 + 1.0) + cfg.lambda);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut beta = vec![0.0; n];
    let mut bias = 0.0;
    let mut margins = vec![0.0; n];
    let mut resid = vec![0.0; n];
    for _ in 0..cfg.iterations {
        for i in 0..n {
            margins[i] = dot(&gram[i * n..(i + 1) * n], &beta) + bias;
            resid[i] = (sigmoid(margins[i]) - y[i]) / n as f64;
        }
        let shrink = 1.0 - step * cfg.lambda;
        beta.iter_mut()
            .zip(&resid)
            .for_each(|(b, r)| *b = shrink * *b - step * r);
        bias -= step * resid.iter().sum::<f64>();
    }
    let mut w = vec![0.0; d];
    gemm_tn(d, n, 1, 1.0, items.data(), &beta, 0.0, &mut w);
    if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::Numerical("classifier weights are not finite".into()));
    }
    Ok(BinaryClassifierModel {
        w,
        bias,
        threshold,
        normalizer: None,
        lambda: cfg.lambda,
        iterations: cfg.iterations,
        seed,
    })
}

impl BinaryClassifierModel {
    /// Pre-sigmoid score of a normalised descriptor.
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.bias
    }

    pub fn posterior(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }

    fn prepare(&self, image: &Image) -> Result<Vec<f64>> {
        let d = extract_descriptor(image).0;
        let x = match &self.normalizer {
            Some(n) => n.apply(&d),
            None => d,
        };
        if x.len() != self.w.len() {
            return Err(Error::InvalidInput(format!(
                "descriptor length {} does not match classifier dimension {}",
                x.len(),
                self.w.len()
            )));
        }
        Ok(x)
    }

    pub fn decision_value(&self, image: &Image) -> Result<f64> {
        Ok(self.decision(&self.prepare(image)?))
    }
}

/// Posterior probability that the attribute is present.
pub fn classifier_rank(model: &BinaryClassifierModel, image: &Image) -> Result<f64> {
    Ok(model.posterior(&model.prepare(image)?))
}

pub const PSEUDO_ATTEMPTS_PER_PAIR: usize = 200;

/// Random item pairs whose decision-value gap exceeds `delta`, labelled by
/// decision-value order. `items` holds normalised descriptors.
pub fn realplus_pseudo_pairs(
    model: &BinaryClassifierModel,
    items: &FeatureTable,
    attribute: usize,
    delta: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<OrderedPair>> {
    let n = items.len();
    if count == 0 {
        return Ok(Vec::new());
    }
    if n < 2 {
        return Err(Error::Shortfall {
            what: "pseudo pairs".into(),
            needed: count,
            produced: 0,
        });
    }
    let scores: Vec<f64> = (0..n).map(|i| model.decision(items.row(i))).collect();
    let mut rng = seed::rng(seed::derive_seed(seed, "pseudo-pairs"));
    let mut out = Vec::with_capacity(count);
    let max_attempts = PSEUDO_ATTEMPTS_PER_PAIR * count;
    for _ in 0..max_attempts {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let gap = scores[i] - scores[j];
        // a zero threshold keeps every draw, ties included
        if delta > 0.0 && gap.abs() <= delta {
            continue;
        }
        let label = if gap >= 0.0 { Label::AMore } else { Label::BMore };
        out.push(OrderedPair::new(
            attribute,
            items.ids()[i],
            items.ids()[j],
            label,
            Provenance::Pseudo,
            PairKind::NotApplicable,
            Split::Train,
        )?);
        if out.len() == count {
            return Ok(out);
        }
    }
    Err(Error::Shortfall {
        what: format!("pseudo pairs with decision gap > {delta}"),
        needed: count,
        produced: out.len(),
    })
}
