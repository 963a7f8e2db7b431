//! Held-out evaluation pairs.

use std::collections::HashSet;

use rand::Rng as _;

use crate::attrworld::{compare_params, Attribute, Comparison, WorldConfig};
use crate::error::{Error, Result};
use crate::pairgen::{
    item_id, label_candidates, make_inter_pairs, make_intra_pairs, AnnotatorConfig, Candidate, Label, LabelStats,
    OrderedPair, PairKind, Provenance, Slot, Split,
};
use crate::prior::Identity;
use crate::seed;

/// Draws allowed per requested pair before giving up.
pub const TESTSET_ATTEMPTS_PER_PAIR: usize = 2000;

/// Identity pairs whose driven-parameter gap lies in `(lo·τ, hi·τ]`, with
/// `τ` the attribute's JND, labelled by the oracle.
pub fn make_fine_grained_testset(
    identities: &[Identity],
    attribute: usize,
    band: (f64, f64),
    count: usize,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Vec<OrderedPair>> {
    let (lo, hi) = band;
    if !(lo >= 1.0 && hi > lo) {
        return Err(Error::Config(format!(
            "fine-grained band ({lo}, {hi}] must satisfy 1 <= lo < hi"
        )));
    }
    if identities.len() < 2 {
        return Err(Error::InsufficientData(
            "fine-grained test set needs at least two identities".into(),
        ));
    }
    let attr = Attribute::from_index(attribute, cfg)?;
    let tau = cfg.jnd(attribute)?;
    let n = identities.len();
    let mut rng = seed::rng(seed::derive_seed(seed, "fine-grained"));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..TESTSET_ATTEMPTS_PER_PAIR * count.max(1) {
        if out.len() == count {
            return Ok(out);
        }
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || seen.contains(&(i.min(j), i.max(j))) {
            continue;
        }
        let (a, b) = (&identities[i], &identities[j]);
        let gap = (attr.driven_param(&a.params) - attr.driven_param(&b.params)).abs();
        if gap <= lo * tau || gap > hi * tau {
            continue;
        }
        seen.insert((i.min(j), i.max(j)));
        let label = match compare_params(&a.params, &b.params, attribute, cfg)? {
            Comparison::AMore => Label::AMore,
            Comparison::BMore => Label::BMore,
            Comparison::Indistinguishable => continue,
        };
        out.push(OrderedPair::new(
            attribute,
            item_id(a.id, Slot::Base),
            item_id(b.id, Slot::Base),
            label,
            Provenance::Real,
            PairKind::NotApplicable,
            Split::Test,
        )?);
    }
    if out.len() == count {
        return Ok(out);
    }
    Err(Error::Shortfall {
        what: format!("fine-grained test pairs for attribute {attribute}"),
        needed: count,
        produced: out.len(),
    })
}

/// Intra candidates of every identity, then inter candidates of consecutive
/// identities `(0,1), (2,3), …`.
pub fn spectrum_candidates(identities: &[Identity], attribute: usize) -> Result<Vec<Candidate>> {
    let mut out = Vec::with_capacity(2 * identities.len() + identities.len());
    for id in identities {
        out.extend(make_intra_pairs(id, attribute)?);
    }
    for pair in identities.chunks_exact(2) {
        out.extend(make_inter_pairs(&pair[0], &pair[1], attribute)?);
    }
    Ok(out)
}

/// The labelled synthetic batch: the first `ceil(m/2)` intra and
/// `floor(m/2)` inter candidates.
pub fn synthetic_batch(candidates: Vec<Candidate>, m: usize) -> Vec<Candidate> {
    let (mut n_intra, mut n_inter) = (m - m / 2, m / 2);
    candidates
        .into_iter()
        .filter(|c| {
            let slot = if c.kind == PairKind::Intra {
                &mut n_intra
            } else {
                &mut n_inter
            };
            let keep = *slot > 0;
            *slot = slot.saturating_sub(1);
            keep
        })
        .collect()
}

/// Annotator-verified synthetic pairs, half intra and half inter.
pub fn make_synthetic_testset(
    identities: &[Identity],
    attribute: usize,
    count: usize,
    annotators: &AnnotatorConfig,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<(Vec<OrderedPair>, LabelStats)> {
    let candidates = spectrum_candidates(identities, attribute)?;
    let batch = label_candidates(
        &candidates,
        annotators,
        cfg,
        seed::derive_seed(seed, "synthetic-test"),
        Split::Test,
    )?;
    let n_intra = count - count / 2;
    let n_inter = count / 2;
    let pick = |kind: PairKind, n: usize| -> Vec<OrderedPair> {
        batch
            .verified
            .iter()
            .filter(|p| p.kind == kind)
            .take(n)
            .cloned()
            .collect()
    };
    let (intra, inter) = (pick(PairKind::Intra, n_intra), pick(PairKind::Inter, n_inter));
    if intra.len() < n_intra || inter.len() < n_inter {
        return Err(Error::Shortfall {
            what: format!("synthetic test pairs for attribute {attribute}"),
            needed: count,
            produced: intra.len().min(n_intra) + inter.len().min(n_inter),
        });
    }
    Ok((intra.into_iter().chain(inter).collect(), batch.stats))
}
