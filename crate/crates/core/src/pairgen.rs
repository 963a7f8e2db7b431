//! Training-pair construction: synthetic intra/inter-identity candidates,
//! automatic and annotator-verified labelling, low-level jitter, the
//! clustered "real" pool, and assembly of the supervision conditions.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attrworld::{compare_params, AttributeVector, Comparison, Generator, Image, PhysicalParams, WorldConfig};
use crate::error::{Error, Result};
use crate::prior::{Identity, PriorModel};
use crate::seed::{self, derive_indexed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "A")]
    AMore,
    #[serde(rename = "B")]
    BMore,
}

impl Label {
    pub fn inverted(self) -> Label {
        match self {
            Label::AMore => Label::BMore,
            Label::BMore => Label::AMore,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Real,
    SynthVerified,
    SynthAuto,
    Jitter,
    Pseudo,
    /// Noise-free oracle order; persisted for audit, never trained on.
    Oracle,
}

impl Provenance {
    pub fn is_real(self) -> bool {
        self == Provenance::Real
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairKind {
    Intra,
    Inter,
    #[serde(rename = "NA")]
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Generator,
    Train,
    Validation,
    Test,
}

/// Item ids encode the identity and which of its images is meant:
/// `id = identity_id * 4 + slot`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Base = 0,
    Minus = 1,
    Plus = 2,
    Jittered = 3,
}

pub fn item_id(identity_id: u64, slot: Slot) -> u64 {
    identity_id * 4 + slot as u64
}

pub fn identity_of(item: u64) -> u64 {
    item / 4
}

/// "`item_a` shows `attribute` more than `item_b`" (or the reverse, per label).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedPair {
    pub attribute: usize,
    pub item_a: u64,
    pub item_b: u64,
    pub label: Label,
    pub provenance: Provenance,
    pub kind: PairKind,
    pub split: Split,
}

impl OrderedPair {
    pub fn new(
        attribute: usize,
        item_a: u64,
        item_b: u64,
        label: Label,
        provenance: Provenance,
        kind: PairKind,
        split: Split,
    ) -> Result<Self> {
        if item_a == item_b {
            return Err(Error::InvalidInput(format!("pair references item {item_a} twice")));
        }
        Ok(Self {
            attribute,
            item_a,
            item_b,
            label,
            provenance,
            kind,
            split,
        })
    }

    /// `(more, less)` item ids.
    pub fn ordered(&self) -> (u64, u64) {
        match self.label {
            Label::AMore => (self.item_a, self.item_b),
            Label::BMore => (self.item_b, self.item_a),
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            item_a: self.item_b,
            item_b: self.item_a,
            label: self.label.inverted(),
            ..self.clone()
        }
    }
}

/// What a labeller may look at for one side of a candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemView {
    pub id: u64,
    /// Strengths the generator was conditioned on.
    pub y: AttributeVector,
    pub params: PhysicalParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub a: ItemView,
    pub b: ItemView,
    pub attribute: usize,
    pub kind: PairKind,
}

fn base_view(identity: &Identity) -> ItemView {
    ItemView {
        id: item_id(identity.id, Slot::Base),
        y: identity.y.clone(),
        params: identity.params.clone(),
    }
}

fn spectrum_views(identity: &Identity, attribute: usize) -> Result<(ItemView, ItemView)> {
    let s = identity
        .spectrum
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("identity {} has no spectrum", identity.id)))?;
    if s.attribute != attribute {
        return Err(Error::InvalidInput(format!(
            "identity {} spectrum varies attribute {}, not {attribute}",
            identity.id, s.attribute
        )));
    }
    Ok((
        ItemView {
            id: item_id(identity.id, Slot::Minus),
            y: s.y_minus.clone(),
            params: s.minus_params.clone(),
        },
        ItemView {
            id: item_id(identity.id, Slot::Plus),
            y: s.y_plus.clone(),
            params: s.plus_params.clone(),
        },
    ))
}

/// `(x⁻, x)` and `(x, x⁺)` from one identity's spectrum, in that order.
pub fn make_intra_pairs(identity: &Identity, attribute: usize) -> Result<[Candidate; 2]> {
    let (minus, plus) = spectrum_views(identity, attribute)?;
    let base = base_view(identity);
    Ok([
        Candidate {
            a: minus,
            b: base.clone(),
            attribute,
            kind: PairKind::Intra,
        },
        Candidate {
            a: base,
            b: plus,
            attribute,
            kind: PairKind::Intra,
        },
    ])
}

/// `(x_j, x_k⁺)` and `(x_k⁻, x_j)`, in that order.
pub fn make_inter_pairs(j: &Identity, k: &Identity, attribute: usize) -> Result<[Candidate; 2]> {
    if j.id == k.id {
        return Err(Error::InvalidInput(format!(
            "inter-identity pair needs two identities, got {} twice",
            j.id
        )));
    }
    spectrum_views(j, attribute)?;
    let (k_minus, k_plus) = spectrum_views(k, attribute)?;
    let base_j = base_view(j);
    Ok([
        Candidate {
            a: base_j.clone(),
            b: k_plus,
            attribute,
            kind: PairKind::Inter,
        },
        Candidate {
            a: k_minus,
            b: base_j,
            attribute,
            kind: PairKind::Inter,
        },
    ])
}

/// Label by the generating strengths; `None` only for an exact tie.
pub fn auto_label(candidate: &Candidate, split: Split) -> Option<OrderedPair> {
    let ya = candidate.a.y.get(candidate.attribute);
    let yb = candidate.b.y.get(candidate.attribute);
    let label = if ya > yb {
        Label::AMore
    } else if yb > ya {
        Label::BMore
    } else {
        return None;
    };
    Some(OrderedPair {
        attribute: candidate.attribute,
        item_a: candidate.a.id,
        item_b: candidate.b.id,
        label,
        provenance: Provenance::SynthAuto,
        kind: candidate.kind,
        split,
    })
}

/// Ground-truth order of a candidate (the annotators' oracle).
pub fn oracle(candidate: &Candidate, cfg: &WorldConfig) -> Result<Comparison> {
    compare_params(&candidate.a.params, &candidate.b.params, candidate.attribute, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub n_annotators: usize,
    pub flip_probability: f64,
    pub majority_threshold: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            n_annotators: 5,
            flip_probability: 0.1,
            majority_threshold: 0.8,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_annotators == 0 || self.n_annotators % 2 == 0 {
            return Err(Error::Config(format!(
                "n_annotators must be odd, got {}",
                self.n_annotators
            )));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("majority_threshold", self.majority_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Simulated annotator vote; `None` when no label reaches the threshold.
pub fn annotate(
    candidate: &Candidate,
    annotators: &AnnotatorConfig,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Option<Label>> {
    annotate_comparison(oracle(candidate, cfg)?, annotators, seed)
}

pub fn annotate_comparison(truth: Comparison, annotators: &AnnotatorConfig, seed: u64) -> Result<Option<Label>> {
    let mut rng = seed::rng(seed);
    let mut votes_a = 0usize;
    for _ in 0..annotators.n_annotators {
        let mut says_a = match truth {
            Comparison::AMore => true,
            Comparison::BMore => false,
            Comparison::Indistinguishable => rng.random_bool(0.5),
        };
        if rng.random::<f64>() < annotators.flip_probability {
            says_a = !says_a;
        }
        votes_a += usize::from(says_a);
    }
    let n = annotators.n_annotators as f64;
    let votes_b = annotators.n_annotators - votes_a;
    Ok(if votes_a as f64 / n >= annotators.majority_threshold {
        Some(Label::AMore)
    } else if votes_b as f64 / n >= annotators.majority_threshold {
        Some(Label::BMore)
    } else {
        None
    })
}

pub fn verify_pair(
    candidate: &Candidate,
    annotators: &AnnotatorConfig,
    cfg: &WorldConfig,
    seed: u64,
    split: Split,
) -> Result<Option<OrderedPair>> {
    Ok(annotate(candidate, annotators, cfg, seed)?.map(|label| OrderedPair {
        attribute: candidate.attribute,
        item_a: candidate.a.id,
        item_b: candidate.b.id,
        label,
        provenance: Provenance::SynthVerified,
        kind: candidate.kind,
        split,
    }))
}

/// Bookkeeping for a labelled batch of candidates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelStats {
    pub candidates: usize,
    pub discarded: usize,
    pub auto_agreements: usize,
}

impl LabelStats {
    pub fn discard_rate(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.discarded as f64 / self.candidates as f64
        }
    }

    pub fn auto_agreement(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.auto_agreements as f64 / self.candidates as f64
        }
    }
}

/// Both labellings of one candidate batch.
#[derive(Clone, Debug, Default)]
pub struct LabeledBatch {
    pub verified: Vec<OrderedPair>,
    pub auto: Vec<OrderedPair>,
    /// Non-tied candidates in oracle order.
    pub oracle: Vec<OrderedPair>,
    pub stats: LabelStats,
}

/// Auto-labels and verifies every candidate. Candidate `i` is annotated with
/// `derive_indexed(seed, "verify", i)`. Auto agreement counts candidates whose
/// auto label equals the oracle's order (oracle ties count as disagreement).
pub fn label_candidates(
    candidates: &[Candidate],
    annotators: &AnnotatorConfig,
    cfg: &WorldConfig,
    seed: u64,
    split: Split,
) -> Result<LabeledBatch> {
    annotators.validate()?;
    let mut out = LabeledBatch::default();
    for (i, c) in candidates.iter().enumerate() {
        out.stats.candidates += 1;
        let truth = oracle(c, cfg)?;
        let oracle_label = match truth {
            Comparison::AMore => Some(Label::AMore),
            Comparison::BMore => Some(Label::BMore),
            Comparison::Indistinguishable => None,
        };
        if let Some(label) = oracle_label {
            out.oracle.push(OrderedPair {
                attribute: c.attribute,
                item_a: c.a.id,
                item_b: c.b.id,
                label,
                provenance: Provenance::Oracle,
                kind: c.kind,
                split,
            });
        }
        let auto = auto_label(c, split);
        if let Some(p) = &auto {
            let agrees = matches!(
                (p.label, truth),
                (Label::AMore, Comparison::AMore) | (Label::BMore, Comparison::BMore)
            );
            out.stats.auto_agreements += usize::from(agrees);
            out.auto.push(p.clone());
        }
        match annotate_comparison(truth, annotators, derive_indexed(seed, "verify", i as u64))? {
            Some(label) => out.verified.push(OrderedPair {
                attribute: c.attribute,
                item_a: c.a.id,
                item_b: c.b.id,
                label,
                provenance: Provenance::SynthVerified,
                kind: c.kind,
                split,
            }),
            None => out.stats.discarded += 1,
        }
    }
    Ok(out)
}

/// The five low-level perturbations of one jitter draw.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterParams {
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
    pub rotation: f64,
    pub contrast: f64,
    pub color_offset: [f64; 3],
}

impl JitterParams {
    pub fn identity() -> Self {
        Self {
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
            rotation: 0.0,
            contrast: 1.0,
            color_offset: [0.0; 3],
        }
    }

    /// Translation ±3 px per axis, scale [0.9, 1.1], rotation ±10°,
    /// contrast gain [0.8, 1.2] about 0.5, color offset ±0.05 per channel.
    pub fn draw(seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            translate_x: rng.random_range(-3.0..=3.0),
            translate_y: rng.random_range(-3.0..=3.0),
            scale: rng.random_range(0.9..=1.1),
            rotation: rng.random_range(-10.0..=10.0f64).to_radians(),
            contrast: rng.random_range(0.8..=1.2),
            color_offset: [
                rng.random_range(-0.05..=0.05),
                rng.random_range(-0.05..=0.05),
                rng.random_range(-0.05..=0.05),
            ],
        }
    }
}

fn sample_clamped(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let xmax = (img.width - 1) as f64;
    let ymax = (img.height - 1) as f64;
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
    let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Geometric part (translate, scale, rotate about the image centre) by
/// inverse mapping with bilinear resampling and edge replication, then
/// contrast, color offset, and clipping to `[0, 1]`.
pub fn apply_jitter(img: &Image, p: &JitterParams) -> Image {
    let (w, h) = (img.width, img.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin_r, cos_r) = p.rotation.sin_cos();
    let mut out = Image::filled(w, h, 0.0);
    for py in 0..h {
        for px in 0..w {
            let qx = px as f64 + 0.5 - cx - p.translate_x;
            let qy = py as f64 + 0.5 - cy - p.translate_y;
            let sx = (cos_r * qx + sin_r * qy) / p.scale + cx - 0.5;
            let sy = (-sin_r * qx + cos_r * qy) / p.scale + cy - 0.5;
            for c in 0..3 {
                let v = sample_clamped(img, sx, sy, c);
                let v = 0.5 + p.contrast * (v - 0.5) + p.color_offset[c];
                out.set(px, py, c, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn lowlevel_jitter(img: &Image, seed: u64) -> Image {
    apply_jitter(img, &JitterParams::draw(seed))
}

/// Jittered copy of each pair; the jittered image of item `x` has id
/// `item_id(identity_of(x), Jittered)` and the copy inherits the label.
pub fn jitter_pairs(pairs: &[OrderedPair]) -> Vec<OrderedPair> {
    pairs
        .iter()
        .map(|p| OrderedPair {
            item_a: item_id(identity_of(p.item_a), Slot::Jittered),
            item_b: item_id(identity_of(p.item_b), Slot::Jittered),
            provenance: Provenance::Jitter,
            kind: PairKind::NotApplicable,
            ..p.clone()
        })
        .collect()
}

/// Curation bias of the "real" pool: a two-component mixture with
/// means `μ ± offset·σ` and covariance `shrink² Σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub offset_sd: f64,
    pub shrink: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            offset_sd: 1.2,
            shrink: 0.3,
        }
    }
}

pub fn sample_clustered_attributes(
    prior: &PriorModel,
    cluster: &ClusterConfig,
    rng: &mut seed::Rng,
) -> Result<AttributeVector> {
    let factor = prior.cholesky()?;
    let n = prior.dim();
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let eps: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(AttributeVector(
        (0..n)
            .map(|i| {
                let noise: f64 = (0..=i).map(|j| factor[(i, j)] * eps[j]).sum();
                prior.mean[i] + sign * cluster.offset_sd * prior.per_attribute_std[i] + cluster.shrink * noise
            })
            .collect(),
    ))
}

/// Identities drawn from the clustered mixture; identity `i` gets id
/// `first_id + i` and seed `derive_indexed(seed, "real-identity", i)`.
pub fn sample_real_identities(
    prior: &PriorModel,
    generator: &dyn Generator,
    n_identities: usize,
    cluster: &ClusterConfig,
    first_id: u64,
    seed: u64,
) -> Result<Vec<Identity>> {
    (0..n_identities)
        .map(|i| {
            let mut rng = seed::rng(derive_indexed(seed, "real-identity", i as u64));
            let y = sample_clustered_attributes(prior, cluster, &mut rng)?;
            let z = crate::prior::sample_latent(generator.latent_dim(), &mut rng);
            Identity::new(first_id + i as u64, y, z, generator)
        })
        .collect()
}

/// Uniformly random identity pairs, human-labelled through the annotators,
/// until `n_pairs` survive. Gives up after `50 · n_pairs` draws.
pub fn label_real_pairs(
    identities: &[Identity],
    attribute: usize,
    n_pairs: usize,
    annotators: &AnnotatorConfig,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<(Vec<OrderedPair>, LabelStats)> {
    annotators.validate()?;
    if identities.len() < 2 {
        return Err(Error::InsufficientData(
            "real pool needs at least two identities".into(),
        ));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, "real-pairs"));
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut stats = LabelStats::default();
    let max_draws = 50 * n_pairs.max(1);
    let n = identities.len();
    let mut draws = 0;
    while pairs.len() < n_pairs {
        if draws >= max_draws {
            return Err(Error::Shortfall {
                what: "real pairs".into(),
                needed: n_pairs,
                produced: pairs.len(),
            });
        }
        draws += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        let (a, b) = (&identities[i], &identities[j]);
        let truth = compare_params(&a.params, &b.params, attribute, cfg)?;
        stats.candidates += 1;
        let vote_seed = derive_indexed(seed, "real-vote", draws as u64);
        match annotate_comparison(truth, annotators, vote_seed)? {
            Some(label) => pairs.push(OrderedPair::new(
                attribute,
                item_id(a.id, Slot::Base),
                item_id(b.id, Slot::Base),
                label,
                Provenance::Real,
                PairKind::NotApplicable,
                Split::Train,
            )?),
            None => stats.discarded += 1,
        }
    }
    Ok((pairs, stats))
}

pub struct RealPool {
    pub identities: Vec<Identity>,
    pub pairs: Vec<OrderedPair>,
    pub stats: LabelStats,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_real_pool(
    prior: &PriorModel,
    generator: &dyn Generator,
    n_identities: usize,
    n_pairs: usize,
    attribute: usize,
    cluster: &ClusterConfig,
    annotators: &AnnotatorConfig,
    first_id: u64,
    seed: u64,
) -> Result<RealPool> {
    let identities = sample_real_identities(prior, generator, n_identities, cluster, first_id, seed)?;
    let (pairs, stats) = label_real_pairs(&identities, attribute, n_pairs, annotators, generator.config(), seed)?;
    Ok(RealPool {
        identities,
        pairs,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Real,
    RealPlus,
    Jitter,
    #[serde(rename = "DSYNTH")]
    DSynth,
    #[serde(rename = "DSYNTH_AUTO")]
    DSynthAuto,
    Classifier,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Real,
        Condition::RealPlus,
        Condition::Jitter,
        Condition::DSynth,
        Condition::DSynthAuto,
        Condition::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Real => "REAL",
            Condition::RealPlus => "REAL_PLUS",
            Condition::Jitter => "JITTER",
            Condition::DSynth => "DSYNTH",
            Condition::DSynthAuto => "DSYNTH_AUTO",
            Condition::Classifier => "CLASSIFIER",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

/// Every labelled pair a condition may draw from.
#[derive(Clone, Copy, Debug, Default)]
pub struct PairSources<'a> {
    pub real: &'a [OrderedPair],
    /// `jitter[i]` is the jittered copy of `real[i]`.
    pub jitter: &'a [OrderedPair],
    pub synth_verified: &'a [OrderedPair],
    pub synth_auto: &'a [OrderedPair],
    pub pseudo: &'a [OrderedPair],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolBudget {
    /// `N`, the real-pair budget.
    pub n_real: usize,
    /// `M`, auto-labelled synthetic pairs added on top of all real pairs.
    pub n_auto: usize,
}

fn take(pairs: &[OrderedPair], n: usize, what: &str) -> Result<Vec<OrderedPair>> {
    if pairs.len() < n {
        return Err(Error::Config(format!(
            "condition needs {n} {what} pairs but only {} are available (short by {})",
            pairs.len(),
            n - pairs.len()
        )));
    }
    Ok(pairs[..n].to_vec())
}

/// First `ceil(n/2)` intra and `floor(n/2)` inter pairs, in source order.
fn take_mix(pairs: &[OrderedPair], n: usize, what: &str) -> Result<Vec<OrderedPair>> {
    let n_intra = n - n / 2;
    let n_inter = n / 2;
    let intra: Vec<_> = pairs
        .iter()
        .filter(|p| p.kind == PairKind::Intra)
        .take(n_intra)
        .cloned()
        .collect();
    let inter: Vec<_> = pairs
        .iter()
        .filter(|p| p.kind == PairKind::Inter)
        .take(n_inter)
        .cloned()
        .collect();
    if intra.len() < n_intra || inter.len() < n_inter {
        return Err(Error::Config(format!(
            "condition needs {n_intra} intra + {n_inter} inter {what} pairs but only {} + {} are available",
            intra.len(),
            inter.len()
        )));
    }
    Ok(intra.into_iter().chain(inter).collect())
}

pub fn assemble_condition(
    condition: Condition,
    sources: &PairSources<'_>,
    budget: PoolBudget,
    seed: u64,
) -> Result<Vec<OrderedPair>> {
    let n = budget.n_real;
    match condition {
        Condition::Real | Condition::Classifier => take(sources.real, n, "real"),
        Condition::Jitter => {
            let mut out = take(sources.real, n, "real")?;
            out.extend(take(sources.jitter, n, "jittered")?);
            Ok(out)
        }
        Condition::DSynth => {
            let real = take(sources.real, n, "real")?;
            let n_real = n / 2;
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::rng(seed::derive_seed(seed, "dsynth-real-half")));
            idx.truncate(n_real);
            idx.sort_unstable();
            let mut out: Vec<_> = idx.into_iter().map(|i| real[i].clone()).collect();
            out.extend(take_mix(sources.synth_verified, n - n_real, "verified synthetic")?);
            Ok(out)
        }
        Condition::DSynthAuto => {
            let mut out = take(sources.real, n, "real")?;
            out.extend(take_mix(sources.synth_auto, budget.n_auto, "auto-labelled synthetic")?);
            Ok(out)
        }
        Condition::RealPlus => {
            let mut out = take(sources.real, n, "real")?;
            out.extend(take(sources.pseudo, n, "pseudo")?);
            Ok(out)
        }
    }
}

pub const PAIR_CSV_HEADER: &str = "attribute,item_a,item_b,label,provenance,kind,split";

pub fn write_pairs(path: &Path, pairs: &[OrderedPair]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    for p in pairs {
        w.serialize(p).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<OrderedPair>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != PAIR_CSV_HEADER {
        return Err(Error::format(path, format!("expected header `{PAIR_CSV_HEADER}`")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.deserialize::<OrderedPair>().enumerate() {
        let p = rec.map_err(|e| Error::format(path, format!("row {}: {e}", line + 2)))?;
        if p.item_a == p.item_b {
            return Err(Error::format(
                path,
                format!("row {}: item paired with itself", line + 2),
            ));
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrworld::{ProceduralWorld, WorldConfig};
    use crate::prior::{generate_spectrum, sample_identity};

    fn world() -> ProceduralWorld {
        ProceduralWorld::new(WorldConfig::default()).unwrap()
    }

    fn unit_prior() -> PriorModel {
        let mut cov = vec![0.0; 16];
        for i in 0..4 {
            cov[i * 4 + i] = 1.0;
        }
        PriorModel::from_moments(vec![0.0; 4], cov, 0.0).unwrap()
    }

    fn spectrum_identity(id: u64, attribute: usize) -> Identity {
        let w = world();
        let p = unit_prior();
        let base = sample_identity(&p, &w, id, 1000 + id).unwrap();
        generate_spectrum(&base, attribute, &p, &w).unwrap()
    }

    #[test]
    fn intra_candidates() {
        let id = spectrum_identity(3, 0);
        let c = make_intra_pairs(&id, 0).unwrap();
        assert!(c.iter().all(|c| c.kind == PairKind::Intra));
        assert_eq!(c[0].a.id, item_id(3, Slot::Minus));
        assert_eq!(c[0].b.id, item_id(3, Slot::Base));
        assert_eq!(c[1].a.id, item_id(3, Slot::Base));
        assert_eq!(c[1].b.id, item_id(3, Slot::Plus));
        assert!(c.iter().all(|c| c.a.id != c.b.id));
        // x⁻ < x and x < x⁺: auto labels follow construction, not listing order
        assert_eq!(auto_label(&c[0], Split::Train).unwrap().label, Label::BMore);
        assert_eq!(auto_label(&c[1], Split::Train).unwrap().label, Label::BMore);
        assert!(make_intra_pairs(&id, 1).is_err());
        let bare = sample_identity(&unit_prior(), &world(), 9, 9).unwrap();
        assert!(make_intra_pairs(&bare, 0).is_err());
    }

    #[test]
    fn inter_candidates() {
        let j = spectrum_identity(1, 2);
        let k = spectrum_identity(2, 2);
        let c = make_inter_pairs(&j, &k, 2).unwrap();
        assert_eq!((c[0].a.id, c[0].b.id), (item_id(1, Slot::Base), item_id(2, Slot::Plus)));
        assert_eq!(
            (c[1].a.id, c[1].b.id),
            (item_id(2, Slot::Minus), item_id(1, Slot::Base))
        );
        assert!(c.iter().all(|c| c.kind == PairKind::Inter));
        let swapped = make_inter_pairs(&k, &j, 2).unwrap();
        assert_ne!(c, swapped);
        assert!(make_inter_pairs(&j, &j, 2).is_err());
    }

    #[test]
    fn inter_auto_label_uses_stored_strengths() {
        let j = spectrum_identity(1, 0);
        let mut k = spectrum_identity(2, 0);
        let mut jj = j.clone();
        jj.y.0[0] = 0.5;
        // make x_k⁺ sit above x_j
        k.spectrum.as_mut().unwrap().y_plus.0[0] = 0.9;
        let c = make_inter_pairs(&jj, &k, 0).unwrap();
        assert_eq!(auto_label(&c[0], Split::Train).unwrap().label, Label::BMore);
    }

    #[test]
    fn exact_tie_is_discarded_by_auto_label() {
        let mut id = spectrum_identity(4, 1);
        let y = id.y.clone();
        id.spectrum.as_mut().unwrap().y_plus = y;
        let c = make_intra_pairs(&id, 1).unwrap();
        assert!(auto_label(&c[1], Split::Train).is_none());
    }

    #[test]
    fn noiseless_annotators_reproduce_truth() {
        let a = AnnotatorConfig {
            flip_probability: 0.0,
            ..Default::default()
        };
        for s in 0..50 {
            assert_eq!(
                annotate_comparison(Comparison::AMore, &a, s).unwrap(),
                Some(Label::AMore)
            );
            assert_eq!(
                annotate_comparison(Comparison::BMore, &a, s).unwrap(),
                Some(Label::BMore)
            );
        }
    }

    #[test]
    fn annotator_validation() {
        let bad = AnnotatorConfig {
            n_annotators: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnnotatorConfig {
            flip_probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_jitter_is_exact() {
        let img = crate::attrworld::render(
            &AttributeVector(vec![0.2, 0.4, -0.3, 0.8]),
            &crate::attrworld::LatentVector(vec![0.1, 0.2, 0.3]),
            &WorldConfig::default(),
        )
        .unwrap();
        let out = apply_jitter(&img, &JitterParams::identity());
        let err = img
            .pixels
            .iter()
            .zip(&out.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn jitter_copies_inherit_labels() {
        let p = OrderedPair::new(
            0,
            8,
            12,
            Label::BMore,
            Provenance::Real,
            PairKind::NotApplicable,
            Split::Train,
        )
        .unwrap();
        let j = jitter_pairs(std::slice::from_ref(&p));
        assert_eq!(j[0].label, Label::BMore);
        assert_eq!(j[0].provenance, Provenance::Jitter);
        assert_eq!((j[0].item_a, j[0].item_b), (11, 15));
    }

    #[test]
    fn self_pair_rejected() {
        assert!(OrderedPair::new(0, 5, 5, Label::AMore, Provenance::Real, PairKind::Inter, Split::Train).is_err());
    }

    fn fake_pairs(n: usize, provenance: Provenance, kind: PairKind, offset: u64) -> Vec<OrderedPair> {
        (0..n)
            .map(|i| {
                OrderedPair::new(
                    0,
                    offset + 2 * i as u64,
                    offset + 2 * i as u64 + 1,
                    Label::AMore,
                    provenance,
                    kind,
                    Split::Train,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn condition_sizes() {
        let real = fake_pairs(400, Provenance::Real, PairKind::NotApplicable, 0);
        let jit = jitter_pairs(&real);
        let mut verified = fake_pairs(300, Provenance::SynthVerified, PairKind::Intra, 10_000);
        verified.extend(fake_pairs(300, Provenance::SynthVerified, PairKind::Inter, 20_000));
        let mut auto = fake_pairs(1000, Provenance::SynthAuto, PairKind::Intra, 30_000);
        auto.extend(fake_pairs(1000, Provenance::SynthAuto, PairKind::Inter, 40_000));
        let pseudo = fake_pairs(400, Provenance::Pseudo, PairKind::NotApplicable, 50_000);
        let src = PairSources {
            real: &real,
            jitter: &jit,
            synth_verified: &verified,
            synth_auto: &auto,
            pseudo: &pseudo,
        };
        let budget = PoolBudget {
            n_real: 400,
            n_auto: 2000,
        };
        let count = |v: &[OrderedPair], p: Provenance| v.iter().filter(|x| x.provenance == p).count();

        let r = assemble_condition(Condition::Real, &src, budget, 1).unwrap();
        assert_eq!((r.len(), count(&r, Provenance::Real)), (400, 400));

        let d = assemble_condition(Condition::DSynth, &src, budget, 1).unwrap();
        assert_eq!(d.len(), 400);
        assert_eq!(count(&d, Provenance::Real), 200);
        assert_eq!(count(&d, Provenance::SynthVerified), 200);
        assert_eq!(d.iter().filter(|p| p.kind == PairKind::Intra).count(), 100);
        assert_eq!(d.iter().filter(|p| p.kind == PairKind::Inter).count(), 100);

        let j = assemble_condition(Condition::Jitter, &src, budget, 1).unwrap();
        assert_eq!((count(&j, Provenance::Real), count(&j, Provenance::Jitter)), (400, 400));

        let a = assemble_condition(Condition::DSynthAuto, &src, budget, 1).unwrap();
        assert_eq!(
            (count(&a, Provenance::Real), count(&a, Provenance::SynthAuto)),
            (400, 2000)
        );

        let rp = assemble_condition(Condition::RealPlus, &src, budget, 1).unwrap();
        assert_eq!(
            (count(&rp, Provenance::Real), count(&rp, Provenance::Pseudo)),
            (400, 400)
        );

        let short = PairSources {
            synth_verified: &verified[..50],
            ..src
        };
        match assemble_condition(Condition::DSynth, &short, budget, 1) {
            Err(Error::Config(msg)) => assert!(msg.contains("intra"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn pair_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let pairs = vec![
            OrderedPair::new(
                1,
                4,
                9,
                Label::AMore,
                Provenance::SynthVerified,
                PairKind::Intra,
                Split::Train,
            )
            .unwrap(),
            OrderedPair::new(
                3,
                12,
                8,
                Label::BMore,
                Provenance::Real,
                PairKind::NotApplicable,
                Split::Test,
            )
            .unwrap(),
        ];
        write_pairs(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("{PAIR_CSV_HEADER}\n")));
        assert!(text.contains("1,4,9,A,SYNTH_VERIFIED,INTRA,train\n"));
        assert!(text.contains("3,12,8,B,REAL,NA,test\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }
}
