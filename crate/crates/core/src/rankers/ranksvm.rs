//! Linear RankSVM trained by full-batch Pegasos subgradient steps, and the
//! local-learning wrapper that fits a fresh model per test pair on its
//! nearest training pairs.
//!
//! Objective: `(λ/2)‖w‖² + (1/n) Σ_p max(0, 1 − wᵀu_p)` with
//! `u_p = φ(more) − φ(less)`. With step `η_t = 1/(λ(t+1))` the iterates
//! satisfy `w_T = (1/(λ n T)) Σ_{t<T} Σ_{p ∈ V_t} u_p`, where `V_t` is the set
//! of margin violators at step `t`. The solver therefore only tracks how
//! often each pair violated, working on the Gram matrix of difference
//! vectors; this is exact, not an approximation.

use serde::{Deserialize, Serialize};

use super::linalg::{dot, gemm_nt, sq_dist};
use super::FeatureTable;
use crate::attrworld::Image;
use crate::error::{Error, Result};
use crate::features::{extract_descriptor, Normalizer};
use crate::pairgen::{Label, OrderedPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            iterations: 2000,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearRankModel {
    pub w: Vec<f64>,
    pub normalizer: Option<Normalizer>,
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// Coefficients `α` with `w = Σ α_p u_p` after `iterations` steps.
///
/// `gram` is the row-major `n × n` matrix of `u_pᵀ u_q`.
pub fn pegasos_dual(gram: &[f64], n: usize, cfg: &SvmConfig) -> Vec<f64> {
    let mut counts = vec![0u32; n];
    let mut acc = vec![0.0; n];
    let scale = cfg.lambda * n as f64;
    let mut violators = Vec::with_capacity(n);
    for t in 0..cfg.iterations {
        violators.clear();
        if t == 0 {
            violators.extend(0..n);
        } else {
            let threshold = scale * t as f64;
            violators.extend((0..n).filter(|&q| acc[q] < threshold));
        }
        for &p in &violators {
            counts[p] += 1;
            let row = &gram[p * n..(p + 1) * n];
            acc.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
    }
    let denom = scale * cfg.iterations as f64;
    counts.into_iter().map(|c| f64::from(c) / denom).collect()
}

/// Difference vectors `φ(more) − φ(less)`, row-major `n × d`.
pub fn difference_vectors(pairs: &[OrderedPair], items: &FeatureTable) -> Result<Vec<f64>> {
    let d = items.dim();
    let mut u = Vec::with_capacity(pairs.len() * d);
    for p in pairs {
        let (more, less) = p.ordered();
        let (a, b) = (items.get(more)?, items.get(less)?);
        u.extend(a.iter().zip(b).map(|(x, y)| x - y));
    }
    Ok(u)
}

pub fn gram_of_rows(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    gemm_nt(n, d, n, 1.0, rows, rows, 0.0, &mut g);
    g
}

pub fn train_ranksvm(
    pairs: &[OrderedPair],
    items: &FeatureTable,
    cfg: &SvmConfig,
    seed: u64,
) -> Result<LinearRankModel> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("RankSVM needs at least one training pair".into()));
    }
    let (n, d) = (pairs.len(), items.dim());
    let u = difference_vectors(pairs, items)?;
    let gram = gram_of_rows(&u, n, d);
    let alpha = pegasos_dual(&gram, n, cfg);
    let mut w = vec![0.0; d];
    for (p, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            w.iter_mut()
                .zip(&u[p * d..(p + 1) * d])
                .for_each(|(wi, ui)| *wi += a * ui);
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("RankSVM weights are not finite".into()));
    }
    Ok(LinearRankModel {
        w,
        normalizer: None,
        lambda: cfg.lambda,
        iterations: cfg.iterations,
        seed,
    })
}

pub fn objective(w: &[f64], diffs: &[Vec<f64>], lambda: f64) -> f64 {
    let hinge: f64 = diffs.iter().map(|u| (1.0 - dot(w, u)).max(0.0)).sum();
    0.5 * lambda * dot(w, w) + hinge / diffs.len() as f64
}

impl LinearRankModel {
    /// Score of an already-normalised descriptor.
    pub fn score_descriptor(&self, x: &[f64]) -> f64 {
        dot(&self.w, x)
    }

    pub fn predict(&self, m: &[f64], n: &[f64]) -> Label {
        decide(self.score_descriptor(m) - self.score_descriptor(n))
    }
}

/// `wᵀ · normalize(φ(x))`; higher means more of the attribute.
pub fn score_linear(model: &LinearRankModel, image: &Image) -> Result<f64> {
    let d = extract_descriptor(image);
    let x = match &model.normalizer {
        Some(n) => n.apply(&d.0),
        None => d.0,
    };
    if x.len() != model.w.len() {
        return Err(Error::InvalidInput(format!(
            "descriptor length {} does not match model dimension {}",
            x.len(),
            model.w.len()
        )));
    }
    Ok(model.score_descriptor(&x))
}

/// Winner rule shared by every ranker: a zero difference goes to `A`.
pub fn decide(score_diff: f64) -> Label {
    if score_diff < 0.0 {
        Label::BMore
    } else {
        Label::AMore
    }
}

/// How two pairs are compared when selecting neighbours.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMetric {
    /// `‖φm − φi‖ · ‖φn − φj‖`.
    #[default]
    EuclideanProduct,
    /// `Π_k |φm_k − φi_k| · |φn_k − φj_k|`, evaluated in log space.
    ElementwiseProduct,
}

fn log_elementwise(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs().ln()).sum()
}

/// Distance between test pair `(m, n)` and training pair `(i, j)`, taking the
/// better of the direct and swapped alignments. `flipped` is true when the
/// swapped alignment (`m↔j`, `n↔i`) is strictly closer.
pub fn pair_distance(test: (&[f64], &[f64]), train: (&[f64], &[f64])) -> (f64, bool) {
    pair_distance_with(test, train, PairMetric::EuclideanProduct)
}

pub fn pair_distance_with(test: (&[f64], &[f64]), train: (&[f64], &[f64]), metric: PairMetric) -> (f64, bool) {
    let (m, n) = test;
    let (i, j) = train;
    let (direct, swap) = match metric {
        PairMetric::EuclideanProduct => (
            sq_dist(m, i).sqrt() * sq_dist(n, j).sqrt(),
            sq_dist(m, j).sqrt() * sq_dist(n, i).sqrt(),
        ),
        PairMetric::ElementwiseProduct => (
            (log_elementwise(m, i) + log_elementwise(n, j)).exp(),
            (log_elementwise(m, j) + log_elementwise(n, i)).exp(),
        ),
    };
    if swap < direct {
        (swap, true)
    } else {
        (direct, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Position in the training pool.
    pub index: usize,
    pub distance: f64,
    pub flipped: bool,
}

/// Stable selection of the `k` smallest distances; ties go to the lower
/// pool index.
pub fn select_nearest(mut scored: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    let by = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by);
        scored.truncate(k);
    }
    scored.sort_by(by);
    scored
}

pub fn nearest_pairs(
    test: (&[f64], &[f64]),
    pool: &[OrderedPair],
    items: &FeatureTable,
    k: usize,
    metric: PairMetric,
) -> Result<Vec<Neighbor>> {
    if pool.len() < k {
        return Err(Error::Config(format!(
            "local learning needs K = {k} neighbours but the pool holds {}",
            pool.len()
        )));
    }
    let scored = pool
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let (distance, flipped) = pair_distance_with(test, (items.get(p.item_a)?, items.get(p.item_b)?), metric);
            Ok(Neighbor {
                index,
                distance,
                flipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(select_nearest(scored, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub k: usize,
    pub metric: PairMetric,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            k: 100,
            metric: PairMetric::EuclideanProduct,
        }
    }
}

/// Neighbours re-expressed in the test pair's alignment: a flipped
/// neighbour is stored reversed with its label inverted, which leaves its
/// (more, less) order untouched.
pub fn aligned_neighbors(pool: &[OrderedPair], neighbors: &[Neighbor]) -> Vec<OrderedPair> {
    neighbors
        .iter()
        .map(|nb| {
            let p = &pool[nb.index];
            if nb.flipped {
                p.reversed()
            } else {
                p.clone()
            }
        })
        .collect()
}

pub fn predict_local(
    test: (&[f64], &[f64]),
    pool: &[OrderedPair],
    items: &FeatureTable,
    local: &LocalConfig,
    svm: &SvmConfig,
    seed: u64,
) -> Result<Label> {
    let neighbors = nearest_pairs(test, pool, items, local.k, local.metric)?;
    let local_pairs = aligned_neighbors(pool, &neighbors);
    let model = train_ranksvm(&local_pairs, items, svm, seed)?;
    Ok(model.predict(test.0, test.1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalPrediction {
    pub label: Label,
    pub score_diff: f64,
    /// Fraction of selected neighbours that are not real pairs.
    pub synthetic_fraction: f64,
}

/// A local ranker's pool together with its items' normalised features.
#[derive(Clone, Debug)]
pub struct LocalRankModel {
    pub pool: Vec<OrderedPair>,
    pub items: FeatureTable,
    /// Applied to raw descriptors of query images.
    pub normalizer: Option<Normalizer>,
    pub local: LocalConfig,
    pub svm: SvmConfig,
}

impl LocalRankModel {
    pub fn ranker(&self) -> Result<LocalRanker> {
        LocalRanker::new(&self.pool, &self.items, self.local, self.svm.clone())
    }

    pub fn prepare(&self, image: &Image) -> Vec<f64> {
        let d = extract_descriptor(image).0;
        match &self.normalizer {
            Some(n) => n.apply(&d),
            None => d,
        }
    }
}

/// Batched local learning over a fixed pool. All inner products are taken
/// once up front, so each query costs a neighbour scan plus a `K × K`
/// solve.
pub struct LocalRanker {
    /// Whether each pool pair is real.
    real: Vec<bool>,
    local: LocalConfig,
    svm: SvmConfig,
    items: FeatureTable,
    /// Pool item positions of each pair's (more, less).
    ordered: Vec<(usize, usize)>,
    /// Positions of each pair's (a, b) as stored.
    stored: Vec<(usize, usize)>,
    gram: Vec<f64>,
    norms: Vec<f64>,
}

impl LocalRanker {
    pub fn new(pool: &[OrderedPair], all_items: &FeatureTable, local: LocalConfig, svm: SvmConfig) -> Result<Self> {
        svm.validate()?;
        if local.metric != PairMetric::EuclideanProduct {
            return Err(Error::Config(
                "batched local ranker supports the euclidean-product metric only".into(),
            ));
        }
        if pool.len() < local.k || local.k == 0 {
            return Err(Error::Config(format!(
                "local learning needs K = {} neighbours but the pool holds {}",
                local.k,
                pool.len()
            )));
        }
        let ids = super::pair_items(pool);
        let items = all_items.subset(&ids)?;
        let n = items.len();
        let d = items.dim();
        let gram = gram_of_rows(items.data(), n, d);
        let norms = (0..n).map(|i| gram[i * n + i]).collect();
        let pos = |id| items.position(id).expect("pool item present");
        let ordered = pool
            .iter()
            .map(|p| {
                let (m, l) = p.ordered();
                (pos(m), pos(l))
            })
            .collect();
        let stored = pool.iter().map(|p| (pos(p.item_a), pos(p.item_b))).collect();
        Ok(Self {
            real: pool.iter().map(|p| p.provenance.is_real()).collect(),
            local,
            svm,
            items,
            ordered,
            stored,
            gram,
            norms,
        })
    }

    /// Predicts each `(m, n)` test pair given the test items' features.
    pub fn predict_all(&self, test_items: &FeatureTable, tests: &[(u64, u64)]) -> Result<Vec<LocalPrediction>> {
        let n_pool = self.items.len();
        let n_test = test_items.len();
        let d = self.items.dim();
        if test_items.dim() != d {
            return Err(Error::InvalidInput(
                "test features differ in dimension from pool".into(),
            ));
        }
        let mut cross = vec![0.0; n_test * n_pool];
        gemm_nt(
            n_test,
            d,
            n_pool,
            1.0,
            test_items.data(),
            self.items.data(),
            0.0,
            &mut cross,
        );
        let test_norms: Vec<f64> = (0..n_test).map(|t| dot(test_items.row(t), test_items.row(t))).collect();
        let dist = |t: usize, p: usize| {
            (test_norms[t] + self.norms[p] - 2.0 * cross[t * n_pool + p])
                .max(0.0)
                .sqrt()
        };

        tests
            .iter()
            .map(|&(m_id, n_id)| {
                let m = test_items
                    .position(m_id)
                    .ok_or_else(|| Error::InvalidInput(format!("no features for test item {m_id}")))?;
                let n = test_items
                    .position(n_id)
                    .ok_or_else(|| Error::InvalidInput(format!("no features for test item {n_id}")))?;
                let scored = self
                    .stored
                    .iter()
                    .enumerate()
                    .map(|(index, &(i, j))| {
                        let direct = dist(m, i) * dist(n, j);
                        let swap = dist(m, j) * dist(n, i);
                        Neighbor {
                            index,
                            distance: if swap < direct { swap } else { direct },
                            flipped: swap < direct,
                        }
                    })
                    .collect();
                let nb = select_nearest(scored, self.local.k);
                let k = nb.len();
                let mut g = vec![0.0; k * k];
                for (r, a) in nb.iter().enumerate() {
                    let (am, al) = self.ordered[a.index];
                    for (c, b) in nb.iter().enumerate().skip(r) {
                        let (bm, bl) = self.ordered[b.index];
                        let v = self.gram[am * n_pool + bm] - self.gram[am * n_pool + bl] - self.gram[al * n_pool + bm]
                            + self.gram[al * n_pool + bl];
                        g[r * k + c] = v;
                        g[c * k + r] = v;
                    }
                }
                let alpha = pegasos_dual(&g, k, &self.svm);
                let score_diff: f64 = nb
                    .iter()
                    .zip(&alpha)
                    .map(|(a, &coef)| {
                        let (pm, pl) = self.ordered[a.index];
                        let um = cross[m * n_pool + pm] - cross[m * n_pool + pl];
                        let un = cross[n * n_pool + pm] - cross[n * n_pool + pl];
                        coef * (um - un)
                    })
                    .sum();
                let synthetic = nb.iter().filter(|a| !self.real[a.index]).count();
                Ok(LocalPrediction {
                    label: decide(score_diff),
                    score_diff,
                    synthetic_fraction: synthetic as f64 / k as f64,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::{PairKind, Provenance, Split};
    use rand::Rng as _;

    fn pair(a: u64, b: u64, label: Label) -> OrderedPair {
        OrderedPair::new(0, a, b, label, Provenance::Real, PairKind::NotApplicable, Split::Train).unwrap()
    }

    fn table(rows: &[(u64, Vec<f64>)]) -> FeatureTable {
        let mut t = FeatureTable::new(rows[0].1.len());
        for (id, r) in rows {
            t.insert(*id, r).unwrap();
        }
        t
    }

    /// Straightforward primal Pegasos; independent of the dual bookkeeping.
    fn primal_pegasos(diffs: &[Vec<f64>], cfg: &SvmConfig) -> Vec<f64> {
        let d = diffs[0].len();
        let n = diffs.len() as f64;
        let mut w = vec![0.0; d];
        for t in 0..cfg.iterations {
            let eta = 1.0 / (cfg.lambda * (t as f64 + 1.0));
            let mut step = vec![0.0; d];
            for u in diffs {
                if dot(&w, u) < 1.0 {
                    step.iter_mut().zip(u).for_each(|(s, x)| *s += x);
                }
            }
            for (wi, si) in w.iter_mut().zip(&step) {
                *wi = (1.0 - eta * cfg.lambda) * *wi + eta / n * si;
            }
        }
        w
    }

    #[test]
    fn dual_matches_primal_iterates() {
        let mut rng = crate::seed::rng(5);
        let rows: Vec<(u64, Vec<f64>)> = (0..12)
            .map(|i| (i, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let t = table(&rows);
        let pairs: Vec<OrderedPair> = (0..10)
            .map(|i| {
                pair(
                    i,
                    (i * 5 + 3) % 12,
                    if i % 3 == 0 { Label::BMore } else { Label::AMore },
                )
            })
            .filter(|p| p.item_a != p.item_b)
            .collect();
        let cfg = SvmConfig {
            lambda: 0.05,
            iterations: 300,
        };
        let model = train_ranksvm(&pairs, &t, &cfg, 0).unwrap();
        let diffs: Vec<Vec<f64>> = pairs
            .iter()
            .map(|p| {
                let (m, l) = p.ordered();
                t.get(m)
                    .unwrap()
                    .iter()
                    .zip(t.get(l).unwrap())
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let w = primal_pegasos(&diffs, &cfg);
        for (a, b) in model.w.iter().zip(&w) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn separable_pairs_are_satisfied() {
        let t = table(&[
            (1, vec![1.0, 0.0]),
            (2, vec![0.0, 0.0]),
            (3, vec![3.0, 0.5]),
            (4, vec![0.0, 0.5]),
        ]);
        let pairs = vec![pair(1, 2, Label::AMore), pair(4, 3, Label::BMore)];
        let m = train_ranksvm(&pairs, &t, &SvmConfig::default(), 0).unwrap();
        for p in &pairs {
            let (a, b) = p.ordered();
            assert!(m.score_descriptor(t.get(a).unwrap()) > m.score_descriptor(t.get(b).unwrap()));
        }
    }

    #[test]
    fn contradictory_pairs_cancel() {
        let t = table(&[(1, vec![1.0, 2.0]), (2, vec![0.0, -1.0])]);
        let pairs = vec![pair(1, 2, Label::AMore), pair(1, 2, Label::BMore)];
        let cfg = SvmConfig::default();
        let m = train_ranksvm(&pairs, &t, &cfg, 0).unwrap();
        let u = vec![1.0, 3.0];
        let obj = objective(&m.w, &[u.clone(), vec![-1.0, -3.0]], cfg.lambda);
        assert!(obj >= 1.0 - 1e-12);
        let correct = pairs
            .iter()
            .filter(|p| m.predict(t.get(p.item_a).unwrap(), t.get(p.item_b).unwrap()) == p.label)
            .count();
        assert_eq!(correct, 1);
    }

    #[test]
    fn objective_approaches_grid_minimum() {
        let diffs = vec![
            vec![1.0, 0.2],
            vec![0.5, -1.0],
            vec![-0.3, 0.4],
            vec![2.0, 1.0],
            vec![-1.0, -0.5],
        ];
        let rows: Vec<(u64, Vec<f64>)> = diffs
            .iter()
            .enumerate()
            .flat_map(|(i, u)| [(2 * i as u64, u.clone()), (2 * i as u64 + 1, vec![0.0, 0.0])])
            .collect();
        let t = table(&rows);
        let pairs: Vec<_> = (0..diffs.len() as u64)
            .map(|i| pair(2 * i, 2 * i + 1, Label::AMore))
            .collect();
        let lambda = 0.1;
        // brute-force grid over w ∈ [-4, 4]², step 0.005
        let mut best = f64::INFINITY;
        for i in 0..=1600 {
            for j in 0..=1600 {
                let w = [-4.0 + i as f64 * 0.005, -4.0 + j as f64 * 0.005];
                best = best.min(objective(&w, &diffs, lambda));
            }
        }
        let mut last = f64::INFINITY;
        for iterations in [500, 5_000, 50_000] {
            let m = train_ranksvm(&pairs, &t, &SvmConfig { lambda, iterations }, 0).unwrap();
            let obj = objective(&m.w, &diffs, lambda);
            assert!(obj >= best - 1e-3, "objective {obj} below grid minimum {best}");
            if iterations >= 5_000 {
                assert!(obj <= last + 1e-2, "objective rose from {last} to {obj}");
            }
            last = obj;
        }
        assert!(last - best < 1e-2, "final {last} vs grid {best}");
    }

    #[test]
    fn zero_model_scores_zero() {
        let m = LinearRankModel {
            w: vec![0.0; crate::features::DESCRIPTOR_LEN],
            normalizer: None,
            lambda: 1e-4,
            iterations: 1,
            seed: 0,
        };
        let img = Image::filled(64, 64, 0.4);
        assert_eq!(score_linear(&m, &img).unwrap(), 0.0);
    }

    #[test]
    fn empty_pairs_rejected() {
        let t = table(&[(1, vec![1.0])]);
        assert!(matches!(
            train_ranksvm(&[], &t, &SvmConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pair_distance_alignment() {
        let (a, b) = (vec![1.0, 0.0], vec![0.0, 2.0]);
        assert_eq!(pair_distance((&a, &b), (&a, &b)), (0.0, false));
        assert_eq!(pair_distance((&a, &b), (&b, &a)), (0.0, true));
        let (d, _) = pair_distance_with((&a, &b), (&b, &a), PairMetric::ElementwiseProduct);
        assert_eq!(d, 0.0);
    }

    #[test]
    fn batched_local_matches_reference() {
        let mut rng = crate::seed::rng(17);
        let rows: Vec<(u64, Vec<f64>)> = (0..60)
            .map(|i| (i, (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let t = table(&rows);
        let w_true = [1.0, -0.5, 0.3, 0.0, 0.2];
        let pool: Vec<OrderedPair> = (0..40u64)
            .map(|i| {
                let (a, b) = (i, 40 + (i * 7) % 20);
                let diff = dot(&w_true, t.get(a).unwrap()) - dot(&w_true, t.get(b).unwrap());
                pair(a, b, decide(diff))
            })
            .collect();
        let local = LocalConfig {
            k: 15,
            ..Default::default()
        };
        let svm = SvmConfig {
            lambda: 1e-3,
            iterations: 200,
        };
        let ranker = LocalRanker::new(&pool, &t, local, svm.clone()).unwrap();
        let tests: Vec<(u64, u64)> = (0..20).map(|i| (i, 59 - i)).collect();
        let batched = ranker.predict_all(&t, &tests).unwrap();
        for (&(m, n), b) in tests.iter().zip(&batched) {
            let reference = predict_local((t.get(m).unwrap(), t.get(n).unwrap()), &pool, &t, &local, &svm, 0).unwrap();
            assert_eq!(reference, b.label);
        }
    }
}
