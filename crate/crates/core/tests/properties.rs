use proptest::prelude::*;

use semjitter::attrworld::{
    param_map, render, Attribute, AttributeVector, Comparison, Image, LatentVector, ProceduralWorld, WorldConfig,
};
use semjitter::features::{
    extract_descriptor, DESCRIPTOR_LEN, DESCRIPTOR_VERSION, GRAY_LEN, HIST_LEN, HIST_OFFSET, ORIENT_LEN, ORIENT_OFFSET,
};
use semjitter::pairgen::{
    annotate_comparison, assemble_condition, lowlevel_jitter, AnnotatorConfig, Condition, Label, OrderedPair, PairKind,
    PairSources, PoolBudget, Provenance, Split,
};
use semjitter::prior::{fit_attribute_prior, generate_spectrum, perturb_vector, Identity, PriorModel};
use semjitter::rankers::ranknet::{pair_loss, train_ranknet, PairWorkspace, RankNetConfig, RankNetModel, TrainConfig};
use semjitter::rankers::ranksvm::{predict_local, train_ranksvm, LocalConfig, SvmConfig};
use semjitter::rankers::FeatureTable;
use semjitter::seed::rng;

fn cfg() -> WorldConfig {
    WorldConfig::default()
}

fn vec4() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 4)
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 3)
}

fn table(rows: &[Vec<f64>]) -> FeatureTable {
    let mut t = FeatureTable::new(rows[0].len());
    for (id, r) in rows.iter().enumerate() {
        t.insert(id as u64, r).unwrap();
    }
    t
}

fn pair(a: u64, b: u64, label: Label) -> OrderedPair {
    OrderedPair::new(0, a, b, label, Provenance::Real, PairKind::NotApplicable, Split::Train).unwrap()
}

fn ordered_pairs(n_items: u64, raw: &[(u64, u64, bool)]) -> Vec<OrderedPair> {
    raw.iter()
        .map(|&(a, b, l)| (a % n_items, b % n_items, l))
        .filter(|(a, b, _)| a != b)
        .map(|(a, b, l)| pair(a, b, if l { Label::AMore } else { Label::BMore }))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn driven_parameter_increases_on_grid(z in vec3(), y in vec4(), attribute in 0usize..4) {
        let cfg = cfg();
        let z = LatentVector(z);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..50 {
            let mut yy = y.clone();
            yy[attribute] = -3.0 + 6.0 * i as f64 / 49.0;
            let p = param_map(&AttributeVector(yy), &z, &cfg).unwrap();
            let v = Attribute::from_index(attribute, &cfg).unwrap().driven_param(&p);
            prop_assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn single_attribute_change_is_local(z in vec3(), y in vec4(), attribute in 0usize..4, delta in -2.0..2.0f64) {
        let cfg = cfg();
        let z = LatentVector(z);
        let mut moved = y.clone();
        moved[attribute] += delta;
        let p = param_map(&AttributeVector(y), &z, &cfg).unwrap().as_array();
        let q = param_map(&AttributeVector(moved), &z, &cfg).unwrap().as_array();
        for k in (0..7).filter(|&k| k != attribute) {
            prop_assert_eq!(p[k].to_bits(), q[k].to_bits());
        }
    }

    #[test]
    fn perturbation_moves_one_coordinate(y in vec4(), attribute in 0usize..4, var in prop::collection::vec(0.05..4.0f64, 4)) {
        let n = 4;
        let cov: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { var[k / n] } else { 0.0 }).collect();
        let prior = PriorModel::from_moments(vec![0.0; n], cov, 0.0).unwrap();
        let (minus, plus) = perturb_vector(&AttributeVector(y.clone()), attribute, &prior).unwrap();
        let step = 2.0 * var[attribute].sqrt();
        for k in 0..n {
            if k == attribute {
                prop_assert_eq!(minus.0[k], y[k] - step);
                prop_assert_eq!(plus.0[k], y[k] + step);
            } else {
                prop_assert_eq!(minus.0[k].to_bits(), y[k].to_bits());
                prop_assert_eq!(plus.0[k].to_bits(), y[k].to_bits());
            }
        }
    }

    #[test]
    fn self_pairs_rejected(a in any::<u64>()) {
        prop_assert!(OrderedPair::new(0, a, a, Label::AMore, Provenance::Real, PairKind::Intra, Split::Train).is_err());
    }

    #[test]
    fn noiseless_verification_reproduces_truth(seed in any::<u64>(), a_more in any::<bool>(), n in 0usize..4) {
        let cfg = AnnotatorConfig { n_annotators: 2 * n + 1, flip_probability: 0.0, ..AnnotatorConfig::default() };
        let truth = if a_more { Comparison::AMore } else { Comparison::BMore };
        let expect = if a_more { Label::AMore } else { Label::BMore };
        prop_assert_eq!(annotate_comparison(truth, &cfg, seed).unwrap(), Some(expect));
    }

    #[test]
    fn condition_sizes(n in 1usize..40, m in 0usize..60, seed in any::<u64>()) {
        let real: Vec<_> = (0..n as u64).map(|i| pair(2 * i, 2 * i + 1, Label::AMore)).collect();
        let synth: Vec<_> = (0..(m + n) as u64)
            .map(|i| {
                let kind = if i % 2 == 0 { PairKind::Intra } else { PairKind::Inter };
                OrderedPair::new(0, 1000 + 2 * i, 1001 + 2 * i, Label::BMore, Provenance::SynthAuto, kind, Split::Train).unwrap()
            })
            .collect();
        let sources = PairSources { real: &real, jitter: &real, synth_verified: &synth, synth_auto: &synth, pseudo: &real };
        let budget = PoolBudget { n_real: n, n_auto: m };
        let size = |c| assemble_condition(c, &sources, budget, seed).unwrap().len();
        prop_assert_eq!(size(Condition::Real), n);
        prop_assert_eq!(size(Condition::Classifier), n);
        prop_assert_eq!(size(Condition::Jitter), 2 * n);
        prop_assert_eq!(size(Condition::RealPlus), 2 * n);
        prop_assert_eq!(size(Condition::DSynth), n);
        prop_assert_eq!(size(Condition::DSynthAuto), n + m);
    }

    #[test]
    fn ranksvm_winner_ignores_test_order(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 5), 8),
        raw in prop::collection::vec((0u64..8, 0u64..8, any::<bool>()), 4..16),
        m in 0usize..8,
        n in 0usize..8,
    ) {
        let items = table(&rows);
        let pairs = ordered_pairs(8, &raw);
        prop_assume!(!pairs.is_empty() && m != n);
        let model = train_ranksvm(&pairs, &items, &SvmConfig { lambda: 0.1, iterations: 100 }, 0).unwrap();
        let (x, y) = (&rows[m], &rows[n]);
        prop_assume!(model.score_descriptor(x) != model.score_descriptor(y));
        prop_assert_eq!(model.predict(x, y), model.predict(y, x).inverted());
    }

    #[test]
    fn local_prediction_ignores_stored_order(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 10),
        raw in prop::collection::vec((0u64..10, 0u64..10, any::<bool>()), 12..30),
        which in any::<prop::sample::Index>(),
        test in prop::collection::vec(-1.0..1.0f64, 8),
    ) {
        let items = table(&rows);
        let pool = ordered_pairs(10, &raw);
        prop_assume!(pool.len() >= 6);
        let local = LocalConfig { k: 5, ..LocalConfig::default() };
        let svm = SvmConfig { lambda: 0.1, iterations: 100 };
        let t = (&test[..4], &test[4..]);
        let before = predict_local(t, &pool, &items, &local, &svm, 0).unwrap();
        let mut flipped = pool.clone();
        let i = which.index(flipped.len());
        flipped[i] = flipped[i].reversed();
        prop_assert_eq!(flipped[i].ordered(), pool[i].ordered());
        prop_assert_eq!(predict_local(t, &flipped, &items, &local, &svm, 0).unwrap(), before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rendering_is_bounded_and_deterministic(y in vec4(), z in vec3()) {
        let cfg = cfg();
        let (y, z) = (AttributeVector(y), LatentVector(z));
        let img = render(&y, &z, &cfg).unwrap();
        prop_assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(img, render(&y, &z, &cfg).unwrap());
    }

    #[test]
    fn spectrum_orders_driven_parameter(y in vec4(), z in vec3(), attribute in 0usize..4) {
        let world = ProceduralWorld::new(cfg()).unwrap();
        let prior = PriorModel::from_moments(vec![0.0; 4], (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect(), 0.0).unwrap();
        let id = Identity::new(0, AttributeVector(y), LatentVector(z), &world).unwrap();
        let s = generate_spectrum(&id, attribute, &prior, &world).unwrap();
        let spec = s.spectrum.as_ref().unwrap();
        let attr = Attribute::from_index(attribute, &world.cfg).unwrap();
        prop_assert!(attr.driven_param(&spec.minus_params) < attr.driven_param(&s.params));
        prop_assert!(attr.driven_param(&s.params) < attr.driven_param(&spec.plus_params));
    }

    #[test]
    fn descriptor_and_jitter_are_pure(y in vec4(), z in vec3(), seed in any::<u64>()) {
        let img = render(&AttributeVector(y), &LatentVector(z), &cfg()).unwrap();
        let copy = img.clone();
        let d = extract_descriptor(&img);
        prop_assert_eq!(d.0.len(), DESCRIPTOR_LEN);
        prop_assert_eq!(&d, &extract_descriptor(&img));
        prop_assert_eq!(&img, &copy);
        prop_assert_eq!(lowlevel_jitter(&img, seed), lowlevel_jitter(&img, seed));
    }

    #[test]
    fn ranknet_branch_swap_is_symmetric(seed in any::<u64>(), phase in 0.0..6.0f64) {
        let cfg = RankNetConfig::reduced();
        let model = RankNetModel::new(cfg.clone(), seed).unwrap();
        let a = pattern(cfg.image_width, phase);
        let b = pattern(cfg.image_width, phase + 1.7);
        let engine = model.engine::<f64>();
        let (pa, pb) = (engine.planes(&a).unwrap(), engine.planes(&b).unwrap());
        let mut ws = PairWorkspace::new(&cfg);
        // a pair stored as (b, a) with label "a more" is fed to the same (more, less) branches
        let stored = pair(1, 0, Label::BMore);
        let (more, _) = stored.ordered();
        let (pm, pl) = if more == 0 { (&pa, &pb) } else { (&pb, &pa) };
        let direct = engine.pair_loss_grad(&pa, &pb, 1.0, None, &mut ws).unwrap();
        let swapped = engine.pair_loss_grad(pm, pl, 1.0, None, &mut ws).unwrap();
        let from_scores = pair_loss(model.score(&a).unwrap(), model.score(&b).unwrap());
        prop_assert!((direct - swapped).abs() <= 1e-12);
        prop_assert!((direct - from_scores).abs() <= 1e-12);
    }
}

fn pattern(side: usize, phase: f64) -> Image {
    let mut img = Image::filled(side, side, 0.0);
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                img.set(
                    x,
                    y,
                    c,
                    0.5 + 0.4 * ((x as f64 * 0.9 + phase + c as f64).sin() * (y as f64 * 0.6).cos()),
                );
            }
        }
    }
    img
}

#[test]
fn descriptor_layout_is_pinned() {
    assert_eq!(DESCRIPTOR_VERSION, 1);
    assert_eq!(DESCRIPTOR_LEN, 1182);
    assert_eq!((GRAY_LEN, HIST_LEN, ORIENT_LEN), (1024, 30, 128));
    assert_eq!((HIST_OFFSET, ORIENT_OFFSET), (1024, 1054));
}

#[test]
fn prior_round_trips_through_sampling() {
    let mean = vec![0.5, -1.0, 0.0, 2.0];
    let cov = vec![
        1.0, 0.3, 0.0, -0.2, //
        0.3, 0.8, 0.1, 0.0, //
        0.0, 0.1, 1.5, 0.4, //
        -0.2, 0.0, 0.4, 0.6,
    ];
    let prior = PriorModel::from_moments(mean.clone(), cov.clone(), 0.0).unwrap();
    let sampler = prior.sampler().unwrap();
    let mut r = rng(9);
    let rows: Vec<Vec<f64>> = (0..10_000).map(|_| sampler.sample(&mut r).0).collect();
    let fit = fit_attribute_prior(&rows, 0.0).unwrap();
    for (a, b) in fit.mean.iter().zip(&mean) {
        assert!((a - b).abs() < 0.05, "mean {a} vs {b}");
    }
    for (a, b) in fit.covariance.iter().zip(&cov) {
        assert!((a - b).abs() < 0.05, "covariance {a} vs {b}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = RankNetConfig::reduced();
    let images: Vec<Image> = (0..8).map(|i| pattern(cfg.image_width, i as f64 * 0.8)).collect();
    let pairs: Vec<_> = (0..7u64).map(|i| pair(i, i + 1, Label::AMore)).collect();
    let train = TrainConfig {
        epochs: 3,
        batch: 4,
        ..TrainConfig::default()
    };
    let run = || {
        train_ranknet(&pairs, |id| images.get(id as usize), cfg.clone(), &train, 17)
            .unwrap()
            .0
    };
    let (a, b) = (run(), run());
    assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits()));

    let rows: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..5).map(|k| ((i * 7 + k * 3) % 11) as f64 / 11.0).collect())
        .collect();
    let items = table(&rows);
    let svm = SvmConfig::default();
    let w1 = train_ranksvm(&pairs, &items, &svm, 3).unwrap().w;
    let w2 = train_ranksvm(&pairs, &items, &svm, 3).unwrap().w;
    assert!(w1.iter().zip(&w2).all(|(x, y)| x.to_bits() == y.to_bits()));
}
