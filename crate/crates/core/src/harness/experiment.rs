//! The condition-grid experiment: one shared context per seed, one per
//! (seed, attribute), and one cell per (ranker, condition) inside that.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::accuracy_of;
use super::splits::{
    SplitSpec, GENERATOR_BASE, POPULATION_CAPACITY, REAL_BASE, SYNTH_BASE, SYNTH_TEST_BASE, TEST_BASE, VALIDATION_BASE,
};
use super::testsets::{make_fine_grained_testset, make_synthetic_testset, spectrum_candidates, synthetic_batch};
use crate::attrworld::{Attribute, ConditionedWorld, Generator, Image, PhysicalParams, ProceduralWorld, WorldConfig};
use crate::error::{Error, Result};
use crate::features::{extract_descriptor, Normalizer, DESCRIPTOR_LEN};
use crate::modelfile::ModelFile;
use crate::pairgen::{
    assemble_condition, item_id, jitter_pairs, label_candidates, label_real_pairs, lowlevel_jitter,
    sample_real_identities, write_pairs, AnnotatorConfig, ClusterConfig, Condition, LabelStats, OrderedPair,
    PairSources, PoolBudget, Slot, Split,
};
use crate::prior::{fit_attribute_prior, generate_spectrum, sample_identity_with, Identity, PriorModel};
use crate::rankers::classifier::{
    presence_labels, realplus_pseudo_pairs, train_classifier, BinaryClassifierModel, ClassifierConfig,
};
use crate::rankers::ranknet::{train_ranknet, RankNetConfig, TrainConfig};
use crate::rankers::ranksvm::{decide, LocalConfig, LocalRanker, PairMetric, SvmConfig};
use crate::rankers::FeatureTable;
use crate::seed::{derive_indexed, derive_seed};

pub const SPEC_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub format_version: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_attributes")]
    pub attributes: Vec<usize>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_world")]
    pub world: WorldConfig,
    #[serde(default)]
    pub world_prior: WorldPriorSpec,
    #[serde(default)]
    pub budget: BudgetSpec,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub annotator: AnnotatorConfig,
    #[serde(default)]
    pub ranksvm: SvmConfig,
    #[serde(default)]
    pub local: LocalSpec,
    #[serde(default)]
    pub ranknet: RankNetSpec,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub realplus: RealPlusSpec,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_attributes() -> Vec<usize> {
    (0..4).collect()
}

/// JND used by experiments unless the experiment file sets `[world]`.
pub const EXPERIMENT_JND_FRACTION: f64 = 0.08;

fn default_world() -> WorldConfig {
    WorldConfig {
        jnd_fraction: EXPERIMENT_JND_FRACTION,
        ..WorldConfig::default()
    }
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            format_version: SPEC_FORMAT_VERSION,
            master_seed: 0,
            seeds: default_seeds(),
            attributes: default_attributes(),
            grid: GridSpec::default(),
            world: default_world(),
            world_prior: WorldPriorSpec::default(),
            budget: BudgetSpec::default(),
            cluster: ClusterConfig::default(),
            annotator: AnnotatorConfig::default(),
            ranksvm: SvmConfig::default(),
            local: LocalSpec::default(),
            ranknet: RankNetSpec::default(),
            classifier: ClassifierConfig::default(),
            prior: PriorSpec::default(),
            realplus: RealPlusSpec::default(),
        }
    }
}

/// Which conditions each ranker is run under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub ranksvm: Vec<Condition>,
    pub ranknet: Vec<Condition>,
    pub classifier: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            ranksvm: vec![Condition::Real, Condition::Jitter, Condition::DSynth],
            ranknet: vec![Condition::Real, Condition::DSynthAuto],
            classifier: true,
        }
    }
}

/// The world's own attribute distribution: equicorrelated Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldPriorSpec {
    /// Empty means all zeros.
    pub mean: Vec<f64>,
    pub std: f64,
    pub correlation: f64,
}

impl Default for WorldPriorSpec {
    fn default() -> Self {
        Self {
            mean: Vec::new(),
            std: 1.0,
            correlation: 0.0,
        }
    }
}

impl WorldPriorSpec {
    pub fn model(&self, n: usize) -> Result<PriorModel> {
        let mean = if self.mean.is_empty() {
            vec![0.0; n]
        } else {
            self.mean.clone()
        };
        if mean.len() != n {
            return Err(Error::Config(format!(
                "world_prior.mean has {} entries, world has {n} attributes",
                mean.len()
            )));
        }
        if !(self.std > 0.0) || !(-1.0 / (n as f64 - 1.0).max(1.0) < self.correlation && self.correlation < 1.0) {
            return Err(Error::Config(format!(
                "world_prior needs std > 0 and a valid correlation, got std {} correlation {}",
                self.std, self.correlation
            )));
        }
        let var = self.std * self.std;
        let cov = (0..n * n)
            .map(|k| if k / n == k % n { var } else { self.correlation * var })
            .collect();
        PriorModel::from_moments(mean, cov, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSpec {
    pub n_generator: usize,
    pub n_real_identities: usize,
    /// `N`.
    pub n_real: usize,
    /// `M`; also the size of the labelled synthetic batch.
    pub n_auto: usize,
    pub n_synth_identities: usize,
    pub n_validation_identities: usize,
    pub n_validation_pairs: usize,
    pub n_test_identities: usize,
    pub n_test_pairs: usize,
    /// Fine-grained gap band in JND units.
    pub fine_band: [f64; 2],
    pub n_synth_test_identities: usize,
    pub n_synth_test_pairs: usize,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        Self {
            n_generator: 60,
            n_real_identities: 300,
            n_real: 400,
            n_auto: 2000,
            n_synth_identities: 1000,
            n_validation_identities: 200,
            n_validation_pairs: 200,
            n_test_identities: 400,
            n_test_pairs: 500,
            fine_band: [1.0, 3.0],
            n_synth_test_identities: 200,
            n_synth_test_pairs: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSpec {
    pub k: usize,
    pub metric: PairMetric,
    /// Candidate K values picked on validation pairs; empty keeps `k`.
    pub k_grid: Vec<usize>,
}

impl Default for LocalSpec {
    fn default() -> Self {
        let d = LocalConfig::default();
        Self {
            k: d.k,
            metric: d.metric,
            k_grid: vec![50, 100, 200],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankNetSpec {
    pub train: TrainConfig,
    pub architecture: RankNetConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrengthSource {
    /// Classifier decision values.
    #[default]
    Decision,
    /// The world's true attribute strengths.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub ridge: f64,
    pub strengths: StrengthSource,
    /// Ridge of the strength-to-world conditioning regression.
    pub map_ridge: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            ridge: crate::prior::DEFAULT_RIDGE,
            strengths: StrengthSource::Decision,
            map_ridge: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealPlusSpec {
    /// Minimum classifier decision gap of a pseudo pair.
    pub delta: f64,
}

impl Default for RealPlusSpec {
    fn default() -> Self {
        Self { delta: 0.5 }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise experiment spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SPEC_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported experiment spec format_version {} (expected {SPEC_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.world.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() || self.attributes.is_empty() {
            return Err(Error::Config("seeds and attributes must be non-empty".into()));
        }
        if has_duplicates(&self.seeds) || has_duplicates(&self.attributes) {
            return Err(Error::Config("seeds and attributes must not repeat".into()));
        }
        if let Some(&a) = self.attributes.iter().find(|&&a| a >= self.world.n_attributes) {
            return Err(Error::Config(format!(
                "attribute {a} out of range for {} attributes",
                self.world.n_attributes
            )));
        }
        if has_duplicates(&self.grid.ranksvm) || has_duplicates(&self.grid.ranknet) {
            return Err(Error::Config("grid lists a condition twice".into()));
        }
        if self
            .grid
            .ranksvm
            .iter()
            .chain(&self.grid.ranknet)
            .any(|&c| c == Condition::Classifier)
        {
            return Err(Error::Config(
                "CLASSIFIER is a ranker of its own; enable it with grid.classifier".into(),
            ));
        }
        let b = &self.budget;
        for (name, v) in [
            ("n_generator", b.n_generator),
            ("n_real_identities", b.n_real_identities),
            ("n_real", b.n_real),
            ("n_synth_identities", b.n_synth_identities),
            ("n_test_identities", b.n_test_identities),
            ("n_test_pairs", b.n_test_pairs),
            ("n_synth_test_identities", b.n_synth_test_identities),
            ("n_synth_test_pairs", b.n_synth_test_pairs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("budget.{name} must be positive")));
            }
            if v as u64 > POPULATION_CAPACITY {
                return Err(Error::Config(format!("budget.{name} exceeds {POPULATION_CAPACITY}")));
            }
        }
        if b.n_validation_identities as u64 > POPULATION_CAPACITY {
            return Err(Error::Config(format!(
                "budget.n_validation_identities exceeds {POPULATION_CAPACITY}"
            )));
        }
        if !self.local.k_grid.is_empty() && (b.n_validation_identities < 2 || b.n_validation_pairs == 0) {
            return Err(Error::Config(
                "local.k_grid needs validation identities and pairs".into(),
            ));
        }
        if self.local.k == 0 || self.local.k_grid.contains(&0) {
            return Err(Error::Config("local K must be positive".into()));
        }
        let arch = &self.ranknet.architecture;
        if !self.grid.ranknet.is_empty()
            && (arch.image_width != self.world.image_width || arch.image_height != self.world.image_height)
        {
            return Err(Error::Config(format!(
                "RankNet input {}x{} does not match world images {}x{}",
                arch.image_width, arch.image_height, self.world.image_width, self.world.image_height
            )));
        }
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.annotator.validate()?;
        self.ranksvm.validate()?;
        self.classifier.validate()?;
        self.world_prior.model(self.world.n_attributes)?;
        if !(self.realplus.delta >= 0.0) {
            return Err(Error::Config("realplus.delta must be non-negative".into()));
        }
        Ok(())
    }

    fn local_config(&self, k: usize) -> LocalConfig {
        LocalConfig {
            k,
            metric: self.local.metric,
        }
    }

    fn needs_pseudo(&self) -> bool {
        self.grid
            .ranksvm
            .iter()
            .chain(&self.grid.ranknet)
            .any(|&c| c == Condition::RealPlus)
    }
}

fn has_duplicates<T: Ord>(xs: &[T]) -> bool {
    xs.iter().collect::<BTreeSet<_>>().len() != xs.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankerKind {
    Classifier,
    Ranknet,
    Ranksvm,
}

impl RankerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RankerKind::Classifier => "classifier",
            RankerKind::Ranknet => "ranknet",
            RankerKind::Ranksvm => "ranksvm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSet {
    Fine,
    Synthetic,
}

impl TestSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TestSet::Fine => "fine",
            TestSet::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: Condition,
    pub ranker: RankerKind,
    pub attribute: usize,
    pub seed: u64,
    pub test_set: TestSet,
    pub n_train_pairs: usize,
    pub accuracy: f64,
    pub discard_rate: Option<f64>,
    pub auto_agreement: Option<f64>,
    pub synth_neighbor_fraction: Option<f64>,
}

impl ReportRow {
    pub fn sort_key(&self) -> (Condition, RankerKind, usize, u64, TestSet) {
        (self.condition, self.ranker, self.attribute, self.seed, self.test_set)
    }
}

/// A cell that could not produce rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    /// `None` when a shared stage failed for every condition.
    pub condition: Option<Condition>,
    pub ranker: Option<RankerKind>,
    pub attribute: Option<usize>,
    pub seed: u64,
    pub cause: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<CellFailure>,
}

fn progress(msg: std::fmt::Arguments<'_>) {
    eprintln!("[experiment] {msg}");
}

/// One generator-split image as seen by the generator stage.
pub struct GeneratorExample<'a> {
    pub id: u64,
    /// Raw descriptor.
    pub descriptor: &'a [f64],
    pub params: &'a PhysicalParams,
    /// The world's attribute vector behind the image.
    pub world_y: &'a [f64],
}

pub struct GeneratorFit {
    /// One per attribute, normaliser attached.
    pub classifiers: Vec<BinaryClassifierModel>,
    pub prior: PriorModel,
    pub conditioned: ConditionedWorld,
}

/// Presence classifiers per attribute, strengths from their decision values
/// (or the world's truth), the Gaussian prior over strengths, and the
/// strength-to-world conditioning map. Classifier `a` is seeded with
/// `derive_indexed(root, "classifier", a)`.
pub fn fit_generator(
    cfg: &WorldConfig,
    examples: &[GeneratorExample<'_>],
    classifier: &ClassifierConfig,
    prior: &PriorSpec,
    root: u64,
) -> Result<GeneratorFit> {
    let n = cfg.n_attributes;
    if examples.iter().any(|e| e.world_y.len() != n) {
        return Err(Error::InvalidInput(format!(
            "generator examples need {n} world attributes"
        )));
    }
    let norm = Normalizer::fit(examples.iter().map(|e| e.descriptor))?;
    let mut table = FeatureTable::new(norm.dim());
    for e in examples {
        table.insert(e.id, &norm.apply(e.descriptor))?;
    }
    let mut classifiers = Vec::with_capacity(n);
    let mut strengths = vec![vec![0.0; n]; examples.len()];
    for a in 0..n {
        let attr = Attribute::from_index(a, cfg)?;
        let truth: Vec<f64> = examples.iter().map(|e| attr.driven_param(e.params)).collect();
        let (threshold, labels) = presence_labels(&truth)?;
        let mut model = train_classifier(
            &table,
            &labels,
            threshold,
            classifier,
            derive_indexed(root, "classifier", a as u64),
        )?;
        model.normalizer = Some(norm.clone());
        for (row, s) in strengths.iter_mut().enumerate() {
            s[a] = match prior.strengths {
                StrengthSource::Decision => model.decision(table.row(row)),
                StrengthSource::GroundTruth => examples[row].world_y[a],
            };
        }
        classifiers.push(model);
    }
    let world_y: Vec<Vec<f64>> = examples.iter().map(|e| e.world_y.to_vec()).collect();
    let fitted = fit_attribute_prior(&strengths, prior.ridge)?;
    let conditioned = ConditionedWorld::fit(cfg.clone(), &strengths, &world_y, prior.map_ridge)?;
    Ok(GeneratorFit {
        classifiers,
        prior: fitted,
        conditioned,
    })
}

/// Everything shared by the attributes of one seed.
struct SeedContext {
    root: u64,
    conditioned: ConditionedWorld,
    fitted_prior: PriorModel,
    classifiers: HashMap<usize, BinaryClassifierModel>,
    real: Vec<Identity>,
    validation: Vec<Identity>,
    test: Vec<Identity>,
    synth: Vec<Identity>,
    synth_test: Vec<Identity>,
    jittered: HashMap<u64, Image>,
    /// Raw descriptors of base and jittered images.
    descriptors: HashMap<u64, Vec<f64>>,
    normalizer: Normalizer,
    splits: SplitSpec,
}

impl SeedContext {
    fn write_models(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ModelFile::from_prior(&self.fitted_prior, &self.conditioned, self.root)?.save(&dir.join("prior.model"))?;
        let mut attrs: Vec<_> = self.classifiers.keys().copied().collect();
        attrs.sort_unstable();
        for a in attrs {
            ModelFile::from_classifier(&self.classifiers[&a], a)?
                .save(&dir.join(format!("classifier_attr{a}.model")))?;
        }
        Ok(())
    }
}

fn unclustered(
    prior: &PriorModel,
    generator: &dyn Generator,
    count: usize,
    base: u64,
    root: u64,
    label: &str,
) -> Result<Vec<Identity>> {
    let sampler = prior.sampler()?;
    (0..count)
        .map(|i| {
            sample_identity_with(
                &sampler,
                generator,
                base + i as u64,
                derive_indexed(root, label, i as u64),
            )
        })
        .collect()
}

fn ids_of(identities: &[Identity]) -> BTreeSet<u64> {
    identities.iter().map(|i| i.id).collect()
}

fn descriptor(img: &Image) -> Vec<f64> {
    extract_descriptor(img).0
}

impl SeedContext {
    fn build(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let root = derive_seed(spec.master_seed, &format!("seed={seed}"));
        let cfg = spec.world.clone();
        let n = cfg.n_attributes;
        let b = &spec.budget;
        let world = ProceduralWorld::new(cfg.clone())?;
        let true_prior = spec.world_prior.model(n)?;

        let generator = unclustered(
            &true_prior,
            &world,
            b.n_generator,
            GENERATOR_BASE,
            root,
            "generator-identity",
        )?;
        let gen_desc: Vec<Vec<f64>> = generator.iter().map(|g| descriptor(&g.base_image)).collect();
        let examples: Vec<GeneratorExample<'_>> = generator
            .iter()
            .zip(&gen_desc)
            .map(|(g, d)| GeneratorExample {
                id: item_id(g.id, Slot::Base),
                descriptor: d,
                params: &g.params,
                world_y: &g.y.0,
            })
            .collect();
        let GeneratorFit {
            classifiers,
            prior: fitted_prior,
            conditioned,
        } = fit_generator(&cfg, &examples, &spec.classifier, &spec.prior, root)?;
        let classifiers: HashMap<usize, BinaryClassifierModel> = classifiers.into_iter().enumerate().collect();

        let real = sample_real_identities(
            &true_prior,
            &world,
            b.n_real_identities,
            &spec.cluster,
            REAL_BASE,
            derive_seed(root, "real"),
        )?;
        let validation = if spec.local.k_grid.is_empty() {
            Vec::new()
        } else {
            unclustered(
                &true_prior,
                &world,
                b.n_validation_identities,
                VALIDATION_BASE,
                root,
                "validation-identity",
            )?
        };
        let test = unclustered(
            &true_prior,
            &world,
            b.n_test_identities,
            TEST_BASE,
            root,
            "test-identity",
        )?;
        let synth = unclustered(
            &fitted_prior,
            &conditioned,
            b.n_synth_identities,
            SYNTH_BASE,
            root,
            "synth-identity",
        )?;
        let synth_test = unclustered(
            &fitted_prior,
            &conditioned,
            b.n_synth_test_identities,
            SYNTH_TEST_BASE,
            root,
            "synth-test-identity",
        )?;

        let mut train_ids = ids_of(&real);
        train_ids.extend(ids_of(&validation));
        train_ids.extend(ids_of(&synth));
        let mut test_ids = ids_of(&test);
        test_ids.extend(ids_of(&synth_test));
        let splits = SplitSpec::new(ids_of(&generator), train_ids, test_ids, root)?;

        let jittered: HashMap<u64, Image> = real
            .iter()
            .map(|r| {
                (
                    item_id(r.id, Slot::Jittered),
                    lowlevel_jitter(&r.base_image, derive_indexed(root, "jitter", r.id)),
                )
            })
            .collect();
        let mut descriptors = HashMap::new();
        for ident in real
            .iter()
            .chain(&validation)
            .chain(&test)
            .chain(&synth)
            .chain(&synth_test)
        {
            descriptors.insert(item_id(ident.id, Slot::Base), descriptor(&ident.base_image));
        }
        for (&id, img) in &jittered {
            descriptors.insert(id, descriptor(img));
        }
        let normalizer = Normalizer::fit(real.iter().map(|r| descriptors[&item_id(r.id, Slot::Base)].as_slice()))?;

        Ok(Self {
            root,
            conditioned,
            fitted_prior,
            classifiers,
            real,
            validation,
            test,
            synth,
            synth_test,
            jittered,
            descriptors,
            normalizer,
            splits,
        })
    }

    fn check_disjoint(
        &self,
        pairs: &[OrderedPair],
        allowed: impl Fn(&SplitSpec, u64) -> bool,
        what: &str,
    ) -> Result<()> {
        for p in pairs {
            for item in [p.item_a, p.item_b] {
                if !allowed(&self.splits, item) {
                    return Err(Error::InvalidInput(format!(
                        "{what} pair references item {item} outside its split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything one attribute of one seed needs.
struct AttributeContext {
    attribute: usize,
    spectra: Vec<Identity>,
    synth_test_spectra: Vec<Identity>,
    real_pairs: Vec<OrderedPair>,
    real_stats: LabelStats,
    jitter: Vec<OrderedPair>,
    synth_verified: Vec<OrderedPair>,
    synth_auto: Vec<OrderedPair>,
    synth_oracle: Vec<OrderedPair>,
    synth_stats: LabelStats,
    pseudo: Vec<OrderedPair>,
    validation: Vec<OrderedPair>,
    fine_test: Vec<OrderedPair>,
    synth_test: Vec<OrderedPair>,
    /// Ranker-normalised descriptors of every item above.
    features: FeatureTable,
}

fn spectra_of(identities: &[Identity], a: usize, prior: &PriorModel, gen: &dyn Generator) -> Result<Vec<Identity>> {
    identities.iter().map(|i| generate_spectrum(i, a, prior, gen)).collect()
}

impl AttributeContext {
    fn build(spec: &ExperimentSpec, sc: &SeedContext, a: usize) -> Result<Self> {
        let cfg = &spec.world;
        let b = &spec.budget;
        let root = derive_indexed(sc.root, "attribute", a as u64);

        let spectra = spectra_of(&sc.synth, a, &sc.fitted_prior, &sc.conditioned)?;
        let candidates = synthetic_batch(spectrum_candidates(&spectra, a)?, b.n_auto);
        let batch = label_candidates(
            &candidates,
            &spec.annotator,
            cfg,
            derive_seed(root, "synth-verify"),
            Split::Train,
        )?;

        let (real_pairs, real_stats) = label_real_pairs(
            &sc.real,
            a,
            b.n_real,
            &spec.annotator,
            cfg,
            derive_seed(root, "real-pairs"),
        )?;
        let jitter = jitter_pairs(&real_pairs);

        let pseudo = if spec.needs_pseudo() {
            let model = &sc.classifiers[&a];
            let norm = model.normalizer.as_ref().expect("classifier carries its normalizer");
            let mut items = FeatureTable::new(DESCRIPTOR_LEN);
            for r in &sc.real {
                let id = item_id(r.id, Slot::Base);
                items.insert(id, &norm.apply(&sc.descriptors[&id]))?;
            }
            realplus_pseudo_pairs(
                model,
                &items,
                a,
                spec.realplus.delta,
                b.n_real,
                derive_seed(root, "pseudo"),
            )?
        } else {
            Vec::new()
        };

        let validation = if sc.validation.is_empty() {
            Vec::new()
        } else {
            let band = (b.fine_band[0], b.fine_band[1]);
            let mut v = make_fine_grained_testset(
                &sc.validation,
                a,
                band,
                b.n_validation_pairs,
                cfg,
                derive_seed(root, "validation"),
            )?;
            v.iter_mut().for_each(|p| p.split = Split::Validation);
            v
        };
        let band = (b.fine_band[0], b.fine_band[1]);
        let fine_test =
            make_fine_grained_testset(&sc.test, a, band, b.n_test_pairs, cfg, derive_seed(root, "fine-test"))?;
        let synth_test_spectra = spectra_of(&sc.synth_test, a, &sc.fitted_prior, &sc.conditioned)?;
        let (synth_test, _) = make_synthetic_testset(
            &synth_test_spectra,
            a,
            b.n_synth_test_pairs,
            &spec.annotator,
            cfg,
            derive_seed(root, "synth-test"),
        )?;

        sc.check_disjoint(&fine_test, SplitSpec::in_test, "fine test")?;
        sc.check_disjoint(&synth_test, SplitSpec::in_test, "synthetic test")?;
        sc.check_disjoint(&real_pairs, SplitSpec::in_train, "real")?;
        sc.check_disjoint(&batch.verified, SplitSpec::in_train, "synthetic")?;

        let mut features = FeatureTable::new(DESCRIPTOR_LEN);
        for (&id, d) in &sc.descriptors {
            features.insert(id, &sc.normalizer.apply(d))?;
        }
        for s in spectra.iter().chain(&synth_test_spectra) {
            for (slot, img) in [(Slot::Minus, s.minus_image()), (Slot::Plus, s.plus_image())] {
                let img = img.expect("spectrum rendered");
                features.insert(item_id(s.id, slot), &sc.normalizer.apply(&descriptor(img)))?;
            }
        }

        Ok(Self {
            attribute: a,
            spectra,
            synth_test_spectra,
            real_pairs,
            real_stats,
            jitter,
            synth_verified: batch.verified,
            synth_auto: batch.auto,
            synth_oracle: batch.oracle,
            synth_stats: batch.stats,
            pseudo,
            validation,
            fine_test,
            synth_test,
            features,
        })
    }

    fn sources(&self) -> PairSources<'_> {
        PairSources {
            real: &self.real_pairs,
            jitter: &self.jitter,
            synth_verified: &self.synth_verified,
            synth_auto: &self.synth_auto,
            pseudo: &self.pseudo,
        }
    }

    fn test_pairs(&self, set: TestSet) -> &[OrderedPair] {
        match set {
            TestSet::Fine => &self.fine_test,
            TestSet::Synthetic => &self.synth_test,
        }
    }

    /// Every image an item id may refer to within this attribute.
    fn images<'a>(&'a self, sc: &'a SeedContext) -> HashMap<u64, &'a Image> {
        let mut out = HashMap::new();
        for ident in sc.real.iter().chain(&sc.test) {
            out.insert(item_id(ident.id, Slot::Base), &ident.base_image);
        }
        for s in self.spectra.iter().chain(&self.synth_test_spectra) {
            out.insert(item_id(s.id, Slot::Base), &s.base_image);
            if let Some(sp) = &s.spectrum {
                out.insert(item_id(s.id, Slot::Minus), &sp.minus_image);
                out.insert(item_id(s.id, Slot::Plus), &sp.plus_image);
            }
        }
        for (&id, img) in &sc.jittered {
            out.insert(id, img);
        }
        out
    }

    fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: [(&str, &[OrderedPair]); 9] = [
            ("real.csv", &self.real_pairs),
            ("jitter.csv", &self.jitter),
            ("synth_verified.csv", &self.synth_verified),
            ("synth_auto.csv", &self.synth_auto),
            ("synth_oracle.csv", &self.synth_oracle),
            ("realplus_pseudo.csv", &self.pseudo),
            ("validation.csv", &self.validation),
            ("fine_test.csv", &self.fine_test),
            ("synth_test.csv", &self.synth_test),
        ];
        for (name, pairs) in files {
            write_pairs(&dir.join(name), pairs)?;
        }
        Ok(())
    }
}

/// Auxiliary labelling metrics reported for a condition's rows.
fn label_metrics(condition: Condition, ac: &AttributeContext) -> (Option<f64>, Option<f64>) {
    match condition {
        Condition::DSynth | Condition::DSynthAuto => (
            Some(ac.synth_stats.discard_rate()),
            Some(ac.synth_stats.auto_agreement()),
        ),
        Condition::Real | Condition::Jitter | Condition::RealPlus => (Some(ac.real_stats.discard_rate()), None),
        Condition::Classifier => (None, None),
    }
}

fn local_accuracy(ranker: &LocalRanker, features: &FeatureTable, tests: &[OrderedPair]) -> Result<(f64, f64)> {
    let queries: Vec<(u64, u64)> = tests.iter().map(|p| (p.item_a, p.item_b)).collect();
    let preds = ranker.predict_all(features, &queries)?;
    let labels: Vec<_> = preds.iter().map(|p| p.label).collect();
    let frac = preds.iter().map(|p| p.synthetic_fraction).sum::<f64>() / preds.len().max(1) as f64;
    Ok((accuracy_of(tests, &labels)?, frac))
}

fn ranksvm_cell(
    spec: &ExperimentSpec,
    sc: &SeedContext,
    ac: &AttributeContext,
    cond: Condition,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let budget = PoolBudget {
        n_real: spec.budget.n_real,
        n_auto: spec.budget.n_auto,
    };
    let assemble_seed = derive_indexed(sc.root, "assemble", ac.attribute as u64);
    let pool = assemble_condition(cond, &ac.sources(), budget, assemble_seed)?;
    let k = if spec.local.k_grid.is_empty() {
        spec.local.k
    } else {
        let mut best = (f64::NEG_INFINITY, spec.local.k);
        for &k in &spec.local.k_grid {
            let ranker = LocalRanker::new(&pool, &ac.features, spec.local_config(k), spec.ranksvm.clone())?;
            let (acc, _) = local_accuracy(&ranker, &ac.features, &ac.validation)?;
            if acc > best.0 {
                best = (acc, k);
            }
        }
        best.1
    };
    let ranker = LocalRanker::new(&pool, &ac.features, spec.local_config(k), spec.ranksvm.clone())?;
    let (discard_rate, auto_agreement) = label_metrics(cond, ac);
    [TestSet::Fine, TestSet::Synthetic]
        .into_iter()
        .map(|set| {
            let (accuracy, frac) = local_accuracy(&ranker, &ac.features, ac.test_pairs(set))?;
            Ok(ReportRow {
                condition: cond,
                ranker: RankerKind::Ranksvm,
                attribute: ac.attribute,
                seed,
                test_set: set,
                n_train_pairs: pool.len(),
                accuracy,
                discard_rate,
                auto_agreement,
                synth_neighbor_fraction: Some(frac),
            })
        })
        .collect()
}

fn score_accuracy(tests: &[OrderedPair], score: impl Fn(u64) -> Result<f64>) -> Result<f64> {
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut labels = Vec::with_capacity(tests.len());
    for p in tests {
        let mut get = |id: u64| -> Result<f64> {
            if let Some(&v) = cache.get(&id) {
                return Ok(v);
            }
            let v = score(id)?;
            cache.insert(id, v);
            Ok(v)
        };
        let (sa, sb) = (get(p.item_a)?, get(p.item_b)?);
        labels.push(decide(sa - sb));
    }
    accuracy_of(tests, &labels)
}

fn ranknet_cell(
    spec: &ExperimentSpec,
    sc: &SeedContext,
    ac: &AttributeContext,
    cond: Condition,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let budget = PoolBudget {
        n_real: spec.budget.n_real,
        n_auto: spec.budget.n_auto,
    };
    let assemble_seed = derive_indexed(sc.root, "assemble", ac.attribute as u64);
    let pool = assemble_condition(cond, &ac.sources(), budget, assemble_seed)?;
    let images = ac.images(sc);
    let train_seed = derive_seed(sc.root, &format!("ranknet attr={} cond={}", ac.attribute, cond));
    let (model, _) = train_ranknet(
        &pool,
        |id| images.get(&id).copied(),
        spec.ranknet.architecture.clone(),
        &spec.ranknet.train,
        train_seed,
    )?;
    let score = |id: u64| -> Result<f64> {
        let img = images
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("no image for test item {id}")))?;
        model.score(img)
    };
    let (discard_rate, auto_agreement) = label_metrics(cond, ac);
    [TestSet::Fine, TestSet::Synthetic]
        .into_iter()
        .map(|set| {
            Ok(ReportRow {
                condition: cond,
                ranker: RankerKind::Ranknet,
                attribute: ac.attribute,
                seed,
                test_set: set,
                n_train_pairs: pool.len(),
                accuracy: score_accuracy(ac.test_pairs(set), score)?,
                discard_rate,
                auto_agreement,
                synth_neighbor_fraction: None,
            })
        })
        .collect()
}

fn classifier_cell(sc: &SeedContext, ac: &AttributeContext, seed: u64) -> Result<Vec<ReportRow>> {
    let model = &sc.classifiers[&ac.attribute];
    let images = ac.images(sc);
    let score = |id: u64| -> Result<f64> {
        let img = images
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("no image for test item {id}")))?;
        crate::rankers::classifier::classifier_rank(model, img)
    };
    [TestSet::Fine, TestSet::Synthetic]
        .into_iter()
        .map(|set| {
            Ok(ReportRow {
                condition: Condition::Classifier,
                ranker: RankerKind::Classifier,
                attribute: ac.attribute,
                seed,
                test_set: set,
                n_train_pairs: 0,
                accuracy: score_accuracy(ac.test_pairs(set), score)?,
                discard_rate: None,
                auto_agreement: None,
                synth_neighbor_fraction: None,
            })
        })
        .collect()
}

/// Runs the whole grid. Stage errors are recorded per cell and the run
/// continues; only an invalid spec or an unwritable artifact directory
/// aborts. With `artifacts`, every pair list is written under
/// `pairs/seed<s>/attr<a>/`.
pub fn run_experiment(spec: &ExperimentSpec, artifacts: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut report = ExperimentReport::default();
    let shared_failure = |seed: u64, attribute: Option<usize>, e: &Error| CellFailure {
        condition: None,
        ranker: None,
        attribute,
        seed,
        cause: e.to_string(),
    };
    for &seed in &spec.seeds {
        progress(format_args!("seed {seed}: building world, classifiers and populations"));
        let sc = match SeedContext::build(spec, seed) {
            Ok(sc) => sc,
            Err(e) => {
                report.failures.push(shared_failure(seed, None, &e));
                continue;
            }
        };
        if let Some(dir) = artifacts {
            sc.write_models(&dir.join("models").join(format!("seed{seed}")))?;
        }
        for &a in &spec.attributes {
            progress(format_args!("seed {seed} attribute {a}: pairs and test sets"));
            let ac = match AttributeContext::build(spec, &sc, a) {
                Ok(ac) => ac,
                Err(e) => {
                    report.failures.push(shared_failure(seed, Some(a), &e));
                    continue;
                }
            };
            if let Some(dir) = artifacts {
                ac.write_artifacts(&dir.join("pairs").join(format!("seed{seed}")).join(format!("attr{a}")))?;
            }
            let mut record = |cond: Condition, ranker: RankerKind, result: Result<Vec<ReportRow>>| match result {
                Ok(rows) => report.rows.extend(rows),
                Err(e) => report.failures.push(CellFailure {
                    condition: Some(cond),
                    ranker: Some(ranker),
                    attribute: Some(a),
                    seed,
                    cause: e.to_string(),
                }),
            };
            for &cond in &spec.grid.ranksvm {
                progress(format_args!("seed {seed} attribute {a}: ranksvm {cond}"));
                record(cond, RankerKind::Ranksvm, ranksvm_cell(spec, &sc, &ac, cond, seed));
            }
            for &cond in &spec.grid.ranknet {
                progress(format_args!("seed {seed} attribute {a}: ranknet {cond}"));
                record(cond, RankerKind::Ranknet, ranknet_cell(spec, &sc, &ac, cond, seed));
            }
            if spec.grid.classifier {
                record(
                    Condition::Classifier,
                    RankerKind::Classifier,
                    classifier_cell(&sc, &ac, seed),
                );
            }
        }
    }
    report.rows.sort_by(|x, y| x.sort_key().cmp(&y.sort_key()));
    Ok(report)
}
