//! The `semjitter` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure. Diagnostics go to stderr; results go to files
//! under `--out` (plus the one `accuracy=` line printed by `eval`).
//!
//! `--config` names a TOML file with the experiment-spec schema; its
//! `world`, `world_prior`, `annotator`, `ranksvm`, `local`, `ranknet`,
//! `classifier` and `prior` sections supply hyperparameters to the
//! individual subcommands.

pub mod manifest;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attrworld::{Attribute, Image, ProceduralWorld};
use crate::error::{Error, Result};
use crate::features::{extract_descriptor, Normalizer};
use crate::harness::eval::accuracy_of;
use crate::harness::experiment::{fit_generator, run_experiment, ExperimentReport, ExperimentSpec, GeneratorExample};
use crate::harness::report::{read_rows_csv, write_report, REPORT_CSV};
use crate::harness::splits::SYNTH_BASE;
use crate::harness::testsets::{spectrum_candidates, synthetic_batch};
use crate::modelfile::{ModelFile, ModelKind};
use crate::pairgen::{
    auto_label, item_id, label_candidates, read_pairs, write_pairs, Candidate, OrderedPair, Slot, Split,
};
use crate::prior::{generate_spectrum, sample_identity_with};
use crate::rankers::classifier::{classifier_rank, presence_labels, train_classifier};
use crate::rankers::ranknet::train_ranknet;
use crate::rankers::ranksvm::{decide, score_linear, train_ranksvm, LocalConfig, LocalRankModel};
use crate::rankers::{pair_items, FeatureTable};
use crate::seed::derive_indexed;
use manifest::{
    common_world, Dataset, DatasetManifest, ItemIndex, ItemRecord, SplitAssignment, MANIFEST_FORMAT_VERSION,
};

pub const STATS_FORMAT_VERSION: u32 = 1;
pub const PRIOR_MODEL: &str = "prior.model";

#[derive(Debug, Parser)]
#[command(
    name = "semjitter",
    version,
    about = "Semantic-jitter laboratory for relative-attribute ranking"
)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Hyperparameter file (experiment-spec TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Procedural world datasets.
    #[command(subcommand)]
    World(WorldCmd),
    /// Attribute prior and conditioning map.
    #[command(subcommand)]
    Prior(PriorCmd),
    /// Synthetic identities and their auto-labelled pairs.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Pair files.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Train a ranker or the attribute classifier.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Pairwise accuracy of a model on labelled pairs.
    Eval(EvalArgs),
    /// The condition-grid experiment.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Re-render report tables and charts from a report CSV.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum WorldCmd {
    /// Render identities drawn from the world prior into a dataset directory.
    Gen {
        /// Identities to render.
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Identities assigned to the generator split (taken first).
        #[arg(long, default_value_t = 60)]
        generator: usize,
        /// Identities assigned to the test split (taken last).
        #[arg(long, default_value_t = 100)]
        test: usize,
    },
}

#[derive(Debug, Subcommand)]
enum PriorCmd {
    /// Fit classifiers, the strength prior and the conditioning map on a
    /// dataset's generator split.
    Fit {
        /// Dataset directory (or manifest file) with a generator split.
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SynthCmd {
    /// Sample identities from a fitted prior, render their spectra and
    /// auto-label a half intra, half inter candidate batch.
    Pairs {
        /// `prior.model`, or the directory `prior fit` wrote it to.
        #[arg(long)]
        prior: PathBuf,
        /// Attribute index to perturb.
        #[arg(long)]
        attribute: usize,
        /// Synthetic identities to sample.
        #[arg(long, default_value_t = 1000)]
        identities: usize,
        /// Candidate pairs to auto-label.
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
}

#[derive(Debug, Subcommand)]
enum PairsCmd {
    /// Relabel pairs with simulated annotators and report discard rate and
    /// auto-label agreement.
    Verify {
        /// Dataset directories (or manifest files) holding the pair items.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Pair CSV to relabel.
        #[arg(long)]
        pairs: PathBuf,
    },
}

#[derive(Debug, Args)]
struct PairData {
    /// Dataset directories (or manifest files) holding the pair items.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Pair CSV.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    /// Local RankSVM (stores the pool), or one global model with `--linear`.
    Ranksvm {
        #[command(flatten)]
        data: PairData,
        /// Train one global linear model instead.
        #[arg(long)]
        linear: bool,
    },
    /// Convolutional ranker with a spatial transformer.
    Ranknet {
        #[command(flatten)]
        data: PairData,
    },
    /// Attribute-presence classifier on the datasets' train split.
    Classifier {
        /// Dataset directories (or manifest files) with a train split.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Attribute index.
        #[arg(long)]
        attribute: usize,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model file written by `train` or `prior fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: PairData,
}

#[derive(Debug, Subcommand)]
enum ExperimentCmd {
    /// Run a spec; `--seed` overrides its master seed.
    Run {
        /// Experiment spec TOML.
        spec: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A report CSV or the directory containing it.
    #[arg(long)]
    input: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::World(WorldCmd::Gen { count, generator, test }) => {
            world_gen(&config(cli)?, seed, out_dir(cli)?, *count, *generator, *test)
        }
        Command::Prior(PriorCmd::Fit { manifest }) => prior_fit(&config(cli)?, seed, out_dir(cli)?, manifest),
        Command::Synth(SynthCmd::Pairs {
            prior,
            attribute,
            identities,
            count,
        }) => synth_pairs(seed, out_dir(cli)?, prior, *attribute, *identities, *count),
        Command::Pairs(PairsCmd::Verify { manifest, pairs }) => {
            pairs_verify(&config(cli)?, seed, out_dir(cli)?, manifest, pairs)
        }
        Command::Train(cmd) => train(&config(cli)?, seed, out_dir(cli)?, cmd),
        Command::Eval(args) => eval(args, cli.out.as_deref()),
        Command::Experiment(ExperimentCmd::Run { spec }) => experiment_run(cli, spec),
        Command::Report(args) => report(out_dir(cli)?, &args.input),
    }
}

fn config(cli: &Cli) -> Result<ExperimentSpec> {
    match &cli.config {
        None => Ok(ExperimentSpec::default()),
        Some(p) => ExperimentSpec::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out <DIR>".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        toml::to_string(value).map_err(|e| Error::InvalidInput(format!("cannot encode {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_path(id: u64) -> String {
    format!("images/{id}.png")
}

fn world_gen(spec: &ExperimentSpec, seed: u64, out: &Path, count: usize, generator: usize, test: usize) -> Result<()> {
    if generator + test > count {
        return Err(Error::Config(format!(
            "generator ({generator}) and test ({test}) splits exceed --count {count}"
        )));
    }
    let cfg = spec.world.clone();
    let world = ProceduralWorld::new(cfg.clone())?;
    let sampler = spec.world_prior.model(cfg.n_attributes)?.sampler()?;
    create_dir(&out.join("images"))?;
    let mut items = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let ident = sample_identity_with(&sampler, &world, i, derive_indexed(seed, "identity", i))?;
        let id = item_id(i, Slot::Base);
        let image = image_path(id);
        ident.base_image.save_png(&out.join(&image))?;
        items.push(ItemRecord {
            id,
            y: ident.y.0,
            z: ident.z.0,
            image,
            params: ident.params,
        });
    }
    let ids: Vec<u64> = items.iter().map(|i| i.id).collect();
    let splits = SplitAssignment {
        generator: ids[..generator].to_vec(),
        train: ids[generator..count - test].to_vec(),
        test: ids[count - test..].to_vec(),
    };
    Dataset {
        dir: out.to_path_buf(),
        manifest: DatasetManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            seed,
            world: cfg,
            splits,
            items,
        },
    }
    .save()
}

fn prior_fit(spec: &ExperimentSpec, seed: u64, out: &Path, manifest: &Path) -> Result<()> {
    let ds = Dataset::load(manifest)?;
    let cfg = &ds.manifest.world;
    let records: Vec<&ItemRecord> = ds
        .manifest
        .splits
        .generator
        .iter()
        .map(|&id| ds.item(id))
        .collect::<Result<_>>()?;
    let descriptors: Vec<Vec<f64>> = records
        .iter()
        .map(|r| Ok(extract_descriptor(&ds.image(r)?).0))
        .collect::<Result<_>>()?;
    let examples: Vec<GeneratorExample<'_>> = records
        .iter()
        .zip(&descriptors)
        .map(|(r, d)| GeneratorExample {
            id: r.id,
            descriptor: d,
            params: &r.params,
            world_y: &r.y,
        })
        .collect();
    let fit = fit_generator(cfg, &examples, &spec.classifier, &spec.prior, seed)?;
    create_dir(out)?;
    ModelFile::from_prior(&fit.prior, &fit.conditioned, seed)?.save(&out.join(PRIOR_MODEL))?;
    for (a, model) in fit.classifiers.iter().enumerate() {
        ModelFile::from_classifier(model, a)?.save(&out.join(format!("classifier_attr{a}.model")))?;
    }
    Ok(())
}

fn synth_pairs(seed: u64, out: &Path, prior: &Path, attribute: usize, identities: usize, count: usize) -> Result<()> {
    let path = if prior.is_dir() {
        prior.join(PRIOR_MODEL)
    } else {
        prior.to_path_buf()
    };
    let (prior, world) = ModelFile::load(&path)?.to_prior()?;
    Attribute::from_index(attribute, &world.cfg)?;
    if identities < 2 {
        return Err(Error::Config("synth pairs needs at least two identities".into()));
    }
    let sampler = prior.sampler()?;
    let spectra = (0..identities as u64)
        .map(|i| {
            let base = sample_identity_with(
                &sampler,
                &world,
                SYNTH_BASE + i,
                derive_indexed(seed, "synth-identity", i),
            )?;
            generate_spectrum(&base, attribute, &prior, &world)
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates = synthetic_batch(spectrum_candidates(&spectra, attribute)?, count);
    let auto: Vec<OrderedPair> = candidates.iter().filter_map(|c| auto_label(c, Split::Train)).collect();

    create_dir(&out.join("images"))?;
    let mut items = Vec::with_capacity(3 * spectra.len());
    for ident in &spectra {
        let s = ident.spectrum.as_ref().expect("spectrum generated");
        for (slot, y, params, image) in [
            (Slot::Minus, &s.y_minus, &s.minus_params, &s.minus_image),
            (Slot::Base, &ident.y, &ident.params, &ident.base_image),
            (Slot::Plus, &s.y_plus, &s.plus_params, &s.plus_image),
        ] {
            let id = item_id(ident.id, slot);
            let path = image_path(id);
            image.save_png(&out.join(&path))?;
            items.push(ItemRecord {
                id,
                y: y.0.clone(),
                z: ident.z.0.clone(),
                image: path,
                params: params.clone(),
            });
        }
    }
    let train = items.iter().map(|i| i.id).collect();
    Dataset {
        dir: out.to_path_buf(),
        manifest: DatasetManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            seed,
            world: world.cfg.clone(),
            splits: SplitAssignment {
                train,
                ..SplitAssignment::default()
            },
            items,
        },
    }
    .save()?;
    write_pairs(&out.join("auto.csv"), &auto)
}

#[derive(Serialize)]
struct VerifyStats {
    format_version: u32,
    candidates: usize,
    discarded: usize,
    auto_agreements: usize,
    discard_rate: f64,
    auto_agreement: f64,
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| Dataset::load(p)).collect()
}

fn pairs_verify(spec: &ExperimentSpec, seed: u64, out: &Path, manifests: &[PathBuf], pairs: &Path) -> Result<()> {
    let datasets = load_datasets(manifests)?;
    let index = ItemIndex::new(&datasets)?;
    let cfg = common_world(&datasets)?;
    let candidates = read_pairs(pairs)?
        .iter()
        .map(|p| {
            Ok(Candidate {
                a: index.view(p.item_a)?,
                b: index.view(p.item_b)?,
                attribute: p.attribute,
                kind: p.kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = label_candidates(&candidates, &spec.annotator, &cfg, seed, Split::Train)?;
    create_dir(out)?;
    write_pairs(&out.join("verified.csv"), &batch.verified)?;
    write_pairs(&out.join("oracle.csv"), &batch.oracle)?;
    let s = &batch.stats;
    write_toml(
        &out.join("verify_stats.toml"),
        &VerifyStats {
            format_version: STATS_FORMAT_VERSION,
            candidates: s.candidates,
            discarded: s.discarded,
            auto_agreements: s.auto_agreements,
            discard_rate: s.discard_rate(),
            auto_agreement: s.auto_agreement(),
        },
    )
}

fn single_attribute(pairs: &[OrderedPair], path: &Path) -> Result<usize> {
    let first = pairs.first().ok_or_else(|| Error::format(path, "no pairs"))?.attribute;
    if pairs.iter().any(|p| p.attribute != first) {
        return Err(Error::format(path, "pairs mix several attributes"));
    }
    Ok(first)
}

/// Raw descriptors of the given items.
fn raw_descriptors(index: &ItemIndex<'_>, ids: &[u64]) -> Result<Vec<Vec<f64>>> {
    ids.iter()
        .map(|&id| Ok(extract_descriptor(&index.image(id)?).0))
        .collect()
}

fn normalized_table(ids: &[u64], raw: &[Vec<f64>], norm: &Normalizer) -> Result<FeatureTable> {
    let mut t = FeatureTable::new(norm.dim());
    for (id, d) in ids.iter().zip(raw) {
        t.insert(*id, &norm.apply(d))?;
    }
    Ok(t)
}

fn train(spec: &ExperimentSpec, seed: u64, out: &Path, cmd: &TrainCmd) -> Result<()> {
    create_dir(out)?;
    match cmd {
        TrainCmd::Ranksvm { data, linear } => {
            let datasets = load_datasets(&data.manifest)?;
            let index = ItemIndex::new(&datasets)?;
            let pairs = read_pairs(&data.pairs)?;
            let attribute = single_attribute(&pairs, &data.pairs)?;
            let ids = pair_items(&pairs);
            let raw = raw_descriptors(&index, &ids)?;
            let norm = Normalizer::fit(raw.iter().map(Vec::as_slice))?;
            let table = normalized_table(&ids, &raw, &norm)?;
            let file = if *linear {
                let mut model = train_ranksvm(&pairs, &table, &spec.ranksvm, seed)?;
                model.normalizer = Some(norm);
                ModelFile::from_linear(&model, attribute)?
            } else {
                let model = LocalRankModel {
                    pool: pairs,
                    items: table,
                    normalizer: Some(norm),
                    local: LocalConfig {
                        k: spec.local.k,
                        metric: spec.local.metric,
                    },
                    svm: spec.ranksvm.clone(),
                };
                model.ranker()?;
                ModelFile::from_local(&model, attribute, seed)?
            };
            file.save(&out.join("ranksvm.model"))
        }
        TrainCmd::Ranknet { data } => {
            let datasets = load_datasets(&data.manifest)?;
            let index = ItemIndex::new(&datasets)?;
            let pairs = read_pairs(&data.pairs)?;
            let attribute = single_attribute(&pairs, &data.pairs)?;
            let images: HashMap<u64, Image> = pair_items(&pairs)
                .into_iter()
                .map(|id| Ok((id, index.image(id)?)))
                .collect::<Result<_>>()?;
            let arch = spec.ranknet.architecture.clone();
            let (model, report) = train_ranknet(&pairs, |id| images.get(&id), arch, &spec.ranknet.train, seed)?;
            if let Some(loss) = report.epoch_losses.get(report.kept_epoch) {
                eprintln!("ranknet: kept epoch {} with mean loss {loss:.6}", report.kept_epoch);
            }
            ModelFile::from_ranknet(&model, &spec.ranknet.train, attribute, seed)?.save(&out.join("ranknet.model"))
        }
        TrainCmd::Classifier { manifest, attribute } => {
            let datasets = load_datasets(manifest)?;
            let index = ItemIndex::new(&datasets)?;
            let cfg = common_world(&datasets)?;
            let attr = Attribute::from_index(*attribute, &cfg)?;
            let ids: Vec<u64> = datasets
                .iter()
                .flat_map(|d| d.manifest.splits.train.iter().copied())
                .collect();
            let raw = raw_descriptors(&index, &ids)?;
            let norm = Normalizer::fit(raw.iter().map(Vec::as_slice))?;
            let table = normalized_table(&ids, &raw, &norm)?;
            let truth: Vec<f64> = ids
                .iter()
                .map(|&id| Ok(attr.driven_param(&index.get(id)?.1.params)))
                .collect::<Result<_>>()?;
            let (threshold, labels) = presence_labels(&truth)?;
            let mut model = train_classifier(&table, &labels, threshold, &spec.classifier, seed)?;
            model.normalizer = Some(norm);
            ModelFile::from_classifier(&model, *attribute)?.save(&out.join("classifier.model"))
        }
    }
}

#[derive(Serialize)]
struct EvalResult {
    format_version: u32,
    accuracy: f64,
    n_pairs: usize,
}

/// Accuracy of a persisted model on the pairs of `data`.
pub fn evaluate_model(model: &ModelFile, datasets: &[Dataset], tests: &[OrderedPair]) -> Result<f64> {
    let index = ItemIndex::new(datasets)?;
    if let (Some(a), Some(p)) = (
        model.manifest.attribute,
        tests.iter().find(|p| Some(p.attribute) != model.manifest.attribute),
    ) {
        return Err(Error::InvalidInput(format!(
            "model ranks attribute {a} but a test pair is for attribute {}",
            p.attribute
        )));
    }
    let ids = pair_items(tests);
    let score_with = |f: &dyn Fn(&Image) -> Result<f64>| -> Result<Vec<_>> {
        let scores: HashMap<u64, f64> = ids
            .iter()
            .map(|&id| Ok((id, f(&index.image(id)?)?)))
            .collect::<Result<_>>()?;
        Ok(tests
            .iter()
            .map(|p| decide(scores[&p.item_a] - scores[&p.item_b]))
            .collect())
    };
    let labels = match model.kind() {
        ModelKind::RanksvmLinear => {
            let m = model.to_linear()?;
            score_with(&|img| score_linear(&m, img))?
        }
        ModelKind::Ranknet => {
            let m = model.to_ranknet()?;
            score_with(&|img| m.score(img))?
        }
        ModelKind::Classifier => {
            let m = model.to_classifier()?;
            score_with(&|img| classifier_rank(&m, img))?
        }
        ModelKind::RanksvmLocal => {
            let m = model.to_local()?;
            let mut table = FeatureTable::new(m.items.dim());
            for &id in &ids {
                table.insert(id, &m.prepare(&index.image(id)?))?;
            }
            let queries: Vec<(u64, u64)> = tests.iter().map(|p| (p.item_a, p.item_b)).collect();
            m.ranker()?
                .predict_all(&table, &queries)?
                .into_iter()
                .map(|p| p.label)
                .collect()
        }
        ModelKind::Prior => return Err(Error::Config("a prior model cannot rank pairs".into())),
    };
    accuracy_of(tests, &labels)
}

fn eval(args: &EvalArgs, out: Option<&Path>) -> Result<()> {
    let model = ModelFile::load(&args.model)?;
    let datasets = load_datasets(&args.data.manifest)?;
    let tests = read_pairs(&args.data.pairs)?;
    let accuracy = evaluate_model(&model, &datasets, &tests)?;
    println!("accuracy={accuracy}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_toml(
            &dir.join("eval.toml"),
            &EvalResult {
                format_version: STATS_FORMAT_VERSION,
                accuracy,
                n_pairs: tests.len(),
            },
        )?;
    }
    Ok(())
}

fn experiment_run(cli: &Cli, spec_path: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = ExperimentSpec::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        spec.master_seed = seed;
    }
    let out = out_dir(cli)?;
    create_dir(out)?;
    let report = run_experiment(&spec, Some(out))?;
    fs::write(out.join("spec.toml"), spec.to_toml()?).map_err(|e| Error::io(out.join("spec.toml"), e))?;
    write_report(&report, &out.join("report"))?;
    for f in &report.failures {
        eprintln!(
            "cell failed (seed {}, attribute {:?}, {:?} {:?}): {}",
            f.seed, f.attribute, f.condition, f.ranker, f.cause
        );
    }
    if report.rows.is_empty() {
        return Err(Error::InsufficientData(
            "every cell failed; see report/failures.csv".into(),
        ));
    }
    Ok(())
}

fn report(out: &Path, input: &Path) -> Result<()> {
    let csv = if input.is_dir() {
        input.join(REPORT_CSV)
    } else {
        input.to_path_buf()
    };
    let rows = read_rows_csv(&csv)?;
    write_report(
        &ExperimentReport {
            rows,
            failures: Vec::new(),
        },
        out,
    )?;
    Ok(())
}
