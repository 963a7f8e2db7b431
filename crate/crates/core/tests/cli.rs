use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semjitter::cli::manifest::Dataset;
use semjitter::harness::experiment::ReportRow;
use semjitter::harness::report::{read_rows_csv, render_tables, REPORT_CSV, TABLES_MD};
use semjitter::modelfile::{ModelFile, ModelKind};
use semjitter::pairgen::{read_pairs, Condition, OrderedPair};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semjitter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["world", "gen", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["world", "gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["world", "gen"]).status.code(), Some(1), "missing --out");

    let tmp = tempfile::tempdir().unwrap();
    let bad_spec = tmp.path().join("bad.toml");
    fs::write(&bad_spec, "format_version = 1\n[annotator]\nn_annotators = 4\n").unwrap();
    let out = tmp.path().join("out");
    assert_eq!(
        run(&["experiment", "run", s(&bad_spec), "--out", s(&out)])
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing.toml");
    assert_eq!(
        run(&["experiment", "run", s(&missing), "--out", s(&out)]).status.code(),
        Some(2)
    );

    let ds = tmp.path().join("ds");
    fs::create_dir_all(&ds).unwrap();
    fs::write(ds.join("manifest.toml"), "format_version = 1\nitems = []\n").unwrap();
    let res = run(&["prior", "fit", "--manifest", s(&ds), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("seed"));
}

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    let (world, prior, synth, verify, svm, classifier) =
        (p("world"), p("prior"), p("synth"), p("verify"), p("svm"), p("cls"));

    ok(&[
        "world",
        "gen",
        "--count",
        "80",
        "--generator",
        "40",
        "--test",
        "20",
        "--seed",
        "3",
        "--out",
        s(&world),
    ]);
    let ds = Dataset::load(&world).unwrap();
    assert_eq!(ds.manifest.items.len(), 80);
    assert_eq!(ds.manifest.splits.generator.len(), 40);
    assert_eq!(ds.manifest.splits.test.len(), 20);
    let before = snapshot(&world);

    ok(&[
        "prior",
        "fit",
        "--manifest",
        s(&world),
        "--seed",
        "3",
        "--out",
        s(&prior),
    ]);
    assert_eq!(
        ModelFile::load(&prior.join("prior.model")).unwrap().kind(),
        ModelKind::Prior
    );

    ok(&[
        "synth",
        "pairs",
        "--prior",
        s(&prior),
        "--attribute",
        "0",
        "--identities",
        "60",
        "--count",
        "80",
        "--seed",
        "3",
        "--out",
        s(&synth),
    ]);
    let auto = read_pairs(&synth.join("auto.csv")).unwrap();
    assert!(!auto.is_empty() && auto.len() <= 80);
    Dataset::load(&synth).unwrap();

    ok(&[
        "pairs",
        "verify",
        "--manifest",
        s(&synth),
        "--pairs",
        s(&synth.join("auto.csv")),
        "--out",
        s(&verify),
    ]);
    let verified = read_pairs(&verify.join("verified.csv")).unwrap();
    assert!(!verified.is_empty() && verified.len() <= auto.len());
    let stats = fs::read_to_string(verify.join("verify_stats.toml")).unwrap();
    assert!(stats.contains("format_version"));

    let verified_csv = verify.join("verified.csv");
    let config = p("hyper.toml");
    fs::write(&config, "format_version = 1\n[local]\nk = 20\n").unwrap();
    ok(&[
        "train",
        "ranksvm",
        "--manifest",
        s(&world),
        "--manifest",
        s(&synth),
        "--pairs",
        s(&verified_csv),
        "--config",
        s(&config),
        "--out",
        s(&svm),
    ]);
    let model_path = svm.join("ranksvm.model");
    assert_eq!(ModelFile::load(&model_path).unwrap().kind(), ModelKind::RanksvmLocal);
    let line = ok(&[
        "eval",
        "--model",
        s(&model_path),
        "--manifest",
        s(&synth),
        "--pairs",
        s(&verified_csv),
    ]);
    let acc: f64 = line
        .trim()
        .strip_prefix("accuracy=")
        .expect("accuracy line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&[
        "train",
        "classifier",
        "--manifest",
        s(&world),
        "--attribute",
        "0",
        "--out",
        s(&classifier),
    ]);
    let line = ok(&[
        "eval",
        "--model",
        s(&classifier.join("classifier.model")),
        "--manifest",
        s(&synth),
        "--pairs",
        s(&verified_csv),
    ]);
    assert!(line.starts_with("accuracy="));

    assert_eq!(before, snapshot(&world), "inputs were modified");
}

const SMALL_SPEC: &str = r#"
format_version = 1
master_seed = 5
seeds = [0]
attributes = [1]

[grid]
ranksvm = ["REAL", "DSYNTH"]
ranknet = []
classifier = true

[budget]
n_generator = 30
n_real_identities = 60
n_real = 60
n_auto = 100
n_synth_identities = 80
n_validation_identities = 30
n_validation_pairs = 30
n_test_identities = 60
n_test_pairs = 40
n_synth_test_identities = 30
n_synth_test_pairs = 30

[local]
k = 20
k_grid = []
"#;

fn key(p: &OrderedPair) -> (u64, u64) {
    (p.item_a, p.item_b)
}

#[test]
fn experiment_artifacts_reproduce_report() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let out = tmp.path().join("run");
    ok(&["experiment", "run", s(&spec), "--out", s(&out)]);

    let rows = read_rows_csv(&out.join("report").join(REPORT_CSV)).unwrap();
    let dsynth: Vec<&ReportRow> = rows.iter().filter(|r| r.condition == Condition::DSynth).collect();
    assert!(!dsynth.is_empty());

    let dir = out.join("pairs").join("seed0").join("attr1");
    let auto = read_pairs(&dir.join("synth_auto.csv")).unwrap();
    let verified = read_pairs(&dir.join("synth_verified.csv")).unwrap();
    let oracle: HashMap<(u64, u64), (u64, u64)> = read_pairs(&dir.join("synth_oracle.csv"))
        .unwrap()
        .iter()
        .map(|p| (key(p), p.ordered()))
        .collect();
    let candidates = 100.0;
    let discard = 1.0 - verified.len() as f64 / candidates;
    let agree = auto
        .iter()
        .filter(|p| oracle.get(&key(p)) == Some(&p.ordered()))
        .count() as f64
        / candidates;
    for row in dsynth {
        assert!((row.discard_rate.unwrap() - discard).abs() < 1e-12);
        assert!((row.auto_agreement.unwrap() - agree).abs() < 1e-12);
    }

    let tables = fs::read_to_string(out.join("report").join(TABLES_MD)).unwrap();
    assert_eq!(tables, render_tables(&rows));
    let again = tmp.path().join("again");
    ok(&["report", "--input", s(&out.join("report")), "--out", s(&again)]);
    assert_eq!(fs::read_to_string(again.join(TABLES_MD)).unwrap(), tables);
    assert_eq!(
        fs::read(again.join(REPORT_CSV)).unwrap(),
        fs::read(out.join("report").join(REPORT_CSV)).unwrap()
    );
}
