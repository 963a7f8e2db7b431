//! Report files: the row CSV, per-(ranker, test set) markdown tables, one
//! SVG chart per attribute and the list of failed cells.
//!
//! Everything is rendered from sorted rows with fixed float formatting, so
//! identical rows give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{CellFailure, ExperimentReport, RankerKind, ReportRow, TestSet};
use crate::error::{Error, Result};
use crate::pairgen::Condition;

pub const REPORT_CSV_HEADER: &str =
    "condition,ranker,attribute,seed,test_set,n_train_pairs,accuracy,discard_rate,auto_agreement,synth_neighbor_fraction";
pub const REPORT_CSV: &str = "report.csv";
pub const TABLES_MD: &str = "tables.md";
pub const FAILURES_CSV: &str = "failures.csv";

pub fn chart_file_name(attribute: usize) -> String {
    format!("accuracy_attr{attribute}.svg")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_rows_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if rows.is_empty() {
        w.write_record(REPORT_CSV_HEADER.split(','))
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_CSV_HEADER {
        return Err(Error::format(path, format!("expected header `{REPORT_CSV_HEADER}`")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.deserialize::<ReportRow>().enumerate() {
        let row = rec.map_err(|e| Error::format(path, format!("row {}: {e}", line + 2)))?;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::format(
                path,
                format!("row {}: accuracy {} outside [0, 1]", line + 2, row.accuracy),
            ));
        }
        out.push(row);
    }
    Ok(out)
}

fn write_failures_csv(path: &Path, failures: &[CellFailure]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "attribute", "condition", "ranker", "cause"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for f in failures {
        let attribute = f.attribute.map(|a| a.to_string()).unwrap_or_default();
        let condition = f.condition.map(|c| c.as_str()).unwrap_or_default();
        let ranker = f.ranker.map(|r| r.as_str()).unwrap_or_default();
        w.write_record([f.seed.to_string().as_str(), &attribute, condition, ranker, &f.cause])
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and sample standard deviation of one (ranker, test set, condition,
/// attribute) group over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

type GroupKey = (RankerKind, TestSet, Condition, usize);

/// Seed-averaged accuracy per group, in key order.
pub fn summarize(rows: &[ReportRow]) -> BTreeMap<GroupKey, CellSummary> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.ranker, r.test_set, r.condition, r.attribute))
            .or_default()
            .push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (k, CellSummary { mean, std, n })
        })
        .collect()
}

/// Conditions holding the highest mean of each attribute column within one
/// (ranker, test set) table. Ties all count as best.
pub fn best_conditions(
    summary: &BTreeMap<GroupKey, CellSummary>,
    ranker: RankerKind,
    test_set: TestSet,
) -> BTreeMap<usize, BTreeSet<Condition>> {
    let mut best: BTreeMap<usize, (f64, BTreeSet<Condition>)> = BTreeMap::new();
    for (&(r, t, c, a), s) in summary {
        if r != ranker || t != test_set {
            continue;
        }
        let entry = best.entry(a).or_insert((f64::NEG_INFINITY, BTreeSet::new()));
        if s.mean > entry.0 {
            *entry = (s.mean, BTreeSet::from([c]));
        } else if s.mean == entry.0 {
            entry.1.insert(c);
        }
    }
    best.into_iter().map(|(a, (_, set))| (a, set)).collect()
}

pub fn render_tables(rows: &[ReportRow]) -> String {
    let summary = summarize(rows);
    let tables: BTreeSet<(RankerKind, TestSet)> = summary.keys().map(|&(r, t, _, _)| (r, t)).collect();
    let mut out = String::from("# Pairwise accuracy\n\nMean ± std over seeds; best condition per attribute in bold.\n");
    for (ranker, test_set) in tables {
        let attrs: BTreeSet<usize> = summary
            .keys()
            .filter(|k| k.0 == ranker && k.1 == test_set)
            .map(|k| k.3)
            .collect();
        let conds: BTreeSet<Condition> = summary
            .keys()
            .filter(|k| k.0 == ranker && k.1 == test_set)
            .map(|k| k.2)
            .collect();
        let best = best_conditions(&summary, ranker, test_set);
        let _ = write!(out, "\n## {} / {}\n\n| condition |", ranker.as_str(), test_set.as_str());
        for a in &attrs {
            let _ = write!(out, " attr {a} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(attrs.len()));
        out.push('\n');
        for c in &conds {
            let _ = write!(out, "| {} |", c.as_str());
            for a in &attrs {
                match summary.get(&(ranker, test_set, *c, *a)) {
                    Some(s) => {
                        let cell = format!("{:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
                        if best.get(a).is_some_and(|b| b.contains(c)) {
                            let _ = write!(out, " **{cell}** |");
                        } else {
                            let _ = write!(out, " {cell} |");
                        }
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of mean accuracy against condition, one series per
/// (ranker, test set).
pub fn render_chart(rows: &[ReportRow], attribute: usize) -> String {
    let summary = summarize(rows);
    let conds: Vec<Condition> = summary
        .keys()
        .filter(|k| k.3 == attribute)
        .map(|k| k.2)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let series: BTreeSet<(RankerKind, TestSet)> = summary
        .keys()
        .filter(|k| k.3 == attribute)
        .map(|k| (k.0, k.1))
        .collect();

    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |i: usize| left + pw * (i as f64 + 0.5) / conds.len().max(1) as f64;
    let y_of = |acc: f64| top + ph * (1.0 - acc);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">Attribute {attribute}: accuracy by condition</text>"#,
        left + pw / 2.0
    );
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{acc:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="black"/><line x1="{left:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"##,
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    for (i, c) in conds.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x_of(i),
            top + ph + 20.0,
            c.as_str()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, &(ranker, test_set)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<(f64, f64)> = conds
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                summary
                    .get(&(ranker, test_set, *c, attribute))
                    .map(|m| (x_of(i), y_of(m.mean)))
            })
            .collect();
        let dash = if test_set == TestSet::Synthetic {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        if points.len() > 1 {
            let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &points {
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}"/>"#);
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{} / {}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            ranker.as_str(),
            test_set.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every report file into `dir` and returns their paths.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() && report.failures.is_empty() {
        return Err(Error::InvalidInput("nothing to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = report.rows.clone();
    rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut written = Vec::new();

    let csv_path = dir.join(REPORT_CSV);
    write_rows_csv(&csv_path, &rows)?;
    written.push(csv_path);

    let md_path = dir.join(TABLES_MD);
    write_text(&md_path, &render_tables(&rows))?;
    written.push(md_path);

    let attrs: BTreeSet<usize> = rows.iter().map(|r| r.attribute).collect();
    for a in attrs {
        let p = dir.join(chart_file_name(a));
        write_text(&p, &render_chart(&rows, a))?;
        written.push(p);
    }

    let fail_path = dir.join(FAILURES_CSV);
    write_failures_csv(&fail_path, &report.failures)?;
    written.push(fail_path);
    Ok(written)
}
