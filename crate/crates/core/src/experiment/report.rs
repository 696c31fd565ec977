//! Comparison tables: seed-averaged method rows, deltas to a baseline, and
//! published reference rows, as CSV and as an aligned text table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::NormKind;
use super::train::RunResult;
use crate::data::CorruptionSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Measured,
    Delta,
    /// Published numbers, shown for context only.
    Reference,
}

/// One table row. Accuracies are in percentage points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: RowKind,
    pub method: String,
    pub seeds: Option<usize>,
    pub clean: Option<f64>,
    pub level1: f64,
    pub level2: f64,
    pub level3: f64,
    pub level4: f64,
    pub level5: f64,
    pub avg: f64,
}

impl ReportRow {
    pub fn levels(&self) -> [f64; 5] {
        [self.level1, self.level2, self.level3, self.level4, self.level5]
    }

    fn new(kind: RowKind, method: impl Into<String>, seeds: Option<usize>, clean: Option<f64>, levels: [f64; 5], avg: f64) -> Self {
        let [level1, level2, level3, level4, level5] = levels;
        ReportRow {
            kind,
            method: method.into(),
            seeds,
            clean,
            level1,
            level2,
            level3,
            level4,
            level5,
            avg,
        }
    }
}

/// Published corruption-benchmark rows (levels 1-5 and average).
pub const REFERENCE_ROWS: [(&str, [f64; 5], f64); 3] = [
    ("BatchNorm (published)", [87.8, 81.5, 73.2, 75.5, 56.1], 74.8),
    ("ASRNorm (published)", [89.4, 86.1, 82.9, 78.6, 72.9], 82.0),
    ("AFN (published)", [89.3, 86.6, 83.7, 79.9, 77.0], 83.3),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Groups runs by norm (first-appearance order) and averages over seeds.
/// Every non-baseline method gets a delta row against `baseline`, which
/// defaults to batch norm when present and otherwise the first method.
pub fn build_report(results: &[RunResult], baseline: Option<NormKind>) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Input("report needs at least one run".into()));
    }
    let mut methods: Vec<NormKind> = Vec::new();
    for r in results {
        if r.shift.is_none() {
            return Err(Error::Input(format!(
                "run {}/seed {} has no shift matrix (corruption_eval was off)",
                r.norm, r.seed
            )));
        }
        if !methods.contains(&r.norm) {
            methods.push(r.norm);
        }
    }
    let baseline = baseline
        .or_else(|| methods.contains(&NormKind::Batch).then_some(NormKind::Batch))
        .unwrap_or(methods[0]);
    if !methods.contains(&baseline) {
        return Err(Error::Input(format!("baseline `{baseline}` has no runs")));
    }

    let measured: Vec<ReportRow> = methods
        .iter()
        .map(|&m| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.norm == m).collect();
            let shift = |r: &&RunResult| r.shift.clone().expect("checked above");
            let mut levels = [0.0; 5];
            for (l, slot) in levels.iter_mut().enumerate() {
                *slot = 100.0 * mean(runs.iter().map(|r| shift(r).level_avg[l]));
            }
            ReportRow::new(
                RowKind::Measured,
                m.name(),
                Some(runs.len()),
                Some(100.0 * mean(runs.iter().map(|r| r.clean_accuracy))),
                levels,
                100.0 * mean(runs.iter().map(|r| shift(r).grand_avg)),
            )
        })
        .collect();

    let base = measured.iter().find(|r| r.method == baseline.name()).expect("baseline present").clone();
    let deltas: Vec<ReportRow> = measured
        .iter()
        .filter(|r| r.method != base.method)
        .map(|r| {
            let lv = r.levels();
            let bl = base.levels();
            ReportRow::new(
                RowKind::Delta,
                format!("{}-{}", r.method, base.method),
                r.seeds,
                r.clean.zip(base.clean).map(|(a, b)| a - b),
                std::array::from_fn(|i| lv[i] - bl[i]),
                r.avg - base.avg,
            )
        })
        .collect();

    let references = REFERENCE_ROWS
        .iter()
        .map(|(name, levels, avg)| ReportRow::new(RowKind::Reference, *name, None, None, *levels, *avg));

    Ok(Report {
        rows: measured.into_iter().chain(deltas).chain(references).collect(),
    })
}

impl Report {
    pub fn row(&self, kind: RowKind, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.kind == kind && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Report> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Format(format!("report csv: {e}")))?;
        Ok(Report { rows })
    }

    /// Aligned table with a per-row sparkline over levels 1-5.
    pub fn to_text(&self) -> String {
        let header = ["kind", "method", "seeds", "clean", "L1", "L2", "L3", "L4", "L5", "avg", "trend"];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let num = |v: f64| {
                    if r.kind == RowKind::Delta {
                        format!("{v:+.2}")
                    } else {
                        format!("{v:.2}")
                    }
                };
                let mut c = vec![
                    format!("{:?}", r.kind).to_lowercase(),
                    r.method.clone(),
                    r.seeds.map_or("-".into(), |s| s.to_string()),
                    r.clean.map_or("-".into(), num),
                ];
                c.extend(r.levels().iter().map(|&v| num(v)));
                c.push(num(r.avg));
                c.push(sparkline(&r.levels()));
                c
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|c| c[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, &w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for c in &cells {
            line(&mut out, c);
        }
        out
    }
}

/// Eight-step block sparkline scaled to the row's own range.
pub fn sparkline(values: &[f64]) -> String {
    const TICKS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if hi - lo < 1e-12 {
                TICKS[3]
            } else {
                TICKS[(((v - lo) / (hi - lo)) * 7.0).round() as usize]
            }
        })
        .collect()
}

/// Per-run results: clean accuracy, all 25 cells, level means, grand mean.
pub fn run_results_csv(result: &RunResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cell", "kind", "level", "accuracy"]).expect("in-memory csv");
    let mut put = |cell: &str, kind: &str, level: &str, acc: f64| {
        w.write_record([cell, kind, level, &acc.to_string()]).expect("in-memory csv");
    };
    put("clean", "", "", result.clean_accuracy);
    if let Some(shift) = &result.shift {
        for (spec, acc) in &shift.cells {
            put(&spec.to_string(), spec.kind.name(), &spec.level.to_string(), *acc);
        }
        for (l, acc) in shift.level_avg.iter().enumerate() {
            put(&format!("level{}", l + 1), "all", &(l + 1).to_string(), *acc);
        }
        put("avg", "all", "", shift.grand_avg);
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn loss_curve_csv(result: &RunResult) -> String {
    let mut out = String::from("epoch,loss,clean_accuracy\n");
    for (e, (loss, acc)) in result.loss_curve.iter().zip(&result.epoch_accuracy).enumerate() {
        let _ = writeln!(out, "{},{loss},{acc}", e + 1);
    }
    out
}

/// Reads back the per-cell accuracy of a results file written by
/// [`run_results_csv`].
pub fn parse_run_results(text: &str) -> Result<Vec<(String, f64)>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Format(format!("results csv: {e}")))?;
            let acc: f64 = rec
                .get(3)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format("results csv: bad accuracy".into()))?;
            Ok((rec.get(0).unwrap_or_default().to_string(), acc))
        })
        .collect()
}

/// Cell name used in result files, e.g. `gaussian_noise@5`.
pub fn cell_name(spec: CorruptionSpec) -> String {
    spec.to_string()
}
