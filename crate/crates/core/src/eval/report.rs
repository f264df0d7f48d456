use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::bss::BssScores;
use super::EvalError;
use crate::separation::SeparationTrace;

/// Which recorded posteriors count towards classification accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    AllIterations,
    Final,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.map_or(true, |b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// Hits and decisions for one trace. `permutation[j]` is the estimate
/// matched to the source labelled `true_labels[j]`.
pub fn classification_counts(
    trace: &SeparationTrace,
    true_labels: &[usize],
    permutation: &[usize],
    mode: AccuracyMode,
) -> Result<(usize, usize), EvalError> {
    if true_labels.len() != permutation.len() {
        return Err(EvalError::Shape(format!(
            "{} labels for a permutation of {}",
            true_labels.len(),
            permutation.len()
        )));
    }
    let records = match mode {
        AccuracyMode::AllIterations => &trace.records[..],
        AccuracyMode::Final => &trace.records[trace.records.len().saturating_sub(1)..],
    };
    let mut hits = 0;
    let mut total = 0;
    for r in records {
        for (j, &e) in permutation.iter().enumerate() {
            let post = r
                .class_posteriors
                .get(e)
                .ok_or_else(|| EvalError::Shape(format!("iteration {} has no posterior for source {e}", r.iteration)))?;
            total += 1;
            if argmax(post) == Some(true_labels[j]) {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}

/// Fraction of recorded posteriors whose argmax is the true class.
pub fn classification_accuracy(
    trace: &SeparationTrace,
    true_labels: &[usize],
    permutation: &[usize],
    mode: AccuracyMode,
) -> Result<f64, EvalError> {
    let (hits, total) = classification_counts(trace, true_labels, permutation, mode)?;
    if total == 0 {
        return Err(EvalError::Shape("trace has no class posteriors".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Plain table that renders as CSV or aligned text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    pub fn to_text(&self) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (c, cell) in r.iter().enumerate().take(cols) {
                width[c] = width[c].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            for (c, cell) in cells.iter().enumerate().take(cols) {
                if c == 0 {
                    let _ = write!(out, "{cell:<w$}", w = width[c]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = width[c]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &self.headers);
        let rule: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for r in &self.rows {
            line(&mut out, r);
        }
        out
    }
}

/// Scores of one method on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScores {
    pub scene: String,
    pub method: String,
    pub scores: BssScores,
}

fn methods_in_order<'a>(names: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for n in names {
        if !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Mean SDR, SIR and SAR per method over all scenes and sources.
pub fn score_table(results: &[SceneScores]) -> Table {
    let mut t = Table::new(["method", "SDR [dB]", "SIR [dB]", "SAR [dB]", "scenes"]);
    for m in methods_in_order(results.iter().map(|r| r.method.as_str())) {
        let rows: Vec<&SceneScores> = results.iter().filter(|r| r.method == m).collect();
        let avg = |f: fn(&BssScores) -> &Vec<f64>| {
            let all: Vec<f64> = rows.iter().flat_map(|r| f(&r.scores).iter().copied()).collect();
            all.iter().sum::<f64>() / all.len().max(1) as f64
        };
        t.push(vec![
            m.to_string(),
            format!("{:.2}", avg(|s| &s.sdr)),
            format!("{:.2}", avg(|s| &s.sir)),
            format!("{:.2}", avg(|s| &s.sar)),
            rows.len().to_string(),
        ]);
    }
    t
}

/// One row per scene, method and source.
pub fn per_scene_table(results: &[SceneScores]) -> Table {
    let mut t = Table::new(["scene", "method", "source", "estimate", "SDR", "SIR", "SAR"]);
    for r in results {
        for j in 0..r.scores.sdr.len() {
            t.push(vec![
                r.scene.clone(),
                r.method.clone(),
                j.to_string(),
                r.scores.permutation[j].to_string(),
                format!("{:.3}", r.scores.sdr[j]),
                format!("{:.3}", r.scores.sir[j]),
                format!("{:.3}", r.scores.sar[j]),
            ]);
        }
    }
    t
}

/// Accuracy per method, over all iterations and at the final one. Each
/// entry is (method, trace, true labels, permutation).
pub fn accuracy_table(entries: &[(String, &SeparationTrace, Vec<usize>, Vec<usize>)]) -> Result<Table, EvalError> {
    let mut t = Table::new(["method", "all iterations [%]", "final [%]"]);
    for m in methods_in_order(entries.iter().map(|e| e.0.as_str())) {
        let mut all = (0, 0);
        let mut fin = (0, 0);
        for (_, trace, labels, perm) in entries.iter().filter(|e| e.0 == m) {
            let a = classification_counts(trace, labels, perm, AccuracyMode::AllIterations)?;
            let f = classification_counts(trace, labels, perm, AccuracyMode::Final)?;
            all = (all.0 + a.0, all.1 + a.1);
            fin = (fin.0 + f.0, fin.1 + f.1);
        }
        let pct = |(h, n): (usize, usize)| {
            if n == 0 {
                "-".to_string()
            } else {
                format!("{:.2}", 100.0 * h as f64 / n as f64)
            }
        };
        t.push(vec![m.to_string(), pct(all), pct(fin)]);
    }
    Ok(t)
}

/// Mean time per iteration and mean total time per run, per method, in
/// seconds. Runs recorded without timing are skipped.
pub fn runtime_report(traces: &[&SeparationTrace]) -> Table {
    let mut t = Table::new(["method", "per iteration [s]", "total [s]", "runs"]);
    for m in methods_in_order(traces.iter().map(|tr| tr.method.as_str())) {
        let timed: Vec<&SeparationTrace> = traces
            .iter()
            .copied()
            .filter(|tr| tr.method == m && tr.total_duration().is_some() && tr.iterations() > 0)
            .collect();
        if timed.is_empty() {
            t.push(vec![m.to_string(), "-".into(), "-".into(), "0".into()]);
            continue;
        }
        let total: f64 = timed.iter().map(|tr| tr.total_duration().unwrap().as_secs_f64()).sum();
        let iters: usize = timed.iter().map(|tr| tr.iterations()).sum();
        t.push(vec![
            m.to_string(),
            format!("{:.4}", total / iters as f64),
            format!("{:.3}", total / timed.len() as f64),
            timed.len().to_string(),
        ]);
    }
    t
}
