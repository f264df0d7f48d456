use std::io::{self, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Whether iteration wall-clock times are measured. Disabling it makes trace
/// files byte-reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    WallClock,
    Disabled,
}

impl Timing {
    pub(crate) fn start(self) -> Option<Instant> {
        match self {
            Timing::WallClock => Some(Instant::now()),
            Timing::Disabled => None,
        }
    }
}

/// One line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub nll: f64,
    pub duration_ms: Option<f64>,
    /// Per-source class posteriors; empty for models without classes.
    pub class_posteriors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeparationTrace {
    pub method: String,
    pub seed: Option<u64>,
    /// Objective before the first iteration.
    pub initial_nll: f64,
    pub records: Vec<IterationRecord>,
}

impl SeparationTrace {
    pub fn new(method: impl Into<String>, seed: Option<u64>, initial_nll: f64) -> Self {
        Self {
            method: method.into(),
            seed,
            initial_nll,
            records: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, nll: f64, started: Option<Instant>, class_posteriors: Vec<Vec<f64>>) {
        let duration_ms = started.map(|t| t.elapsed().as_secs_f64() * 1e3);
        self.records.push(IterationRecord {
            iteration: self.records.len() + 1,
            nll,
            duration_ms,
            class_posteriors,
        });
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn nll(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nll).collect()
    }

    /// Sum of recorded iteration durations.
    pub fn total_duration(&self) -> Option<Duration> {
        self.records
            .iter()
            .map(|r| r.duration_ms)
            .sum::<Option<f64>>()
            .map(|ms| Duration::from_secs_f64(ms / 1e3))
    }

    pub fn mean_iteration_duration(&self) -> Option<Duration> {
        let n = self.records.len();
        self.total_duration()
            .filter(|_| n > 0)
            .map(|d| d / n as u32)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<IterationRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_line_per_iteration() {
        let mut t = SeparationTrace::new("ilrma", Some(1), 10.0);
        t.push(9.0, None, vec![]);
        t.push(8.5, None, vec![vec![0.25, 0.75]]);
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"iteration":1,"nll":9.0,"duration_ms":null,"class_posteriors":[]}"#
        );
        assert_eq!(SeparationTrace::read_jsonl(&text).unwrap(), t.records);
        assert_eq!(t.total_duration(), None);
    }

    #[test]
    fn durations_accumulate() {
        let mut t = SeparationTrace::new("x", None, 0.0);
        t.push(0.0, Timing::WallClock.start(), vec![]);
        t.push(0.0, Timing::WallClock.start(), vec![]);
        assert!(t.total_duration().is_some());
        assert!(t.mean_iteration_duration().unwrap() <= t.total_duration().unwrap());
    }
}
