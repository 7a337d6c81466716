//! Accuracy, the exact McNemar test, and metric CSV files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax predictions for every row.
pub fn predictions(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows).map(|i| argmax(scores.row(i))).collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.rows != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} score rows for {} labels",
            scores.rows,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of an empty set".into()));
    }
    let correct = predictions(scores)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// 2x2 contingency table of two classifiers on the same examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcome {
    /// A wrong, B right.
    pub n01: u64,
    /// A right, B wrong.
    pub n10: u64,
    pub n00: u64,
    pub n11: u64,
}

impl PairedOutcome {
    pub fn from_correctness(a: &[bool], b: &[bool]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vs {} paired outcomes",
                a.len(),
                b.len()
            )));
        }
        let mut out = Self::default();
        for (&x, &y) in a.iter().zip(b) {
            match (x, y) {
                (false, true) => out.n01 += 1,
                (true, false) => out.n10 += 1,
                (false, false) => out.n00 += 1,
                (true, true) => out.n11 += 1,
            }
        }
        Ok(out)
    }

    pub fn total(&self) -> u64 {
        self.n01 + self.n10 + self.n00 + self.n11
    }

    pub fn discordant(&self) -> u64 {
        self.n01 + self.n10
    }
}

/// Per-example correctness of argmax predictions.
pub fn correctness(scores: &Matrix, labels: &[usize]) -> Vec<bool> {
    predictions(scores)
        .iter()
        .zip(labels)
        .map(|(p, y)| p == y)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub p_value: f64,
    pub discordant: u64,
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n <= 120 {
        tail_exact(n, k)
    } else {
        tail_log_space(n, k)
    }
}

/// Integer binomial counts; `C(120, 60) < 2^127`.
fn tail_exact(n: u64, k: u64) -> f64 {
    let mut c: u128 = 1;
    let mut tail: u128 = 0;
    for i in 0..=n {
        if i >= k {
            tail += c;
        }
        if i < n {
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
    }
    tail as f64 / 2f64.powi(n as i32)
}

/// Starts from the largest term of the tail and walks outward.
fn tail_log_space(n: u64, k: u64) -> f64 {
    let ln_fact = |m: u64| -> f64 { (2..=m).map(|i| (i as f64).ln()).sum() };
    let start = k.max(n / 2);
    let ln_start = ln_fact(n) - ln_fact(start) - ln_fact(n - start) - n as f64 * 2f64.ln();
    let mut total = 0.0;
    let mut term = 1.0;
    for i in start..n {
        total += term;
        term *= (n - i) as f64 / (i + 1) as f64;
    }
    total += term;
    if k < start {
        let mut term = 1.0;
        for i in (k..start).rev() {
            term *= (i + 1) as f64 / (n - i) as f64;
            total += term;
        }
    }
    (ln_start.exp() * total).min(1.0)
}

/// Exact two-sided McNemar test: a binomial test of `n01` among the
/// `n01 + n10` discordant pairs with success probability 1/2.
pub fn mcnemar_exact(outcome: &PairedOutcome) -> McNemarResult {
    let n = outcome.discordant();
    if n == 0 {
        return McNemarResult {
            p_value: 1.0,
            discordant: 0,
        };
    }
    let k = outcome.n01.max(outcome.n10);
    McNemarResult {
        p_value: (2.0 * binomial_upper_tail(n, k)).min(1.0),
        discordant: n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_id" => Ok(Split::TestId),
            "test_ood" => Ok(Split::TestOod),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// One row of the long-format metrics table.
///
/// `worker_id` is a group index, `"merged"` for the averaged model or
/// `"ensemble"` for output ensembling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: u64,
    pub worker_id: String,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

pub const METRICS_HEADER: [&str; 6] = ["run_id", "epoch", "worker_id", "split", "metric", "value"];

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes metrics as CSV with a fixed column order. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn write_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(path))?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.epoch.to_string(),
            r.worker_id.clone(),
            r.split.to_string(),
            r.metric.clone(),
            format!("{:?}", r.value),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let bad = |what: &str| Error::InvalidConfig(format!("{}: bad {what} in {row:?}", path.display()));
        out.push(MetricRecord {
            run_id: field(0).to_string(),
            epoch: field(1).parse().map_err(|_| bad("epoch"))?,
            worker_id: field(2).to_string(),
            split: field(3).parse()?,
            metric: field(4).to_string(),
            value: field(5).parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}
