//! Ranking and threshold metrics for binary predictions, and Welch's t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const F1_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: (scores.len(), 1),
            rhs: (labels.len(), 1),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied ranks integral.
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let p = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += twice_avg * p;
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Average precision: sum over distinct thresholds of precision times the
/// recall gained there.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs a positive"));
    }
    let idx = descending(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let gained = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += gained;
        seen += j - i + 1;
        if gained > 0 {
            ap += (tp as f64 / seen as f64) * (gained as f64 / pos as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `2PR/(P+R)`, zero when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// F1 with predicted positive iff `score >= threshold`.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    Ok(Confusion::at(scores, labels, threshold).f1())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub counts: Confusion,
}

pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<EvalResult> {
    let counts = Confusion::at(scores, labels, F1_THRESHOLD);
    Ok(EvalResult {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        f1: counts.f1(),
        threshold: F1_THRESHOLD,
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test, two-sided.
pub fn two_sample_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::UndefinedMetric("t-test needs at least 2 values per group"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(if ma == mb {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Contract(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// One line of a metric CSV (`mode,fold,auroc,auprc,f1`); `fold` is a
/// fold number or `test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: String,
    pub fold: String,
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
}

impl MetricRow {
    pub fn new(mode: impl Into<String>, fold: impl Into<String>, r: &EvalResult) -> Self {
        MetricRow {
            mode: mode.into(),
            fold: fold.into(),
            auroc: r.auroc,
            auprc: r.auprc,
            f1: r.f1,
        }
    }
}

pub fn write_metric_csv<W: std::io::Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn read_metric_csv(path: &std::path::Path) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["mode", "fold", "auroc", "auprc", "f1"] {
        return Err(Error::Schema {
            path: path.into(),
            message: "expected header `mode,fold,auroc,auprc,f1`".into(),
        });
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(path, i + 2, e.to_string())))
        .collect()
}
