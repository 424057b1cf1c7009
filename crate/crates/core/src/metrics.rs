//! Utility and group-fairness metrics, per-run records and multi-run
//! aggregation. All values are percentages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::models::{Classifier, ModelError, ViewData};

/// Probability threshold for a positive prediction.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("evaluation mask is empty")]
    EmptyMask,
    #[error("index {index} out of range for {len} nodes")]
    OutOfRange { index: usize, len: usize },
    #[error("{metric} undefined: sensitive group {group} {reason}")]
    Undefined {
        metric: &'static str,
        group: u8,
        reason: &'static str,
    },
    #[error("sensitive attribute {name:?} has non-binary value {value}")]
    NonBinary { name: String, value: u8 },
    #[error("unknown sensitive attribute {0:?}")]
    UnknownAttribute(String),
    #[error("cannot aggregate reports: {0}")]
    Heterogeneous(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn check_mask(mask: &[usize], lens: &[usize]) -> Result<(), MetricError> {
    if mask.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let len = lens.iter().copied().min().unwrap_or(0);
    match mask.iter().find(|&&i| i >= len) {
        Some(&index) => Err(MetricError::OutOfRange { index, len }),
        None => Ok(()),
    }
}

/// Thresholds probabilities at [`THRESHOLD`].
pub fn predictions(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p > THRESHOLD)).collect()
}

/// `|P(ŷ=1 | s=0) - P(ŷ=1 | s=1)| * 100` over `mask`.
pub fn delta_dp(preds: &[u8], sens: &[u8], mask: &[usize]) -> Result<f64, MetricError> {
    check_mask(mask, &[preds.len(), sens.len()])?;
    let mut count = [0usize; 2];
    let mut positive = [0usize; 2];
    for &i in mask {
        let g = group_index(sens[i])?;
        count[g] += 1;
        positive[g] += usize::from(preds[i] == 1);
    }
    for g in 0..2 {
        if count[g] == 0 {
            return Err(MetricError::Undefined {
                metric: "delta_dp",
                group: g as u8,
                reason: "is empty",
            });
        }
    }
    let rate = |g: usize| positive[g] as f64 / count[g] as f64;
    Ok((rate(0) - rate(1)).abs() * 100.0)
}

/// `|TPR(s=0) - TPR(s=1)| * 100` over `mask`.
pub fn delta_eo(preds: &[u8], labels: &[u8], sens: &[u8], mask: &[usize]) -> Result<f64, MetricError> {
    check_mask(mask, &[preds.len(), labels.len(), sens.len()])?;
    let mut count = [0usize; 2];
    let mut hit = [0usize; 2];
    for &i in mask {
        if labels[i] != 1 {
            continue;
        }
        let g = group_index(sens[i])?;
        count[g] += 1;
        hit[g] += usize::from(preds[i] == 1);
    }
    for g in 0..2 {
        if count[g] == 0 {
            return Err(MetricError::Undefined {
                metric: "delta_eo",
                group: g as u8,
                reason: "has no positive labels",
            });
        }
    }
    let tpr = |g: usize| hit[g] as f64 / count[g] as f64;
    Ok((tpr(0) - tpr(1)).abs() * 100.0)
}

fn group_index(s: u8) -> Result<usize, MetricError> {
    match s {
        0 | 1 => Ok(s as usize),
        v => Err(MetricError::NonBinary {
            name: String::new(),
            value: v,
        }),
    }
}

pub fn accuracy(preds: &[u8], labels: &[u8], mask: &[usize]) -> Result<f64, MetricError> {
    check_mask(mask, &[preds.len(), labels.len()])?;
    let correct = mask.iter().filter(|&&i| preds[i] == labels[i]).count();
    Ok(correct as f64 / mask.len() as f64 * 100.0)
}

/// Binary F1 of the positive class. Without true positives the score is 0,
/// unless labels and predictions are both entirely negative (then 100).
pub fn f1(preds: &[u8], labels: &[u8], mask: &[usize]) -> Result<f64, MetricError> {
    check_mask(mask, &[preds.len(), labels.len()])?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &i in mask {
        match (preds[i] == 1, labels[i] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(if fp == 0 && fn_ == 0 { 100.0 } else { 0.0 });
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall) * 100.0)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessBlock {
    pub attribute: String,
    pub delta_dp: f64,
    pub delta_eo: f64,
}

/// Metrics of one trained model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub acc: f64,
    pub f1: f64,
    pub fairness: Vec<FairnessBlock>,
}

/// Computes every metric from one set of predictions.
pub fn evaluate_predictions(
    preds: &[u8],
    labels: &[u8],
    sensitive: &[(&str, &[u8])],
    mask: &[usize],
    seed: u64,
) -> Result<RunMetrics, MetricError> {
    let mut fairness = Vec::with_capacity(sensitive.len());
    for &(name, values) in sensitive {
        if let Some(&value) = values.iter().find(|&&v| v > 1) {
            return Err(MetricError::NonBinary {
                name: name.to_string(),
                value,
            });
        }
        fairness.push(FairnessBlock {
            attribute: name.to_string(),
            delta_dp: delta_dp(preds, values, mask)?,
            delta_eo: delta_eo(preds, labels, values, mask)?,
        });
    }
    Ok(RunMetrics {
        seed,
        acc: accuracy(preds, labels, mask)?,
        f1: f1(preds, labels, mask)?,
        fairness,
    })
}

/// One forward pass of `model`, then utility plus one fairness block per
/// named attribute, on `mask`.
pub fn evaluate_multi_sensitive(
    model: &Classifier,
    input: &ViewData,
    graph: &Graph,
    attributes: &[&str],
    mask: &[usize],
    seed: u64,
) -> Result<RunMetrics, MetricError> {
    let mut sensitive = Vec::with_capacity(attributes.len());
    for &name in attributes {
        let attr = graph
            .sensitive(name)
            .map_err(|_| MetricError::UnknownAttribute(name.to_string()))?;
        sensitive.push((name, attr.values.as_slice()));
    }
    let (_, probs) = model.infer(input)?;
    let preds = predictions(&probs);
    evaluate_predictions(&preds, &graph.label_vector(), &sensitive, mask, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        // identical values are summarised exactly; summation would round
        if let Some(&first) = values.first() {
            if values.iter().all(|&v| v == first) {
                return Self { mean: first, std: 0.0 };
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessStat {
    pub attribute: String,
    pub delta_dp: Stat,
    pub delta_eo: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub acc: Stat,
    pub f1: Stat,
    pub fairness: Vec<FairnessStat>,
}

/// Per-metric mean and sample standard deviation over runs.
pub fn aggregate(runs: &[RunMetrics]) -> Result<Aggregate, MetricError> {
    let first = runs
        .first()
        .ok_or_else(|| MetricError::Heterogeneous("no runs".into()))?;
    let names: Vec<&str> = first.fairness.iter().map(|b| b.attribute.as_str()).collect();
    for r in runs {
        let other: Vec<&str> = r.fairness.iter().map(|b| b.attribute.as_str()).collect();
        if other != names {
            return Err(MetricError::Heterogeneous(format!(
                "attributes {names:?} vs {other:?}"
            )));
        }
    }
    let col = |f: &dyn Fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let fairness = names
        .iter()
        .enumerate()
        .map(|(k, name)| FairnessStat {
            attribute: name.to_string(),
            delta_dp: col(&|r| r.fairness[k].delta_dp),
            delta_eo: col(&|r| r.fairness[k].delta_eo),
        })
        .collect();
    Ok(Aggregate {
        runs: runs.len(),
        acc: col(&|r| r.acc),
        f1: col(&|r| r.f1),
        fairness,
    })
}

/// A complete metrics document: provenance, per-run records, aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config_hash: String,
    pub strategy: String,
    pub split: String,
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(strategy: &str, config_hash: &str, runs: Vec<RunMetrics>) -> Result<Self, MetricError> {
        let aggregate = aggregate(&runs)?;
        Ok(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            strategy: strategy.to_string(),
            split: "test".to_string(),
            runs,
            aggregate,
        })
    }

    /// Pretty JSON; keys appear in declaration order.
    pub fn to_json(&self) -> Result<String, MetricError> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| MetricError::Serialize(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, MetricError> {
        serde_json::from_str(text).map_err(|e| MetricError::Serialize(e.to_string()))
    }

    /// Header and one data row of aggregate values, comma separated.
    pub fn summary_csv(&self) -> Result<String, MetricError> {
        let a = &self.aggregate;
        let mut header = vec!["strategy", "config_hash", "version", "runs", "acc_mean", "acc_std", "f1_mean", "f1_std"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        let mut row = vec![
            self.strategy.clone(),
            self.config_hash.clone(),
            self.version.clone(),
            a.runs.to_string(),
            fmt(a.acc.mean),
            fmt(a.acc.std),
            fmt(a.f1.mean),
            fmt(a.f1.std),
        ];
        for f in &a.fairness {
            for (metric, stat) in [("dp", f.delta_dp), ("eo", f.delta_eo)] {
                header.push(format!("{metric}_{}_mean", f.attribute));
                header.push(format!("{metric}_{}_std", f.attribute));
                row.push(fmt(stat.mean));
                row.push(fmt(stat.std));
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| MetricError::Serialize(e.to_string());
        w.write_record(&header).map_err(err)?;
        w.write_record(&row).map_err(err)?;
        let bytes = w.into_inner().map_err(|e| MetricError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MetricError::Serialize(e.to_string()))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn delta_dp_examples() {
        assert_eq!(delta_dp(&[1, 0, 1, 1], &[0, 0, 1, 1], &all(4)).unwrap(), 50.0);
        assert_eq!(delta_dp(&[1, 1, 0, 0], &[0, 0, 1, 1], &all(4)).unwrap(), 100.0);
        assert_eq!(delta_dp(&[1, 1, 1, 1], &[0, 1, 0, 1], &all(4)).unwrap(), 0.0);
        assert!(matches!(
            delta_dp(&[1, 0], &[0, 0], &all(2)),
            Err(MetricError::Undefined { group: 1, .. })
        ));
    }

    #[test]
    fn delta_eo_examples() {
        assert_eq!(delta_eo(&[1, 0], &[1, 1], &[0, 1], &all(2)).unwrap(), 100.0);
        assert_eq!(delta_eo(&[1, 0, 1, 0], &[1, 1, 1, 1], &[0, 0, 1, 1], &all(4)).unwrap(), 0.0);
        assert_eq!(delta_eo(&[1, 0, 0, 1], &[1, 0, 0, 1], &[0, 0, 1, 1], &all(4)).unwrap(), 0.0);
        assert!(delta_eo(&[1, 1], &[1, 0], &[0, 1], &all(2)).is_err());
    }

    #[test]
    fn utility_examples() {
        assert_eq!(accuracy(&[1, 1, 0, 0], &[1, 0, 1, 0], &all(4)).unwrap(), 50.0);
        assert_eq!(f1(&[1, 1, 0, 0], &[1, 0, 1, 0], &all(4)).unwrap(), 50.0);
        assert_eq!(f1(&[1, 0], &[1, 0], &all(2)).unwrap(), 100.0);
        assert_eq!(f1(&[0, 0], &[1, 0], &all(2)).unwrap(), 0.0);
        assert_eq!(f1(&[0, 0], &[0, 0], &all(2)).unwrap(), 100.0);
        assert!(matches!(accuracy(&[1], &[1], &[]), Err(MetricError::EmptyMask)));
    }

    #[test]
    fn aggregate_sample_std() {
        let run = |acc: f64| RunMetrics {
            seed: 0,
            acc,
            f1: 10.0,
            fairness: vec![],
        };
        let a = aggregate(&[run(1.0), run(3.0)]).unwrap();
        assert_eq!(a.acc.mean, 2.0);
        assert!((a.acc.std - 2f64.sqrt()).abs() < 1e-15);
        let single = aggregate(&[run(5.0)]).unwrap();
        assert_eq!((single.acc.mean, single.acc.std), (5.0, 0.0));
        let mut odd = run(1.0);
        odd.fairness.push(FairnessBlock {
            attribute: "x".into(),
            delta_dp: 0.0,
            delta_eo: 0.0,
        });
        assert!(aggregate(&[run(1.0), odd]).is_err());
    }

    #[test]
    fn report_documents() {
        let runs = vec![RunMetrics {
            seed: 3,
            acc: 75.0,
            f1: 70.0,
            fairness: vec![FairnessBlock {
                attribute: "sens".into(),
                delta_dp: 12.5,
                delta_eo: 4.0,
            }],
        }];
        let r = MetricsReport::new("full", "abc", runs).unwrap();
        let json = r.to_json().unwrap();
        assert!(json.find("\"version\"").unwrap() < json.find("\"aggregate\"").unwrap());
        assert_eq!(MetricsReport::from_json(&json).unwrap(), r);
        let csv = r.summary_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].ends_with("dp_sens_mean,dp_sens_std,eo_sens_mean,eo_sens_std"));
        assert!(lines[1].starts_with("full,abc,"));
    }
}
