//! Per-example label confidences and per-label percentile thresholds.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::Prediction;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelConfidence<T = f64> {
    pub example_id: String,
    /// Mean probability of each predicted label.
    pub conf: BTreeMap<String, T>,
    /// Predicted labels in position order (a multiset).
    pub predicted: Vec<String>,
}

impl<T: Scalar> LabelConfidence<T> {
    /// Confidence for `label`; zero when it was not predicted.
    pub fn get(&self, label: &str) -> T {
        self.conf.get(label).copied().unwrap_or_else(T::zero)
    }

    pub fn holds(&self, label: &str) -> bool {
        self.conf.contains_key(label)
    }
}

/// Averages the probabilities of every position carrying each label.
pub fn estimate_label_confidences<T: Scalar>(pred: &Prediction) -> Result<LabelConfidence<T>> {
    let probs = pred.probs.as_ref().ok_or(Error::ConfidenceUnavailable)?;
    if probs.len() != pred.labels.len() {
        return Err(Error::Validation(format!(
            "prediction {:?}: {} labels but {} probabilities",
            pred.example_id,
            pred.labels.len(),
            probs.len()
        )));
    }
    let mut sums: BTreeMap<String, (T, usize)> = BTreeMap::new();
    for (label, &p) in pred.labels.iter().zip(probs) {
        let p = T::from_f64(p).ok_or_else(|| Error::Validation(format!("probability {p} not representable")))?;
        let entry = sums.entry(label.clone()).or_insert((T::zero(), 0));
        entry.0 = entry.0 + p;
        entry.1 += 1;
    }
    let conf = sums
        .into_iter()
        .map(|(l, (sum, n))| {
            let n = T::from_usize(n).expect("count fits the scalar type");
            (l, sum / n)
        })
        .collect();
    Ok(LabelConfidence {
        example_id: pred.example_id.clone(),
        conf,
        predicted: pred.labels.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdTable<T = f64> {
    pub percentile: f64,
    pub tau: BTreeMap<String, T>,
    /// Ascending confidences of the holders of each label, kept so the table
    /// can be re-derived at another percentile.
    samples: BTreeMap<String, Vec<T>>,
}

fn check_percentile(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("percentile {p} outside (0, 100]")))
    }
}

/// Nearest-rank percentile of an ascending, non-empty slice.
pub fn nearest_rank<T: Copy>(sorted: &[T], percentile: f64) -> T {
    let m = sorted.len();
    let rank = ((percentile * m as f64) / 100.0).ceil() as usize;
    sorted[rank.clamp(1, m) - 1]
}

impl<T: Scalar> ThresholdTable<T> {
    pub fn get(&self, label: &str) -> Option<T> {
        self.tau.get(label).copied()
    }

    pub fn at_percentile(&self, percentile: f64) -> Result<Self> {
        check_percentile(percentile)?;
        let tau = self
            .samples
            .iter()
            .map(|(l, v)| (l.clone(), nearest_rank(v, percentile)))
            .collect();
        Ok(ThresholdTable {
            percentile,
            tau,
            samples: self.samples.clone(),
        })
    }

    /// Drops the given labels from thresholding.
    pub fn without_labels(mut self, labels: &[String]) -> Self {
        for l in labels {
            self.tau.remove(l);
            self.samples.remove(l);
        }
        self
    }
}

pub fn compute_thresholds<T: Scalar>(pool: &[LabelConfidence<T>], percentile: f64) -> Result<ThresholdTable<T>> {
    check_percentile(percentile)?;
    if pool.is_empty() {
        return Err(Error::Validation("threshold pool is empty".into()));
    }
    let mut samples: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for lc in pool {
        for (l, &c) in &lc.conf {
            samples.entry(l.clone()).or_default().push(c);
        }
    }
    for v in samples.values_mut() {
        v.sort_by(|a, b| a.partial_cmp(b).expect("confidences are comparable"));
    }
    let tau = samples
        .iter()
        .map(|(l, v)| (l.clone(), nearest_rank(v, percentile)))
        .collect();
    Ok(ThresholdTable {
        percentile,
        tau,
        samples,
    })
}

/// True when every predicted label meets its threshold. Labels without a
/// threshold entry are unconstrained.
pub fn eligible<T: Scalar>(lc: &LabelConfidence<T>, tau: &ThresholdTable<T>) -> bool {
    lc.conf.iter().all(|(l, &c)| tau.get(l).is_none_or(|t| c >= t))
}

#[derive(Serialize)]
struct ConfidenceLine<'a> {
    id: &'a str,
    conf: BTreeMap<&'a str, f64>,
}

/// JSONL audit export, one `{"id", "conf"}` object per example.
pub fn confidences_to_jsonl<T: Scalar>(pool: &[LabelConfidence<T>]) -> Result<String> {
    let mut out = String::new();
    for lc in pool {
        let line = ConfidenceLine {
            id: &lc.example_id,
            conf: lc.conf.iter().map(|(l, c)| (l.as_str(), c.to_f64())).collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}
