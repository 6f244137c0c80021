//! Scoring: token and span micro-F1, accuracy, per-label tables, confusion
//! matrices and exemplar precision.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{align_predictions, Dataset, Prediction, TaskKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: u64,
    pub predicted: u64,
    pub true_positives: u64,
}

impl LabelScores {
    fn from_counts(tp: u64, predicted: u64, support: u64) -> Self {
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        LabelScores {
            precision,
            recall,
            f1: harmonic(precision, recall),
            support,
            predicted,
            true_positives: tp,
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 from pooled counts; nothing to find and nothing predicted scores 1.
fn pooled_f1(tp: u64, predicted: u64, gold: u64) -> f64 {
    if predicted + gold == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (predicted + gold) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix<C = u64> {
    pub labels: Vec<String>,
    /// `cells[gold][predicted]`
    pub cells: Vec<Vec<C>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub examples: usize,
    pub positions: usize,
    /// Token-level; the default label is left out for BIO tasks.
    pub micro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    /// Exact-match entity spans, BIO tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_f1: Option<f64>,
    pub accuracy: f64,
    /// Mean per-label F1 over labels seen in gold or predictions; pair tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub per_label: BTreeMap<String, LabelScores>,
    pub confusion: ConfusionMatrix,
    /// Fraction of correct positions per example, in dataset order.
    pub per_example_accuracy: Vec<f64>,
}

/// Lenient BIO spans `(start, end_exclusive, type)`. `I-X` continues an open
/// `X` span and otherwise opens a new one.
pub fn extract_spans(labels: &[String]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, l) in labels.iter().enumerate() {
        let (prefix, ty) = match l.split_once('-') {
            Some((p @ ("B" | "I"), ty)) => (p, ty),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.is_some_and(|(_, t)| t == ty);
        if !continues {
            if let Some((s, t)) = open.take() {
                spans.push((s, i, t.to_string()));
            }
            if prefix != "O" {
                open = Some((i, ty));
            }
        }
    }
    if let Some((s, t)) = open {
        spans.push((s, labels.len(), t.to_string()));
    }
    spans
}

/// Scores predictions against a labelled dataset. Predictions are matched by id.
pub fn score(dataset: &Dataset, preds: &[Prediction]) -> Result<EvalReport> {
    if !dataset.is_labelled() {
        return Err(Error::Validation("scoring needs gold labels on every example".into()));
    }
    let preds = align_predictions(dataset, preds.to_vec())?;
    let task = &dataset.task;
    let bio = task.is_bio();
    let n = task.labels.len();
    let index: HashMap<&str, usize> = task.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut cells = vec![vec![0u64; n]; n];
    let (mut tp, mut pp, mut gp) = (0u64, 0u64, 0u64);
    let (mut span_tp, mut span_p, mut span_g) = (0u64, 0u64, 0u64);
    let mut correct = 0usize;
    let mut positions = 0usize;
    let mut per_example_accuracy = Vec::with_capacity(preds.len());

    for (ex, pred) in dataset.examples.iter().zip(&preds) {
        let gold = ex.gold_labels.as_ref().expect("checked labelled");
        let mut ok = 0usize;
        for (g, p) in gold.iter().zip(&pred.labels) {
            cells[index[g.as_str()]][index[p.as_str()]] += 1;
            if g == p {
                ok += 1;
            }
            let scored = |l: &String| !bio || *l != task.default_label;
            if scored(g) {
                gp += 1;
            }
            if scored(p) {
                pp += 1;
                if g == p {
                    tp += 1;
                }
            }
        }
        correct += ok;
        positions += gold.len();
        per_example_accuracy.push(if gold.is_empty() {
            1.0
        } else {
            ok as f64 / gold.len() as f64
        });
        if bio {
            let gs = extract_spans(gold);
            let ps = extract_spans(&pred.labels);
            span_g += gs.len() as u64;
            span_p += ps.len() as u64;
            span_tp += ps.iter().filter(|s| gs.contains(s)).count() as u64;
        }
    }

    let mut per_label = BTreeMap::new();
    for (i, label) in task.labels.iter().enumerate() {
        let support: u64 = cells[i].iter().sum();
        let predicted: u64 = cells.iter().map(|row| row[i]).sum();
        if support + predicted > 0 {
            per_label.insert(label.clone(), LabelScores::from_counts(cells[i][i], predicted, support));
        }
    }
    let macro_f1 = (task.kind == TaskKind::PairClassification).then(|| {
        if per_label.is_empty() {
            0.0
        } else {
            per_label.values().map(|s| s.f1).sum::<f64>() / per_label.len() as f64
        }
    });

    Ok(EvalReport {
        task: task.kind,
        examples: dataset.len(),
        positions,
        micro_f1: pooled_f1(tp, pp, gp),
        micro_precision: ratio(tp, pp),
        micro_recall: ratio(tp, gp),
        span_f1: bio.then(|| pooled_f1(span_tp, span_p, span_g)),
        accuracy: ratio(correct as u64, positions as u64),
        macro_f1,
        per_label,
        confusion: ConfusionMatrix {
            labels: task.labels.clone(),
            cells,
        },
        per_example_accuracy,
    })
}

/// Elementwise `a - b`.
pub fn confusion_diff(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<ConfusionMatrix<i64>> {
    if a.labels != b.labels {
        return Err(Error::Validation(format!(
            "label sets differ: {:?} vs {:?}",
            a.labels, b.labels
        )));
    }
    let cells = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| *x as i64 - *y as i64).collect())
        .collect();
    Ok(ConfusionMatrix {
        labels: a.labels.clone(),
        cells,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCell {
    pub precision: f64,
    pub correct: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarPrecision {
    pub per_label: BTreeMap<String, PrecisionCell>,
    /// Mean over labels that occur among the exemplars.
    pub macro_precision: f64,
}

/// For each label, the share of exemplar positions carrying that pool label
/// whose gold label agrees. `chosen` lists the exemplar ids of each query;
/// repeats across queries count every time.
pub fn exemplar_precision<'a>(
    chosen: impl IntoIterator<Item = &'a [String]>,
    pool: &HashMap<String, Vec<String>>,
    gold: &HashMap<String, Vec<String>>,
) -> Result<ExemplarPrecision> {
    let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for ids in chosen {
        for id in ids {
            let p = pool.get(id).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            let g = gold
                .get(id)
                .ok_or_else(|| Error::Validation(format!("no gold labels for exemplar {id:?}")))?;
            if p.len() != g.len() {
                return Err(Error::Validation(format!("exemplar {id:?}: label length mismatch")));
            }
            for (pl, gl) in p.iter().zip(g) {
                let c = counts.entry(pl.clone()).or_default();
                c.1 += 1;
                if pl == gl {
                    c.0 += 1;
                }
            }
        }
    }
    let per_label: BTreeMap<String, PrecisionCell> = counts
        .into_iter()
        .map(|(l, (correct, total))| {
            (
                l,
                PrecisionCell {
                    precision: ratio(correct, total),
                    correct,
                    total,
                },
            )
        })
        .collect();
    let macro_precision = if per_label.is_empty() {
        0.0
    } else {
        per_label.values().map(|c| c.precision).sum::<f64>() / per_label.len() as f64
    };
    Ok(ExemplarPrecision {
        per_label,
        macro_precision,
    })
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row)
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn per_label_csv(report: &EvalReport) -> Result<String> {
    let mut rows = vec![["label", "precision", "recall", "f1", "support", "predicted"]
        .iter()
        .map(|s| s.to_string())
        .collect()];
    for (label, s) in &report.per_label {
        rows.push(vec![
            label.clone(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
            s.support.to_string(),
            s.predicted.to_string(),
        ]);
    }
    csv_string(rows)
}

/// Header row of predicted labels; each following row starts with its gold label.
pub fn confusion_csv<C: ToString>(m: &ConfusionMatrix<C>) -> Result<String> {
    let mut header = vec!["gold\\predicted".to_string()];
    header.extend(m.labels.iter().cloned());
    let mut rows = vec![header];
    for (label, row) in m.labels.iter().zip(&m.cells) {
        let mut r = vec![label.clone()];
        r.extend(row.iter().map(ToString::to_string));
        rows.push(r);
    }
    csv_string(rows)
}

/// Labels whose gold count is zero are omitted from `per_label`; this fills
/// them in with zeros for tabulation.
pub fn label_table(report: &EvalReport, task: &TaskSpec) -> Vec<(String, LabelScores)> {
    task.labels
        .iter()
        .map(|l| (l.clone(), report.per_label.get(l).copied().unwrap_or_default()))
        .collect()
}
