//! Datasets, predictions and task definitions, plus their file formats.
//!
//! Sequence data is CoNLL-style: one `word<TAB>tag` per line, sentences
//! separated by blank lines, an optional `# id = ...` comment before a block.
//! Unlabelled test data uses the same layout without the tag column. Pair
//! classification data and predictions are JSONL.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SequenceLabelling,
    PairClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Full tagset, in a fixed order.
    pub labels: Vec<String>,
    /// Tag assigned to positions the verbalizer cannot recover (O for NER, X for POS).
    pub default_label: String,
    /// Labels that must appear among the selected exemplars. All labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_labels: Option<Vec<String>>,
    /// Labels left out of confidence thresholding.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub threshold_exclude: Vec<String>,
    pub template_id: String,
    pub language: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation("task has no labels".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Validation(format!("duplicate label {l:?}")));
            }
        }
        if !seen.contains(self.default_label.as_str()) {
            return Err(Error::Validation(format!(
                "default label {:?} is not in the tagset",
                self.default_label
            )));
        }
        for l in self.coverage_labels.iter().flatten().chain(&self.threshold_exclude) {
            if !seen.contains(l.as_str()) {
                return Err(Error::Validation(format!("label {l:?} is not in the tagset")));
            }
        }
        Ok(())
    }

    pub fn coverage(&self) -> &[String] {
        self.coverage_labels.as_deref().unwrap_or(&self.labels)
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// True for BIO-encoded sequence tagsets (every non-default tag is `B-*` or `I-*`).
    pub fn is_bio(&self) -> bool {
        self.kind == TaskKind::SequenceLabelling
            && self
                .labels
                .iter()
                .filter(|l| **l != self.default_label)
                .all(|l| l.starts_with("B-") || l.starts_with("I-"))
    }

    /// Universal Dependencies POS task with the 17-tag UPOS set.
    pub fn upos(language: &str) -> Self {
        let labels = [
            "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT",
            "SCONJ", "SYM", "VERB", "X",
        ];
        TaskSpec {
            kind: TaskKind::SequenceLabelling,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            default_label: "X".into(),
            coverage_labels: None,
            threshold_exclude: Vec::new(),
            template_id: "pos".into(),
            language: language.into(),
        }
    }

    /// BIO NER over PER, LOC, ORG and DATE.
    pub fn ner(language: &str) -> Self {
        let mut labels = vec!["O".to_string()];
        for ty in ["PER", "LOC", "ORG", "DATE"] {
            labels.push(format!("B-{ty}"));
            labels.push(format!("I-{ty}"));
        }
        TaskSpec {
            kind: TaskKind::SequenceLabelling,
            labels,
            default_label: "O".into(),
            coverage_labels: None,
            threshold_exclude: Vec::new(),
            template_id: "ner".into(),
            language: language.into(),
        }
    }

    /// Three-way NLI.
    pub fn nli(language: &str) -> Self {
        TaskSpec {
            kind: TaskKind::PairClassification,
            labels: vec!["entailment".into(), "contradiction".into(), "neutral".into()],
            default_label: "neutral".into(),
            coverage_labels: None,
            threshold_exclude: Vec::new(),
            template_id: "nli".into(),
            language: language.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Input {
    Tokens(Vec<String>),
    Pair { premise: String, hypothesis: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub input: Input,
    pub gold_labels: Option<Vec<String>>,
}

impl Example {
    pub fn tokens(id: impl Into<String>, tokens: Vec<String>, gold: Option<Vec<String>>) -> Self {
        Example {
            id: id.into(),
            input: Input::Tokens(tokens),
            gold_labels: gold,
        }
    }

    pub fn pair(
        id: impl Into<String>,
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        gold: Option<String>,
    ) -> Self {
        Example {
            id: id.into(),
            input: Input::Pair {
                premise: premise.into(),
                hypothesis: hypothesis.into(),
            },
            gold_labels: gold.map(|g| vec![g]),
        }
    }

    /// Number of label positions: token count, or 1 for a pair.
    pub fn label_len(&self) -> usize {
        match &self.input {
            Input::Tokens(t) => t.len(),
            Input::Pair { .. } => 1,
        }
    }

    pub fn token_slice(&self) -> &[String] {
        match &self.input {
            Input::Tokens(t) => t,
            Input::Pair { .. } => &[],
        }
    }

    /// The string sent to the embedding model.
    pub fn embedding_text(&self) -> String {
        match &self.input {
            Input::Tokens(t) => t.join(" "),
            Input::Pair { premise, hypothesis } => format!("{premise} [SEP] {hypothesis}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub example_id: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl Prediction {
    pub fn new(example_id: impl Into<String>, labels: Vec<String>) -> Self {
        Prediction {
            example_id: example_id.into(),
            labels,
            probs: None,
        }
    }

    pub fn with_probs(mut self, probs: Vec<f64>) -> Self {
        self.probs = Some(probs);
        self
    }

    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if let Some(probs) = &self.probs {
            if probs.len() != self.labels.len() {
                return Err(Error::Validation(format!(
                    "prediction {:?}: {} labels but {} probabilities",
                    self.example_id,
                    self.labels.len(),
                    probs.len()
                )));
            }
            if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Validation(format!(
                    "prediction {:?}: probability {p} outside [0, 1]",
                    self.example_id
                )));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| !task.has_label(l)) {
            return Err(Error::Validation(format!(
                "prediction {:?}: unknown label {l:?}",
                self.example_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(task: TaskSpec, examples: Vec<Example>) -> Result<Self> {
        let ds = Dataset { task, examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mut ids = HashSet::new();
        for ex in &self.examples {
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Validation(format!("duplicate example id {:?}", ex.id)));
            }
            if let Some(gold) = &ex.gold_labels {
                if gold.len() != ex.label_len() {
                    return Err(Error::Validation(format!(
                        "example {:?}: {} gold labels for {} positions",
                        ex.id,
                        gold.len(),
                        ex.label_len()
                    )));
                }
                if let Some(tag) = gold.iter().find(|t| !self.task.has_label(t)) {
                    return Err(Error::Validation(format!("example {:?}: unknown tag {tag:?}", ex.id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    pub fn is_labelled(&self) -> bool {
        self.examples.iter().all(|e| e.gold_labels.is_some())
    }

    /// Gold labels as predictions, for skyline pools and scoring.
    pub fn gold_predictions(&self) -> Result<Vec<Prediction>> {
        self.examples
            .iter()
            .map(|e| {
                e.gold_labels
                    .clone()
                    .map(|g| Prediction::new(e.id.clone(), g))
                    .ok_or_else(|| Error::Validation(format!("example {:?} has no gold labels", e.id)))
            })
            .collect()
    }
}

pub fn parse_conll(text: &str, task: &TaskSpec) -> Result<Dataset> {
    task.validate()?;
    if task.kind != TaskKind::SequenceLabelling {
        return Err(Error::Validation(
            "CoNLL input requires a sequence-labelling task".into(),
        ));
    }

    struct Block {
        id: Option<String>,
        tokens: Vec<String>,
        tags: Vec<Option<String>>,
        first_line: usize,
    }

    let mut blocks: Vec<Block> = Vec::new();
    let mut current: Option<Block> = None;
    let mut pending_id: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            continue;
        }
        if line.starts_with("# ") && !line.contains('\t') {
            if current.is_none() {
                if let Some(rest) = line[2..].trim().strip_prefix("id =") {
                    pending_id = Some(rest.trim().to_string());
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (word, tag) = match fields.as_slice() {
            [w] => (*w, None),
            [w, t] => (*w, Some(t.trim().to_string())),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 1 or 2 tab-separated fields, found {}", fields.len()),
                })
            }
        };
        if word.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty word".into(),
            });
        }
        let block = current.get_or_insert_with(|| Block {
            id: pending_id.take(),
            tokens: Vec::new(),
            tags: Vec::new(),
            first_line: line_no,
        });
        block.tokens.push(word.to_string());
        block.tags.push(tag);
    }
    if let Some(b) = current.take() {
        blocks.push(b);
    }

    let mut examples = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.into_iter().enumerate() {
        let tagged = b.tags.iter().filter(|t| t.is_some()).count();
        let gold = if tagged == 0 {
            None
        } else if tagged == b.tags.len() {
            let tags: Vec<String> = b.tags.into_iter().flatten().collect();
            if let Some(t) = tags.iter().find(|t| !task.has_label(t)) {
                return Err(Error::Validation(format!(
                    "unknown tag {t:?} in block starting at line {}",
                    b.first_line
                )));
            }
            Some(tags)
        } else {
            return Err(Error::Parse {
                line: b.first_line,
                message: "block mixes tagged and untagged lines".into(),
            });
        };
        examples.push(Example::tokens(b.id.unwrap_or_else(|| i.to_string()), b.tokens, gold));
    }
    Dataset::new(task.clone(), examples)
}

pub fn write_conll(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if ex.id != i.to_string() {
            let _ = writeln!(out, "# id = {}", ex.id);
        }
        for (j, tok) in ex.token_slice().iter().enumerate() {
            match &ex.gold_labels {
                Some(g) => {
                    let _ = writeln!(out, "{tok}\t{}", g[j]);
                }
                None => {
                    let _ = writeln!(out, "{tok}");
                }
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct NliRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    premise: String,
    hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

pub fn parse_nli_jsonl(text: &str, task: &TaskSpec) -> Result<Dataset> {
    task.validate()?;
    if task.kind != TaskKind::PairClassification {
        return Err(Error::Validation(
            "NLI input requires a pair-classification task".into(),
        ));
    }
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: NliRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if let Some(l) = &rec.label {
            if !task.has_label(l) {
                return Err(Error::Validation(format!("unknown label {l:?} at line {}", idx + 1)));
            }
        }
        let id = rec.id.unwrap_or_else(|| examples.len().to_string());
        examples.push(Example::pair(id, rec.premise, rec.hypothesis, rec.label));
    }
    Dataset::new(task.clone(), examples)
}

pub fn write_nli_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let Input::Pair { premise, hypothesis } = &ex.input else {
            return Err(Error::Validation(format!("example {:?} is not a pair", ex.id)));
        };
        let rec = NliRecord {
            id: Some(ex.id.clone()),
            premise: premise.clone(),
            hypothesis: hypothesis.clone(),
            label: ex.gold_labels.as_ref().map(|g| g[0].clone()),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads a dataset file, choosing the format from the task kind.
pub fn read_dataset(path: &Path, task: &TaskSpec) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match task.kind {
        TaskKind::SequenceLabelling => parse_conll(&text, task),
        TaskKind::PairClassification => parse_nli_jsonl(&text, task),
    }
}

/// Serializes predictions in dataset order.
pub fn predictions_to_jsonl(dataset: &Dataset, preds: &[Prediction]) -> Result<String> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let mut out = String::new();
    for ex in &dataset.examples {
        let p = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| Error::MissingPrediction(ex.id.clone()))?;
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_predictions(dataset: &Dataset, preds: &[Prediction], path: &Path) -> Result<()> {
    let text = predictions_to_jsonl(dataset, preds)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

/// Reorders `preds` to dataset order, checking that ids match exactly.
pub fn align_predictions(dataset: &Dataset, preds: Vec<Prediction>) -> Result<Vec<Prediction>> {
    let mut by_id: HashMap<String, Prediction> = HashMap::with_capacity(preds.len());
    let mut dup = BTreeSet::new();
    for p in preds {
        let id = p.example_id.clone();
        if by_id.insert(id.clone(), p).is_some() {
            dup.insert(id);
        }
    }
    let missing: Vec<String> = dataset
        .examples
        .iter()
        .filter(|e| !by_id.contains_key(&e.id))
        .map(|e| e.id.clone())
        .collect();
    let known: HashSet<&str> = dataset.examples.iter().map(|e| e.id.as_str()).collect();
    let mut extra: BTreeSet<String> = by_id.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
    extra.extend(dup);
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::IdMismatch {
            missing,
            extra: extra.into_iter().collect(),
        });
    }
    let mut out = Vec::with_capacity(dataset.len());
    for ex in &dataset.examples {
        let p = by_id.remove(&ex.id).expect("checked above");
        if p.labels.len() != ex.label_len() {
            return Err(Error::Validation(format!(
                "prediction {:?}: {} labels for {} positions",
                ex.id,
                p.labels.len(),
                ex.label_len()
            )));
        }
        p.validate(&dataset.task)?;
        out.push(p);
    }
    Ok(out)
}
