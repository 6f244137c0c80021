//! Stage I labelling, Stage II re-labelling with selected in-language
//! exemplars, and the label-noise experiment.

mod config;
mod noise;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::{compute_thresholds, estimate_label_confidences, LabelConfidence, ThresholdTable};
use crate::corpus::{align_predictions, read_predictions, Dataset, Example, Prediction, TaskKind, TaskSpec};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::llm::{Gateway, LlmParams};
use crate::prompt::{parse_nli_response, parse_tagging_response, render_prompt};
use crate::selector::{select, Candidate, Relaxation, SelectionMode, SelectionProblem, SolverKind};

pub use config::{NoiseConfig, Paths, RunConfig, Stage1Mode, TaskConfig, TaskPreset};
pub use noise::{inject_noise, run_noise_experiment, NoisePoint, NoiseReport, NoiseRun, NoiseSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    IclStage1,
    Imported,
    Gold,
}

/// The target set with Stage I labels, used as the exemplar source for Stage II.
#[derive(Clone, Debug)]
pub struct ExemplarPool {
    pub dataset: Dataset,
    /// In dataset order.
    pub predictions: Vec<Prediction>,
    /// Present exactly when every prediction carried probabilities.
    pub confidences: Option<Vec<LabelConfidence>>,
    pub provenance: Provenance,
}

impl ExemplarPool {
    /// Predictions are matched to the dataset by id, in any order.
    pub fn new(dataset: Dataset, predictions: Vec<Prediction>, provenance: Provenance) -> Result<Self> {
        let predictions = align_predictions(&dataset, predictions)?;
        let with_probs = predictions.iter().filter(|p| p.probs.is_some()).count();
        let confidences = if with_probs == 0 {
            None
        } else if with_probs == predictions.len() {
            Some(
                predictions
                    .iter()
                    .map(estimate_label_confidences)
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            return Err(Error::Validation(format!(
                "{with_probs} of {} predictions carry probabilities; expected all or none",
                predictions.len()
            )));
        };
        Ok(ExemplarPool {
            dataset,
            predictions,
            confidences,
            provenance,
        })
    }

    /// Gold labels as the pool (the skyline).
    pub fn gold(dataset: Dataset) -> Result<Self> {
        let preds = dataset.gold_predictions()?;
        Self::new(dataset, preds, Provenance::Gold)
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Per-label thresholds at `percentile`, minus the task's excluded labels.
    pub fn thresholds(&self, percentile: f64) -> Result<Option<ThresholdTable>> {
        match &self.confidences {
            None => Ok(None),
            Some(c) => Ok(Some(
                compute_thresholds(c, percentile)?.without_labels(&self.dataset.task.threshold_exclude),
            )),
        }
    }
}

pub fn import_stage1(pred_file: &Path, target: &Dataset) -> Result<ExemplarPool> {
    let preds = read_predictions(pred_file)?;
    ExemplarPool::new(target.clone(), preds, Provenance::Imported)
}

/// Per-query record of what went into the prompt and how the answer parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SelectionMode>,
    /// Exemplars in prompt order.
    pub exemplar_ids: Vec<String>,
    pub similarities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relaxations: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repaired_positions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLine {
    pub id: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueryFailure {
    pub id: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    /// In dataset order.
    pub predictions: Vec<Prediction>,
    pub traces: Vec<QueryTrace>,
    pub prompts: Vec<PromptLine>,
    /// Queries whose completion failed or could not be parsed; they carry default labels.
    pub failures: Vec<QueryFailure>,
}

impl StageOutput {
    /// Queries that failed at the gateway rather than in parsing.
    pub fn gateway_failures(&self) -> usize {
        self.failures.iter().filter(|f| f.exit_code == 2).count()
    }
}

struct Labelled {
    prediction: Prediction,
    repaired: Vec<usize>,
    error: Option<Error>,
    prompt: String,
}

fn label_query(
    task: &TaskSpec,
    exemplars: &[(&Example, &[String])],
    query: &Example,
    gateway: &Gateway,
    params: &LlmParams,
) -> Result<Labelled> {
    let prompt = render_prompt(task, exemplars, query)?;
    let n = query.label_len();
    let defaults = || vec![task.default_label.clone(); n];
    let (labels, repaired, error) = match gateway.complete(&prompt, params) {
        Ok(resp) => match task.kind {
            TaskKind::SequenceLabelling => {
                let parsed = parse_tagging_response(&resp, query, task);
                (parsed.labels, parsed.repaired_positions, None)
            }
            TaskKind::PairClassification => match parse_nli_response(&resp) {
                Ok(l) if task.has_label(&l) => (vec![l], Vec::new(), None),
                Ok(l) => (defaults(), vec![0], Some(Error::UnparseableResponse(l))),
                Err(e) => (defaults(), vec![0], Some(e)),
            },
        },
        Err(e) => {
            log::warn!("query {:?}: {e}; using default labels", query.id);
            (defaults(), (0..n).collect(), Some(e))
        }
    };
    if !repaired.is_empty() {
        log::debug!("query {:?}: repaired positions {:?}", query.id, repaired);
    }
    Ok(Labelled {
        prediction: Prediction::new(query.id.clone(), labels),
        repaired,
        error,
        prompt,
    })
}

fn assemble(items: Vec<(Labelled, QueryTrace)>) -> StageOutput {
    let mut out = StageOutput::default();
    for (l, mut trace) in items {
        if let Some(e) = &l.error {
            trace.error = Some(e.to_string());
            out.failures.push(QueryFailure {
                id: l.prediction.example_id.clone(),
                message: e.to_string(),
                exit_code: e.exit_code(),
            });
        }
        trace.repaired_positions = l.repaired;
        out.prompts.push(PromptLine {
            id: l.prediction.example_id.clone(),
            prompt: l.prompt,
        });
        out.predictions.push(l.prediction);
        out.traces.push(trace);
    }
    out
}

/// Keeps the first error in dataset order so failures are reproducible.
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Labels every target example using its `k` most similar source examples.
pub fn run_stage1_icl(
    target: &Dataset,
    source: &Dataset,
    target_store: &EmbeddingStore,
    source_store: &EmbeddingStore,
    gateway: &Gateway,
    params: &LlmParams,
    k: usize,
) -> Result<StageOutput> {
    if !source.is_labelled() {
        return Err(Error::Validation("source examples must be labelled".into()));
    }
    if k == 0 || k > source.len() {
        return Err(Error::Config(format!(
            "k = {k} but the source has {} examples",
            source.len()
        )));
    }
    let task = &target.task;
    let params = params.resolved(task);
    let source_ids: Vec<String> = source.examples.iter().map(|e| e.id.clone()).collect();
    let by_id = source.index_of();

    let results: Vec<Result<(Labelled, QueryTrace)>> = target
        .examples
        .par_iter()
        .map(|q| {
            let ranked = source_store.rank(target_store.get(&q.id)?, &source_ids, None)?;
            let top = &ranked[..k];
            let exemplars: Vec<(&Example, &[String])> = top
                .iter()
                .map(|(id, _)| {
                    let ex = &source.examples[by_id[id.as_str()]];
                    (ex, ex.gold_labels.as_deref().expect("checked labelled"))
                })
                .collect();
            let labelled = label_query(task, &exemplars, q, gateway, &params)?;
            let trace = QueryTrace {
                query_id: q.id.clone(),
                mode: None,
                exemplar_ids: top.iter().map(|(id, _)| id.clone()).collect(),
                similarities: top.iter().map(|(_, s)| *s).collect(),
                objective: None,
                relaxations: Vec::new(),
                repaired_positions: Vec::new(),
                error: None,
            };
            Ok((labelled, trace))
        })
        .collect();
    Ok(assemble(first_error(results)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Settings {
    pub k: usize,
    pub percentile: f64,
    pub mode: SelectionMode,
    pub relaxation: Relaxation,
    pub solver: SolverKind,
    pub seed: Option<u64>,
    pub params: LlmParams,
}

impl Stage2Settings {
    pub fn from_config(config: &RunConfig) -> Self {
        Stage2Settings {
            k: config.k,
            percentile: config.percentile,
            mode: config.selector_mode,
            relaxation: Relaxation::Ladder,
            solver: SolverKind::Auto,
            seed: config.seed,
            params: config.stage2_llm.clone(),
        }
    }
}

/// Seed for one query's random draw, stable under reordering of the dataset.
pub fn query_seed(seed: u64, query_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Builds the selection problem for pool example `j` over every other example.
pub fn selection_problem(
    pool: &ExemplarPool,
    store: &EmbeddingStore,
    j: usize,
    thresholds: Option<&ThresholdTable>,
    settings: &Stage2Settings,
) -> Result<SelectionProblem> {
    let query = &pool.dataset.examples[j];
    let qv = store.get(&query.id)?;
    let candidates = pool
        .dataset
        .examples
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != j)
        .map(|(i, ex)| {
            Ok(Candidate {
                id: ex.id.clone(),
                sim: crate::embedding::cosine(qv, store.get(&ex.id)?)?,
                labels: pool.predictions[i].labels.clone(),
                confidence: pool.confidences.as_ref().map(|c| c[i].clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut problem = SelectionProblem::new(query.id.clone(), candidates, settings.k);
    problem.coverage_labels = pool.dataset.task.coverage().to_vec();
    problem.thresholds = thresholds.cloned();
    problem.mode = settings.mode;
    problem.relaxation = settings.relaxation;
    problem.solver = settings.solver;
    Ok(problem)
}

/// Selects exemplars for every pool example without labelling anything.
pub fn select_all(pool: &ExemplarPool, store: &EmbeddingStore, settings: &Stage2Settings) -> Result<Vec<QueryTrace>> {
    if pool.len() <= settings.k {
        return Err(Error::Config(format!(
            "k = {} needs more than {} pool examples",
            settings.k,
            pool.len()
        )));
    }
    if settings.mode == SelectionMode::Random && settings.seed.is_none() {
        return Err(Error::Config("random selector mode requires a seed".into()));
    }
    let thresholds = pool.thresholds(settings.percentile)?;
    let results: Vec<Result<QueryTrace>> = (0..pool.len())
        .into_par_iter()
        .map(|j| {
            let problem = selection_problem(pool, store, j, thresholds.as_ref(), settings)?;
            let seed = settings.seed.map(|s| query_seed(s, &problem.query_id));
            let result = select(&problem, seed)?;
            let sims: HashMap<&str, f64> = problem.candidates.iter().map(|c| (c.id.as_str(), c.sim)).collect();
            Ok(QueryTrace {
                query_id: result.query_id.clone(),
                mode: Some(result.mode),
                similarities: result.chosen_ids.iter().map(|id| sims[id.as_str()]).collect(),
                exemplar_ids: result.chosen_ids,
                objective: Some(result.objective),
                relaxations: result.relaxations,
                repaired_positions: Vec::new(),
                error: None,
            })
        })
        .collect();
    first_error(results)
}

/// Re-labels every pool example with exemplars drawn from the rest of the pool.
pub fn run_stage2_ssp(
    pool: &ExemplarPool,
    store: &EmbeddingStore,
    gateway: &Gateway,
    settings: &Stage2Settings,
) -> Result<StageOutput> {
    let traces = select_all(pool, store, settings)?;
    let task = &pool.dataset.task;
    let params = settings.params.resolved(task);
    let by_id = pool.dataset.index_of();
    let results: Vec<Result<(Labelled, QueryTrace)>> = traces
        .into_par_iter()
        .enumerate()
        .map(|(j, trace)| {
            let exemplars: Vec<(&Example, &[String])> = trace
                .exemplar_ids
                .iter()
                .map(|id| {
                    let i = by_id[id.as_str()];
                    (&pool.dataset.examples[i], pool.predictions[i].labels.as_slice())
                })
                .collect();
            let labelled = label_query(task, &exemplars, &pool.dataset.examples[j], gateway, &params)?;
            Ok((labelled, trace))
        })
        .collect();
    Ok(assemble(first_error(results)?))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CopyNearestExemplar, EchoGold};

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    /// Pairs of near-identical sentences; each sentence's nearest neighbour
    /// is its twin, which carries the same tags.
    fn twins() -> (Dataset, EmbeddingStore) {
        let task = TaskSpec::upos("gsw");
        let rows = [
            ("a", "I gang hei", "PRON VERB ADV"),
            ("b", "Mir gönd hei", "PRON VERB ADV"),
            ("c", "Das Huus isch gross", "DET NOUN AUX ADJ"),
            ("d", "Die Stadt isch schön", "DET NOUN AUX ADJ"),
            ("e", "Er lacht .", "PRON VERB PUNCT"),
            ("f", "Si singt .", "PRON VERB PUNCT"),
        ];
        let examples = rows
            .iter()
            .map(|(id, w, t)| Example::tokens(*id, toks(w), Some(toks(t))))
            .collect();
        let ds = Dataset::new(task, examples).unwrap();
        let mut store = EmbeddingStore::new();
        for (i, (id, _, _)) in rows.iter().enumerate() {
            let group = (i / 2) as f64;
            let twin = (i % 2) as f64 * 0.05;
            store.insert(*id, vec![1.0, group, twin]).unwrap();
        }
        (ds, store)
    }

    fn settings(k: usize, mode: SelectionMode) -> Stage2Settings {
        Stage2Settings {
            k,
            percentile: 80.0,
            mode,
            relaxation: Relaxation::Ladder,
            solver: SolverKind::Auto,
            seed: Some(3),
            params: LlmParams::default(),
        }
    }

    #[test]
    fn pool_confidences_iff_probs() {
        let (ds, _) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        assert!(pool.confidences.is_none());
        let mut preds = ds.gold_predictions().unwrap();
        for p in &mut preds {
            p.probs = Some(vec![0.9; p.labels.len()]);
        }
        preds.reverse();
        let pool = ExemplarPool::new(ds.clone(), preds.clone(), Provenance::Imported).unwrap();
        assert_eq!(pool.confidences.as_ref().unwrap().len(), 6);
        assert_eq!(pool.predictions[0].example_id, "a");
        preds[0].probs = None;
        assert!(ExemplarPool::new(ds, preds, Provenance::Imported).is_err());
    }

    #[test]
    fn stage2_never_uses_the_query() {
        let (ds, store) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(EchoGold::new([&ds])), None, 2);
        let out = run_stage2_ssp(&pool, &store, &gw, &settings(3, SelectionMode::Full)).unwrap();
        assert_eq!(gw.stats().backend_calls, 6);
        for (t, p) in out.traces.iter().zip(&out.prompts) {
            assert_eq!(t.exemplar_ids.len(), 3);
            assert!(!t.exemplar_ids.contains(&t.query_id));
            assert_eq!(p.prompt.matches("Sentence: ").count(), 4);
        }
        assert_eq!(out.predictions, ds.gold_predictions().unwrap());
        assert!(out.failures.is_empty());
    }

    #[test]
    fn copy_nearest_with_clean_twins() {
        let (ds, store) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(CopyNearestExemplar::new(ds.task.clone())), None, 2);
        let out = run_stage2_ssp(&pool, &store, &gw, &settings(2, SelectionMode::SimilarityOnly)).unwrap();
        assert_eq!(out.predictions, ds.gold_predictions().unwrap());
        for t in &out.traces {
            let twin = match t.query_id.as_str() {
                "a" => "b",
                "b" => "a",
                "c" => "d",
                "d" => "c",
                "e" => "f",
                _ => "e",
            };
            assert_eq!(t.exemplar_ids[0], twin);
        }
    }

    #[test]
    fn k_must_leave_room() {
        let (ds, store) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(EchoGold::new([&ds])), None, 1);
        let err = run_stage2_ssp(&pool, &store, &gw, &settings(6, SelectionMode::Full)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn missing_embedding_is_reported() {
        let (ds, _) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(EchoGold::new([&ds])), None, 1);
        let err = run_stage2_ssp(&pool, &EmbeddingStore::new(), &gw, &settings(2, SelectionMode::Full)).unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding(_)));
    }

    #[test]
    fn exhausted_ladder_aborts_the_run() {
        // two exemplars cannot cover the eight labels in the pool
        let (ds, store) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(EchoGold::new([&ds])), None, 1);
        let err = run_stage2_ssp(&pool, &store, &gw, &settings(2, SelectionMode::Full)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(gw.stats().backend_calls, 0);
    }

    #[test]
    fn stage1_k1_single_source() {
        let (ds, store) = twins();
        let source = Dataset::new(ds.task.clone(), vec![ds.examples[0].clone()]).unwrap();
        let gw = Gateway::new(Box::new(CopyNearestExemplar::new(ds.task.clone())), None, 2);
        let out = run_stage1_icl(&ds, &source, &store, &store, &gw, &LlmParams::default(), 1).unwrap();
        assert!(out.traces.iter().all(|t| t.exemplar_ids == ["a"]));
        assert_eq!(out.predictions.len(), 6);
    }

    #[test]
    fn gateway_failures_default_and_flag() {
        let (ds, store) = twins();
        let pool = ExemplarPool::gold(ds.clone()).unwrap();
        let gw = Gateway::new(Box::new(crate::llm::Scripted::new(Default::default())), None, 1);
        let out = run_stage2_ssp(&pool, &store, &gw, &settings(3, SelectionMode::Full)).unwrap();
        assert_eq!(out.gateway_failures(), 6);
        assert!(out.predictions.iter().all(|p| p.labels.iter().all(|l| l == "X")));
        assert!(out.traces.iter().all(|t| t.error.is_some()));
    }

    #[test]
    fn query_seeds_differ() {
        assert_ne!(query_seed(1, "a"), query_seed(1, "b"));
        assert_ne!(query_seed(1, "a"), query_seed(2, "a"));
        assert_eq!(query_seed(1, "a"), query_seed(1, "a"));
    }
}
