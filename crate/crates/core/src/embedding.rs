//! Per-example embedding vectors and cosine-similarity retrieval.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Duration;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};

pub fn cosine<T: Float>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    let c = dot / (nu.sqrt() * nv.sqrt());
    Ok(c.max(-T::one()).min(T::one()))
}

/// Descending score, ascending id.
pub(crate) fn by_score_then_id<T: PartialOrd>(a: &(String, T), b: &(String, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore<T: Float = f64> {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for EmbeddingStore<T> {
    fn default() -> Self {
        EmbeddingStore {
            dim: 0,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Float> EmbeddingStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dimension of the stored vectors; 0 while empty.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Inserts or replaces a vector. The first vector fixes the dimension.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<T>) -> Result<()> {
        let id = id.into();
        if vector.is_empty() {
            return Err(Error::DegenerateEmbedding(format!("{id}: empty vector")));
        }
        if self.ids.is_empty() {
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateEmbedding(format!("{id}: non-finite component")));
        }
        match self.index.get(&id) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[T]> {
        self.index
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn similarity(&self, a: &str, b: &str) -> Result<T> {
        cosine(self.get(a)?, self.get(b)?).map_err(|e| match e {
            Error::DegenerateEmbedding(_) => Error::DegenerateEmbedding(format!("{a} / {b}")),
            e => e,
        })
    }

    /// Scores every pool id (except `exclude`) against `query`, sorted by
    /// descending score with ties broken by id.
    pub fn rank(&self, query: &[T], pool_ids: &[String], exclude: Option<&str>) -> Result<Vec<(String, T)>> {
        let mut scored = Vec::with_capacity(pool_ids.len());
        for id in pool_ids {
            if Some(id.as_str()) == exclude {
                continue;
            }
            let s = cosine(query, self.get(id)?).map_err(|e| match e {
                Error::DegenerateEmbedding(_) => Error::DegenerateEmbedding(id.clone()),
                e => e,
            })?;
            scored.push((id.clone(), s));
        }
        scored.sort_by(by_score_then_id);
        Ok(scored)
    }

    pub fn top_k(&self, query_id: &str, pool_ids: &[String], k: usize) -> Result<Vec<(String, T)>> {
        let query = self.get(query_id)?;
        let mut ranked = self.rank(query, pool_ids, Some(query_id))?;
        if k > ranked.len() {
            return Err(Error::InvalidProblem(format!(
                "k = {k} exceeds the {} pool entries other than the query",
                ranked.len()
            )));
        }
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Restriction to the given ids, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let mut out = Self::new();
        for id in ids {
            out.insert(id.clone(), self.get(id)?.to_vec())?;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f64>,
}

impl<T: Float> EmbeddingStore<T> {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            let line = EmbeddingLine {
                id: id.clone(),
                vector: v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let v = rec.vector.iter().map(|&x| T::from(x).unwrap_or_else(T::nan)).collect();
            store.insert(rec.id, v)?;
        }
        Ok(store)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Full URL of an OpenAI-compatible `/embeddings` endpoint.
    pub url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_batch_size() -> usize {
    64
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}

pub struct EmbeddingClient {
    config: EmbeddingConfig,
    http: JsonClient,
    batches: AtomicUsize,
}

impl EmbeddingClient {
    pub fn new(config: EmbeddingConfig, api_key: Option<String>) -> Self {
        let http = JsonClient::new(Duration::from_secs(config.timeout_secs), api_key, config.retry.clone());
        EmbeddingClient {
            config,
            http,
            batches: AtomicUsize::new(0),
        }
    }

    /// Successful batch calls so far.
    pub fn batch_count(&self) -> usize {
        self.batches.load(AtomicOrdering::SeqCst)
    }

    pub fn request_count(&self) -> usize {
        self.http.request_count()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.config.model, "input": texts });
        let resp = self.http.post_json(&self.config.url, &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("embedding response lacks a data array".into()))?;
        if data.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "sent {} inputs, received {} embeddings",
                texts.len(),
                data.len()
            )));
        }
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let slot = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let vec: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Protocol("embedding item lacks an embedding array".into()))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| Error::Protocol("non-numeric component".into()))
                })
                .collect::<Result<_>>()?;
            match out.get_mut(slot) {
                Some(s @ None) => *s = Some(vec),
                _ => return Err(Error::Protocol(format!("bad or repeated index {slot}"))),
            }
        }
        self.batches.fetch_add(1, AtomicOrdering::SeqCst);
        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }
}

/// Embeds `(id, text)` items. Identical texts are sent once and share a vector.
pub fn fetch_embeddings(client: &EmbeddingClient, items: &[(String, String)]) -> Result<EmbeddingStore<f64>> {
    let mut unique: Vec<String> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (_, text) in items {
        if !seen.contains_key(text.as_str()) {
            seen.insert(text, unique.len());
            unique.push(text.clone());
        }
    }
    let batch_size = client.config.batch_size.max(1);
    let batches: Vec<&[String]> = unique.chunks(batch_size).collect();
    type Slot = Option<Result<Vec<Vec<f64>>>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = client.config.max_concurrency.max(1).min(batches.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let b = next.fetch_add(1, AtomicOrdering::SeqCst);
                if b >= batches.len() {
                    break;
                }
                let r = client.embed_batch(batches[b]);
                let failed = r.is_err();
                results.lock().expect("poisoned")[b] = Some(r);
                if failed {
                    next.store(batches.len(), AtomicOrdering::SeqCst);
                }
            });
        }
    });

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(unique.len());
    for r in results.into_inner().expect("poisoned").into_iter().flatten() {
        vectors.extend(r?);
    }
    if vectors.len() != unique.len() {
        return Err(Error::Protocol("embedding batches did not complete".into()));
    }
    let mut store = EmbeddingStore::new();
    for (id, text) in items {
        store.insert(id.clone(), vectors[seen[text.as_str()]].clone())?;
    }
    Ok(store)
}

/// Loads `path` if present, embeds whichever items it lacks, and rewrites the
/// file in item order. A complete file means no network traffic.
pub fn load_or_fetch(
    client: Option<&EmbeddingClient>,
    items: &[(String, String)],
    path: &Path,
) -> Result<EmbeddingStore<f64>> {
    let existing = if path.exists() {
        EmbeddingStore::<f64>::read(path)?
    } else {
        EmbeddingStore::new()
    };
    let missing: Vec<(String, String)> = items.iter().filter(|(id, _)| !existing.contains(id)).cloned().collect();
    if missing.is_empty() {
        let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
        return existing.subset(&ids);
    }
    let client = client.ok_or_else(|| {
        Error::Config(format!(
            "{} lacks {} embeddings and no embedding endpoint is configured",
            path.display(),
            missing.len()
        ))
    })?;
    let fetched = fetch_embeddings(client, &missing)?;
    let mut store = EmbeddingStore::new();
    let mut done = HashSet::new();
    for (id, _) in items {
        if !done.insert(id.as_str()) {
            continue;
        }
        let v = if fetched.contains(id) {
            fetched.get(id)?
        } else {
            existing.get(id)?
        };
        store.insert(id.clone(), v.to_vec())?;
    }
    store.write(path)?;
    Ok(store)
}
