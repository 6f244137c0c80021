//! Seeded synthetic corpora for offline runs.
//!
//! Target sentences come in twin pairs: two sentences with the same tags and
//! nearly the same embedding, one word apart, so each sentence's nearest
//! neighbour is its twin. Source sentences are unrelated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dataset, Example, TaskKind, TaskSpec};
use crate::embedding::EmbeddingStore;
use crate::error::Result;

pub struct SynthCorpus {
    pub target: Dataset,
    pub source: Dataset,
    pub target_store: EmbeddingStore,
    pub source_store: EmbeddingStore,
}

const DIM: usize = 32;

fn random_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn nudge(v: &[f64], rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
    v.iter().map(|x| x + rng.random_range(-scale..scale)).collect()
}

/// Random valid labels of length `len`; BIO tagsets get well-formed spans.
pub fn random_labels(task: &TaskSpec, len: usize, rng: &mut impl Rng) -> Vec<String> {
    if task.kind == TaskKind::PairClassification {
        return vec![task.labels[rng.random_range(0..task.labels.len())].clone()];
    }
    if !task.is_bio() {
        return (0..len)
            .map(|_| task.labels[rng.random_range(0..task.labels.len())].clone())
            .collect();
    }
    let types: Vec<&str> = task.labels.iter().filter_map(|l| l.strip_prefix("B-")).collect();
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if rng.random_bool(0.5) {
            out.push(task.default_label.clone());
        } else {
            let ty = types[rng.random_range(0..types.len())];
            out.push(format!("B-{ty}"));
            let extra = rng.random_range(0..3);
            for _ in 0..extra {
                if out.len() < len {
                    out.push(format!("I-{ty}"));
                }
            }
        }
    }
    out
}

fn word(rng: &mut ChaCha8Rng) -> String {
    const SYL: [&str; 12] = ["ka", "ni", "mo", "ru", "te", "sa", "lo", "bi", "ze", "wu", "da", "gy"];
    let n = rng.random_range(1..4);
    (0..n).map(|_| SYL[rng.random_range(0..SYL.len())]).collect()
}

/// `len` distinct words.
pub fn sentence(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(len);
    while out.len() < len {
        let w = word(rng);
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn example(task: &TaskSpec, id: String, rng: &mut ChaCha8Rng, labels: Vec<String>) -> Example {
    match task.kind {
        TaskKind::SequenceLabelling => Example::tokens(id, sentence(rng, labels.len()), Some(labels)),
        TaskKind::PairClassification => {
            let p = sentence(rng, 5).join(" ");
            let h = sentence(rng, 4).join(" ");
            Example::pair(id, p, h, labels.into_iter().next())
        }
    }
}

/// `pairs` twin pairs in the target (ids `t000a`, `t000b`, ...) and
/// `n_source` source sentences (ids `s000`, ...).
pub fn twin_corpus(task: &TaskSpec, pairs: usize, n_source: usize, seed: u64) -> Result<SynthCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = Vec::with_capacity(2 * pairs);
    let mut target_store = EmbeddingStore::new();
    for p in 0..pairs {
        let len = rng.random_range(3..9);
        let labels = random_labels(task, len, &mut rng);
        let a = example(task, format!("t{p:03}a"), &mut rng, labels);
        let mut b = a.clone();
        b.id = format!("t{p:03}b");
        match &mut b.input {
            crate::corpus::Input::Tokens(t) => {
                let i = rng.random_range(0..t.len());
                t[i] = format!("{}x", t[i]);
            }
            crate::corpus::Input::Pair { hypothesis, .. } => hypothesis.push_str(" x"),
        }
        let v = random_vector(&mut rng);
        target_store.insert(a.id.clone(), nudge(&v, &mut rng, 0.01))?;
        target_store.insert(b.id.clone(), nudge(&v, &mut rng, 0.01))?;
        target.push(a);
        target.push(b);
    }
    let mut source = Vec::with_capacity(n_source);
    let mut source_store = EmbeddingStore::new();
    for s in 0..n_source {
        let len = rng.random_range(3..9);
        let labels = random_labels(task, len, &mut rng);
        let ex = example(task, format!("s{s:03}"), &mut rng, labels);
        source_store.insert(ex.id.clone(), random_vector(&mut rng))?;
        source.push(ex);
    }
    Ok(SynthCorpus {
        target: Dataset::new(task.clone(), target)?,
        source: Dataset::new(task.clone(), source)?,
        target_store,
        source_store,
    })
}
