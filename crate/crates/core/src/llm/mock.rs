//! Offline backends.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use super::{sha256_hex, Backend, Completion, LlmParams};
use crate::corpus::{Dataset, Input, TaskSpec};
use crate::error::{Error, Result};
use crate::prompt::{tagging_answer, PromptParts};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MockKind {
    EchoGold,
    CopyNearestExemplar,
    Scripted,
}

impl MockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MockKind::EchoGold => "echo-gold",
            MockKind::CopyNearestExemplar => "copy-nearest-exemplar",
            MockKind::Scripted => "scripted",
        }
    }
}

impl fmt::Display for MockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "echo-gold" => Ok(MockKind::EchoGold),
            "copy-nearest-exemplar" | "copy-nearest" => Ok(MockKind::CopyNearestExemplar),
            "scripted" => Ok(MockKind::Scripted),
            _ => Err(Error::Config(format!(
                "unknown mock {s:?} (expected echo-gold, copy-nearest-exemplar or scripted)"
            ))),
        }
    }
}

fn pair_key(premise: &str, hypothesis: &str) -> String {
    format!("{premise}\u{0}{hypothesis}")
}

/// Answers every query with its gold labels, looked up by query text.
/// When two examples share a text, the first one registered wins.
pub struct EchoGold {
    gold: HashMap<String, Vec<String>>,
}

impl EchoGold {
    pub fn new<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut gold = HashMap::new();
        for ds in datasets {
            for ex in &ds.examples {
                let Some(labels) = &ex.gold_labels else {
                    continue;
                };
                let key = match &ex.input {
                    Input::Tokens(t) => t.join(" "),
                    Input::Pair { premise, hypothesis } => pair_key(premise, hypothesis),
                };
                gold.entry(key).or_insert_with(|| labels.clone());
            }
        }
        EchoGold { gold }
    }
}

impl Backend for EchoGold {
    fn tag(&self) -> &str {
        "mock:echo-gold"
    }

    fn complete(&self, prompt: &str, _: &LlmParams) -> Result<Completion> {
        let unknown = || Error::Validation("echo-gold mock has no gold labels for this query".into());
        match PromptParts::parse(prompt)? {
            PromptParts::Tagging { query, .. } => {
                let labels = self.gold.get(&query.join(" ")).ok_or_else(unknown)?;
                Ok(Completion::text(tagging_answer(&query, labels)))
            }
            PromptParts::Nli { query, .. } => {
                let labels = self.gold.get(&pair_key(&query.0, &query.1)).ok_or_else(unknown)?;
                Ok(Completion::text(format!(" {}", labels[0])))
            }
        }
    }
}

/// Answers with the first exemplar's tags laid over the query tokens:
/// token `i` takes exemplar tag `i`, padded with the default label.
pub struct CopyNearestExemplar {
    task: TaskSpec,
}

impl CopyNearestExemplar {
    pub fn new(task: TaskSpec) -> Self {
        CopyNearestExemplar { task }
    }
}

impl Backend for CopyNearestExemplar {
    fn tag(&self) -> &str {
        "mock:copy-nearest-exemplar"
    }

    fn complete(&self, prompt: &str, _: &LlmParams) -> Result<Completion> {
        let none = || Error::Protocol("copy-nearest-exemplar needs at least one exemplar in the prompt".into());
        match PromptParts::parse(prompt)? {
            PromptParts::Tagging { exemplars, query } => {
                let (_, tags) = exemplars.first().ok_or_else(none)?;
                let labels: Vec<String> = (0..query.len())
                    .map(|i| tags.get(i).cloned().unwrap_or_else(|| self.task.default_label.clone()))
                    .collect();
                Ok(Completion::text(tagging_answer(&query, &labels)))
            }
            PromptParts::Nli { exemplars, .. } => {
                let (_, _, label) = exemplars.first().ok_or_else(none)?;
                Ok(Completion::text(format!(" {label}")))
            }
        }
    }
}

/// Replays responses keyed by the SHA-256 hex of the prompt.
pub struct Scripted {
    responses: BTreeMap<String, String>,
}

impl Scripted {
    pub fn new(responses: BTreeMap<String, String>) -> Self {
        Scripted { responses }
    }

    /// Reads a JSON object mapping prompt hash to response.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Scripted::new(serde_json::from_str(&text)?))
    }

    pub fn prompt_hash(prompt: &str) -> String {
        sha256_hex(prompt.as_bytes())
    }
}

impl Backend for Scripted {
    fn tag(&self) -> &str {
        "mock:scripted"
    }

    fn complete(&self, prompt: &str, _: &LlmParams) -> Result<Completion> {
        let hash = Self::prompt_hash(prompt);
        self.responses
            .get(&hash)
            .map(Completion::text)
            .ok_or(Error::ScriptMiss(hash))
    }
}

/// Records prompts and answers with an empty string. Never cached.
#[derive(Default)]
pub struct DryRun {
    prompts: Mutex<Vec<String>>,
}

impl DryRun {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }
}

impl Backend for DryRun {
    fn tag(&self) -> &str {
        "dry-run"
    }

    fn complete(&self, prompt: &str, _: &LlmParams) -> Result<Completion> {
        self.prompts.lock().expect("poisoned").push(prompt.to_string());
        Ok(Completion::text(""))
    }

    fn cacheable(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use crate::prompt::{parse_nli_response, parse_tagging_response, render_prompt};

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    fn pos_dataset() -> Dataset {
        let task = TaskSpec::upos("gsw");
        Dataset::new(
            task,
            vec![
                Example::tokens("a", toks("I bi da"), Some(toks("PRON AUX ADV"))),
                Example::tokens("b", toks("Mir gönd hei ."), Some(toks("PRON VERB ADV PUNCT"))),
            ],
        )
        .unwrap()
    }

    #[test]
    fn echo_gold_recovers_gold() {
        let ds = pos_dataset();
        let mock = EchoGold::new([&ds]);
        let ex = &ds.examples[1];
        let other = &ds.examples[0];
        let labels = other.gold_labels.clone().unwrap();
        let prompt = render_prompt(&ds.task, &[(other, &labels)], ex).unwrap();
        let resp = mock.complete(&prompt, &LlmParams::default()).unwrap().text;
        let parsed = parse_tagging_response(&resp, ex, &ds.task);
        assert_eq!(Some(parsed.labels), ex.gold_labels);
        assert!(parsed.repaired_positions.is_empty());
    }

    #[test]
    fn echo_gold_nli() {
        let task = TaskSpec::nli("gn");
        let ds = Dataset::new(
            task.clone(),
            vec![Example::pair("x", "p", "h", Some("contradiction".into()))],
        )
        .unwrap();
        let mock = EchoGold::new([&ds]);
        let prompt = render_prompt(&task, &[], &ds.examples[0]).unwrap();
        let resp = mock.complete(&prompt, &LlmParams::default()).unwrap().text;
        assert_eq!(parse_nli_response(&resp).unwrap(), "contradiction");
    }

    #[test]
    fn copy_nearest_identical_query() {
        let ds = pos_dataset();
        let mock = CopyNearestExemplar::new(ds.task.clone());
        let ex = &ds.examples[1];
        let labels = ex.gold_labels.clone().unwrap();
        let mut twin = ex.clone();
        twin.id = "twin".into();
        let prompt = render_prompt(&ds.task, &[(ex, &labels)], &twin).unwrap();
        let resp = mock.complete(&prompt, &LlmParams::default()).unwrap().text;
        assert_eq!(parse_tagging_response(&resp, &twin, &ds.task).labels, labels);
    }

    #[test]
    fn copy_nearest_pads_and_truncates() {
        let ds = pos_dataset();
        let mock = CopyNearestExemplar::new(ds.task.clone());
        let short = &ds.examples[0];
        let long = &ds.examples[1];
        let ls = short.gold_labels.clone().unwrap();
        let prompt = render_prompt(&ds.task, &[(short, &ls)], long).unwrap();
        let resp = mock.complete(&prompt, &LlmParams::default()).unwrap().text;
        assert_eq!(
            parse_tagging_response(&resp, long, &ds.task).labels,
            toks("PRON AUX ADV X")
        );

        let ll = long.gold_labels.clone().unwrap();
        let prompt = render_prompt(&ds.task, &[(long, &ll)], short).unwrap();
        let resp = mock.complete(&prompt, &LlmParams::default()).unwrap().text;
        assert_eq!(
            parse_tagging_response(&resp, short, &ds.task).labels,
            toks("PRON VERB ADV")
        );
    }

    #[test]
    fn copy_nearest_needs_an_exemplar() {
        let ds = pos_dataset();
        let mock = CopyNearestExemplar::new(ds.task.clone());
        let prompt = render_prompt(&ds.task, &[], &ds.examples[0]).unwrap();
        assert!(mock.complete(&prompt, &LlmParams::default()).is_err());
    }

    #[test]
    fn scripted_replay_and_miss() {
        let empty = Scripted::new(BTreeMap::new());
        let err = empty.complete("anything", &LlmParams::default()).unwrap_err();
        let Error::ScriptMiss(hash) = &err else {
            panic!("unexpected {err:?}");
        };
        assert_eq!(hash, &Scripted::prompt_hash("anything"));
        assert_eq!(err.exit_code(), 2);

        let mut map = BTreeMap::new();
        map.insert(Scripted::prompt_hash("p"), "Answer: neutral".to_string());
        let s = Scripted::new(map);
        assert_eq!(s.complete("p", &LlmParams::default()).unwrap().text, "Answer: neutral");
    }

    #[test]
    fn mock_names() {
        for k in [MockKind::EchoGold, MockKind::CopyNearestExemplar, MockKind::Scripted] {
            assert_eq!(k.as_str().parse::<MockKind>().unwrap(), k);
        }
        assert!("gpt".parse::<MockKind>().is_err());
    }
}
