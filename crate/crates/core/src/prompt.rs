//! Prompt rendering and verbalizers.
//!
//! Tagging prompts show each exemplar as a `Sentence:` line followed by a
//! fenced block of `word<TAB>tag` lines; the query ends with an open fence
//! for the model to fill. NLI prompts use one `Premise: .. , Hypothesis: .. ,`
//! line and an `Answer:` line per exemplar.

use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;

use crate::corpus::{Example, Input, TaskKind, TaskSpec};
use crate::error::{Error, Result};

const NER_DESCRIPTION: &str = "Tag the following sentence according to the BIO scheme for the NER task, using the tags PER (person), LOC (location), ORG (organization) and DATE (date). Follow the format specified in the examples below:";

const POS_DESCRIPTION: &str = "Tag the following sentence according to the Part of Speech (POS) of each word. The valid tags are ADJ, ADP, ADV, AUX, CCONJ, DET, INTJ, NOUN, NUM, PART, PRON, PROPN, PUNCT, SCONJ, SYM, VERB, X. Follow the format specified in the examples below:";

const NLI_DESCRIPTION: &str = "You are an NLP assistant whose purpose is to solve Natural Language Inference (NLI) problems. NLI is the task of determining the inference relation between two (short, ordered) texts: entailment, contradiction, or neutral. Answer as concisely as possible in the same format as the examples below:";

const FENCE: &str = "```";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateId {
    Ner,
    Pos,
    Nli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub task_description: &'static str,
}

impl PromptTemplate {
    pub fn for_task(task: &TaskSpec) -> Result<Self> {
        let (id, task_description, kind) = match task.template_id.as_str() {
            "ner" => (TemplateId::Ner, NER_DESCRIPTION, TaskKind::SequenceLabelling),
            "pos" => (TemplateId::Pos, POS_DESCRIPTION, TaskKind::SequenceLabelling),
            "nli" => (TemplateId::Nli, NLI_DESCRIPTION, TaskKind::PairClassification),
            other => return Err(Error::Config(format!("unknown template id {other:?}"))),
        };
        if kind != task.kind {
            return Err(Error::Config(format!(
                "template {:?} does not fit a {:?} task",
                task.template_id, task.kind
            )));
        }
        Ok(PromptTemplate { id, task_description })
    }
}

/// Renders a prompt from exemplars (already in display order) and a query.
pub fn render_prompt(task: &TaskSpec, exemplars: &[(&Example, &[String])], query: &Example) -> Result<String> {
    let template = PromptTemplate::for_task(task)?;
    let mut out = String::with_capacity(256 + 128 * exemplars.len());
    out.push_str(template.task_description);
    out.push('\n');
    for (ex, labels) in exemplars {
        if labels.len() != ex.label_len() {
            return Err(Error::Validation(format!(
                "exemplar {:?}: {} labels for {} positions",
                ex.id,
                labels.len(),
                ex.label_len()
            )));
        }
        match &ex.input {
            Input::Tokens(tokens) => {
                out.push_str("Sentence: ");
                out.push_str(&tokens.join(" "));
                out.push_str("\nTags:\n");
                out.push_str(FENCE);
                out.push('\n');
                out.push_str(&tag_lines(tokens, labels));
                out.push_str(FENCE);
                out.push('\n');
            }
            Input::Pair { premise, hypothesis } => {
                out.push_str(&format!(
                    "Premise: {premise} , Hypothesis: {hypothesis} ,\nAnswer: {}\n",
                    labels[0]
                ));
            }
        }
    }
    match &query.input {
        Input::Tokens(tokens) => {
            out.push_str("Sentence: ");
            out.push_str(&tokens.join(" "));
            out.push_str("\nTags:\n");
            out.push_str(FENCE);
            out.push('\n');
        }
        Input::Pair { premise, hypothesis } => {
            out.push_str(&format!("Premise: {premise} , Hypothesis: {hypothesis} ,\nAnswer:"));
        }
    }
    Ok(out)
}

fn tag_lines(tokens: &[String], labels: &[String]) -> String {
    let mut s = String::new();
    for (w, t) in tokens.iter().zip(labels) {
        s.push_str(w);
        s.push('\t');
        s.push_str(t);
        s.push('\n');
    }
    s
}

/// The completion a perfect model would return for a tagging query.
pub fn tagging_answer(tokens: &[String], labels: &[String]) -> String {
    let mut s = tag_lines(tokens, labels);
    s.push_str(FENCE);
    s
}

/// Longest common subsequence of two word sequences as strictly increasing
/// `(generated, reference)` index pairs. Among maximum alignments, the one
/// whose reference indices are lexicographically smallest.
pub fn lcs_align<S: PartialEq>(generated: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let (n, m) = (generated.len(), reference.len());
    let w = m + 1;
    // table[i * w + j] = LCS length of generated[i..] and reference[j..]
    let mut table = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i * w + j] = if generated[i] == reference[j] {
                table[(i + 1) * w + j + 1] + 1
            } else {
                table[(i + 1) * w + j].max(table[i * w + j + 1])
            };
        }
    }
    let mut out = Vec::with_capacity(table[0] as usize);
    let (mut i, mut j) = (0, 0);
    while table[i * w + j] > 0 {
        let need = table[i * w + j] - 1;
        let next = (j..m).find_map(|jj| {
            (i..n)
                .find(|&ii| generated[ii] == reference[jj] && table[(ii + 1) * w + jj + 1] == need)
                .map(|ii| (ii, jj))
        });
        let (ii, jj) = next.expect("a positive table entry has a witness");
        out.push((ii, jj));
        i = ii + 1;
        j = jj + 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParsedResponse {
    pub labels: Vec<String>,
    /// Positions that received the default tag.
    pub repaired_positions: Vec<usize>,
    /// Generated pairs left outside the alignment.
    pub surplus_pairs: usize,
    pub raw: String,
}

/// Extracts `word<TAB>tag` pairs, skipping fences, the `Tags:` header and prose.
pub fn extract_pairs(response: &str) -> Vec<(String, String)> {
    response
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| {
            let t = l.trim();
            !t.starts_with(FENCE) && t != "Tags:"
        })
        .filter_map(|l| {
            let (w, t) = l.split_once('\t')?;
            let w = w.trim();
            (!w.is_empty()).then(|| (w.to_string(), t.trim().to_string()))
        })
        .collect()
}

/// Maps a free-form tagging completion onto the query tokens. Total: the
/// result always has one label per token, defaulted where unrecoverable.
pub fn parse_tagging_response(response: &str, query: &Example, task: &TaskSpec) -> ParsedResponse {
    let tokens = query.token_slice();
    let pairs = extract_pairs(response);
    let words: Vec<&str> = pairs.iter().map(|(w, _)| w.as_str()).collect();
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let alignment = lcs_align(&words, &refs);

    let mut labels = vec![None; tokens.len()];
    for &(g, r) in &alignment {
        let tag = &pairs[g].1;
        if task.has_label(tag) {
            labels[r] = Some(tag.clone());
        }
    }
    let mut repaired_positions = Vec::new();
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.unwrap_or_else(|| {
                repaired_positions.push(i);
                task.default_label.clone()
            })
        })
        .collect();
    ParsedResponse {
        labels,
        repaired_positions,
        surplus_pairs: pairs.len() - alignment.len(),
        raw: response.to_string(),
    }
}

fn nli_label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(entailment|contradiction|neutral)\b").expect("valid regex"))
}

fn answer_prefix_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer\s*:").expect("valid regex"))
}

/// Finds the first NLI label word (case-insensitive, whole word), looking
/// after an `Answer:` marker when there is one.
pub fn parse_nli_response(response: &str) -> Result<String> {
    let tail = answer_prefix_regex()
        .find(response)
        .map(|m| &response[m.end()..])
        .unwrap_or(response);
    nli_label_regex()
        .find(tail)
        .or_else(|| nli_label_regex().find(response))
        .map(|m| m.as_str().to_lowercase())
        .ok_or_else(|| Error::UnparseableResponse(response.to_string()))
}

/// A rendered prompt taken apart again; used by the offline backends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptParts {
    Tagging {
        exemplars: Vec<(Vec<String>, Vec<String>)>,
        query: Vec<String>,
    },
    Nli {
        exemplars: Vec<(String, String, String)>,
        query: (String, String),
    },
}

impl PromptParts {
    pub fn parse(prompt: &str) -> Result<Self> {
        if prompt.starts_with(NLI_DESCRIPTION) {
            Self::parse_nli(prompt)
        } else {
            Self::parse_tagging(prompt)
        }
    }

    fn parse_tagging(prompt: &str) -> Result<Self> {
        let mut exemplars = Vec::new();
        let mut query = None;
        let mut lines = prompt.lines().peekable();
        while let Some(line) = lines.next() {
            let Some(sentence) = line.strip_prefix("Sentence: ") else {
                continue;
            };
            if lines.next() != Some("Tags:") || lines.next() != Some(FENCE) {
                return Err(Error::Protocol("malformed tagging block".into()));
            }
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            let mut closed = false;
            for l in lines.by_ref() {
                if l == FENCE {
                    closed = true;
                    break;
                }
                let (w, t) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::Protocol(format!("bad tag line {l:?}")))?;
                tokens.push(w.to_string());
                tags.push(t.to_string());
            }
            if closed {
                exemplars.push((tokens, tags));
            } else {
                query = Some(sentence.split(' ').map(str::to_string).collect());
            }
        }
        let query = query.ok_or_else(|| Error::Protocol("prompt has no open query block".into()))?;
        Ok(PromptParts::Tagging { exemplars, query })
    }

    fn parse_nli(prompt: &str) -> Result<Self> {
        let mut exemplars = Vec::new();
        let mut pending: Option<(String, String)> = None;
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("Premise: ") {
                let body = rest.strip_suffix(" ,").unwrap_or(rest);
                let (p, h) = body
                    .split_once(" , Hypothesis: ")
                    .ok_or_else(|| Error::Protocol(format!("bad premise line {line:?}")))?;
                pending = Some((p.to_string(), h.to_string()));
            } else if let Some(ans) = line.strip_prefix("Answer:") {
                let ans = ans.trim();
                let (p, h) = pending
                    .take()
                    .ok_or_else(|| Error::Protocol("answer without premise".into()))?;
                if ans.is_empty() {
                    return Ok(PromptParts::Nli {
                        exemplars,
                        query: (p, h),
                    });
                }
                exemplars.push((p, h, ans.to_string()));
            }
        }
        Err(Error::Protocol("prompt has no open NLI query".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    fn labels(s: &str) -> Vec<String> {
        toks(s)
    }

    #[test]
    fn zero_exemplars() {
        let task = TaskSpec::upos("gsw");
        let q = Example::tokens("q", toks("a b"), None);
        let p = render_prompt(&task, &[], &q).unwrap();
        assert_eq!(p, format!("{POS_DESCRIPTION}\nSentence: a b\nTags:\n```\n"));
    }

    #[test]
    fn eight_nli_exemplars() {
        let task = TaskSpec::nli("gn");
        let exs: Vec<Example> = (0..8)
            .map(|i| Example::pair(i.to_string(), format!("p{i}"), format!("h{i}"), Some("neutral".into())))
            .collect();
        let labs = vec!["neutral".to_string()];
        let pairs: Vec<(&Example, &[String])> = exs.iter().map(|e| (e, labs.as_slice())).collect();
        let q = Example::pair("q", "pq", "hq", None);
        let p = render_prompt(&task, &pairs, &q).unwrap();
        let before_query = &p[..p.rfind("Premise: pq").unwrap()];
        assert_eq!(before_query.matches("Answer:").count(), 8);
        assert!(p.ends_with("Premise: pq , Hypothesis: hq ,\nAnswer:"));
    }

    #[test]
    fn label_length_mismatch() {
        let task = TaskSpec::upos("gsw");
        let e = Example::tokens("e", toks("a b"), None);
        let bad = labels("NOUN");
        let q = Example::tokens("q", toks("c"), None);
        assert!(render_prompt(&task, &[(&e, &bad)], &q).is_err());
    }

    #[test]
    fn template_must_fit_task() {
        let mut task = TaskSpec::upos("gsw");
        task.template_id = "nli".into();
        let q = Example::tokens("q", toks("a"), None);
        assert!(matches!(render_prompt(&task, &[], &q), Err(Error::Config(_))));
    }

    #[test]
    fn permuting_exemplars_changes_prompt() {
        let task = TaskSpec::upos("gsw");
        let a = Example::tokens("a", toks("x"), None);
        let b = Example::tokens("b", toks("y"), None);
        let la = labels("NOUN");
        let lb = labels("VERB");
        let q = Example::tokens("q", toks("z"), None);
        let p1 = render_prompt(&task, &[(&a, &la), (&b, &lb)], &q).unwrap();
        let p2 = render_prompt(&task, &[(&b, &lb), (&a, &la)], &q).unwrap();
        assert_ne!(p1, p2);
    }

    #[test]
    fn lcs_identical_and_disjoint() {
        let a = toks("a b c");
        assert_eq!(lcs_align(&a, &a), vec![(0, 0), (1, 1), (2, 2)]);
        assert!(lcs_align(&a, &toks("x y")).is_empty());
        assert!(lcs_align::<String>(&[], &a).is_empty());
    }

    #[test]
    fn lcs_classic() {
        let x: Vec<char> = "ABCBDAB".chars().collect();
        let y: Vec<char> = "BDCABA".chars().collect();
        let al = lcs_align(&x, &y);
        assert_eq!(al.len(), 4);
        for w in al.windows(2) {
            assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for &(i, j) in &al {
            assert_eq!(x[i], y[j]);
        }
    }

    #[test]
    fn lcs_prefers_leftmost_reference() {
        // "a" could match either reference position; the first wins
        assert_eq!(lcs_align(&toks("a"), &toks("a a")), vec![(0, 0)]);
        // repeated words map positionally
        assert_eq!(lcs_align(&toks("a a"), &toks("a b a")), vec![(0, 0), (1, 2)]);
    }

    #[test]
    fn perfect_response_verbatim() {
        let task = TaskSpec::upos("gsw");
        let q = Example::tokens("q", toks("I main ."), None);
        let gold = labels("PRON VERB PUNCT");
        let r = parse_tagging_response(&tagging_answer(q.token_slice(), &gold), &q, &task);
        assert_eq!(r.labels, gold);
        assert!(r.repaired_positions.is_empty());
        assert_eq!(r.surplus_pairs, 0);
    }

    #[test]
    fn missing_middle_word_defaults() {
        let task = TaskSpec::upos("gsw");
        let q = Example::tokens("q", toks("I main ."), None);
        let resp = "Tags:\n```\nI\tPRON\n.\tPUNCT\n```";
        let r = parse_tagging_response(resp, &q, &task);
        assert_eq!(r.labels, labels("PRON X PUNCT"));
        assert_eq!(r.repaired_positions, vec![1]);
    }

    #[test]
    fn invalid_tag_defaults() {
        let task = TaskSpec::ner("hau");
        let q = Example::tokens("q", toks("Musa tafi"), None);
        let r = parse_tagging_response("Musa\tFOO\ntafi\tO\n", &q, &task);
        assert_eq!(r.labels, labels("O O"));
        assert_eq!(r.repaired_positions, vec![0]);
    }

    #[test]
    fn garbage_is_all_default_and_surplus_counted() {
        let task = TaskSpec::upos("gsw");
        let q = Example::tokens("q", toks("a b"), None);
        let r = parse_tagging_response("I cannot help with that.", &q, &task);
        assert_eq!(r.labels, labels("X X"));
        assert_eq!(r.repaired_positions, vec![0, 1]);
        let r = parse_tagging_response("a\tNOUN\nzz\tVERB\nb\tDET\nyy\tADJ", &q, &task);
        assert_eq!(r.labels, labels("NOUN DET"));
        assert_eq!(r.surplus_pairs, 2);
    }

    #[test]
    fn nli_verbalizer() {
        assert_eq!(parse_nli_response("Answer: entailment").unwrap(), "entailment");
        assert_eq!(parse_nli_response("Contradiction.").unwrap(), "contradiction");
        assert_eq!(parse_nli_response(" neutral").unwrap(), "neutral");
        assert!(matches!(
            parse_nli_response("I am not sure"),
            Err(Error::UnparseableResponse(_))
        ));
        // whole words only
        assert!(parse_nli_response("neutrality").is_err());
        assert_eq!(
            parse_nli_response("neutral framing aside. Answer: contradiction").unwrap(),
            "contradiction"
        );
    }

    #[test]
    fn dissect_tagging_prompt() {
        let task = TaskSpec::upos("gsw");
        let e = Example::tokens("e", toks("x y"), None);
        let l = labels("NOUN VERB");
        let q = Example::tokens("q", toks("z w"), None);
        let p = render_prompt(&task, &[(&e, &l)], &q).unwrap();
        assert_eq!(
            PromptParts::parse(&p).unwrap(),
            PromptParts::Tagging {
                exemplars: vec![(toks("x y"), l.clone())],
                query: toks("z w"),
            }
        );
    }

    #[test]
    fn dissect_nli_prompt() {
        let task = TaskSpec::nli("gn");
        let e = Example::pair("e", "p1", "h1", None);
        let l = vec!["entailment".to_string()];
        let q = Example::pair("q", "pq", "hq", None);
        let p = render_prompt(&task, &[(&e, &l)], &q).unwrap();
        assert_eq!(
            PromptParts::parse(&p).unwrap(),
            PromptParts::Nli {
                exemplars: vec![("p1".into(), "h1".into(), "entailment".into())],
                query: ("pq".into(), "hq".into()),
            }
        );
    }
}
