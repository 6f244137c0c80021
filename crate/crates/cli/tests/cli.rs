use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use ssp_core::corpus::{write_conll, write_predictions, TaskSpec};
use ssp_core::llm::{DryRun, Gateway, LlmParams, Scripted};
use ssp_core::pipeline::{run_stage2_ssp, ExemplarPool, Stage2Settings};
use ssp_core::prompt::tagging_answer;
use ssp_core::selector::{Relaxation, SelectionMode, SolverKind};
use ssp_core::synth::{twin_corpus, SynthCorpus};

struct Fixture {
    dir: TempDir,
    corpus: SynthCorpus,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = twin_corpus(&TaskSpec::upos("gsw"), 6, 6, 21).unwrap();
        let p = dir.path();
        fs::write(p.join("target.conll"), write_conll(&corpus.target)).unwrap();
        fs::write(p.join("source.conll"), write_conll(&corpus.source)).unwrap();
        fs::create_dir(p.join("emb")).unwrap();
        corpus.target_store.write(&p.join("emb/target.jsonl")).unwrap();
        corpus.source_store.write(&p.join("emb/source.jsonl")).unwrap();
        let config = format!(
            "k = 4\nstage1_mode = \"gold\"\n\n[task]\npreset = \"pos\"\nlanguage = \"gsw\"\ncoverage_labels = [\"NOUN\", \"VERB\"]\n\n[paths]\ntarget = {:?}\nsource = {:?}\nembeddings = {:?}\n",
            p.join("target.conll"),
            p.join("source.conll"),
            p.join("emb"),
        );
        fs::write(p.join("run.toml"), config).unwrap();
        Fixture { dir, corpus }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `ssp` with the fixture config, cache and run directory.
    fn ssp(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssp"));
        cmd.arg("--config")
            .arg(self.path("run.toml"))
            .arg("--cache-dir")
            .arg(self.path("cache"))
            .arg("--out")
            .arg(self.path("run"))
            .args(args)
            .env_remove("OPENAI_API_KEY");
        cmd.output().unwrap()
    }

    fn json(&self, name: &str) -> Value {
        let text = fs::read_to_string(self.path("run").join(name)).unwrap();
        serde_json::from_str(&text).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_and_bad_flags() {
    let f = Fixture::new();
    assert_eq!(code(&f.ssp(&["--help"])), 0);
    assert_eq!(code(&f.ssp(&["stage2", "--no-such-flag"])), 1);
}

#[test]
fn eval_of_gold_predictions_is_perfect() {
    let f = Fixture::new();
    let gold = f.corpus.target.gold_predictions().unwrap();
    write_predictions(&f.corpus.target, &gold, &f.path("gold.jsonl")).unwrap();
    let o = f.ssp(&["eval", "--preds", f.path("gold.jsonl").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(f.json("metrics.json")["micro_f1"], 1.0);
    assert_eq!(f.json("config.json")["k"], 4);
    assert!(f.path("run/per_label.csv").exists());
    assert!(f.path("run/confusion.csv").exists());
}

#[test]
fn missing_embeddings_are_reported() {
    let f = Fixture::new();
    fs::remove_file(f.path("emb/target.jsonl")).unwrap();
    let o = f.ssp(&["stage2", "--mock", "echo-gold"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ssp embed"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new();
    let o = f.ssp(&["--set", "kay=3", "select"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("kay"), "{}", stderr(&o));
}

#[test]
fn exhausted_relaxation_exits_3() {
    let f = Fixture::new();
    let cover = "task.coverage_labels=[\"ADJ\", \"ADP\", \"ADV\", \"AUX\", \"DET\", \"NOUN\", \"PRON\", \"VERB\"]";
    let o = f.ssp(&[
        "--set",
        "k=1",
        "--set",
        cover,
        "stage2",
        "--mock",
        "copy-nearest-exemplar",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn echo_gold_pipeline_is_perfect() {
    let f = Fixture::new();
    let o = f.ssp(&["--set", "stage1_mode=\"icl\"", "stage1", "--mock", "echo-gold"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(f.json("stage1.metrics.json")["micro_f1"], 1.0);
    let o = f.ssp(&["--set", "stage1_mode=\"icl\"", "stage2", "--mock", "echo-gold"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(f.json("metrics.json")["micro_f1"], 1.0);
    let traces = fs::read_to_string(f.path("run/selection_trace.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 12);
}

#[test]
fn dry_run_touches_no_network() {
    let f = Fixture::new();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!(
        "stage2_llm.url=\"http://{}/v1/chat/completions\"",
        listener.local_addr().unwrap()
    );
    let o = f.ssp(&["--set", &url, "--dry-run", "stage2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prompts = fs::read_to_string(f.path("run/stage2.prompts.jsonl")).unwrap();
    assert_eq!(prompts.lines().count(), 12);
    assert!(!f.path("run/stage2.preds.jsonl").exists());
    assert!(!f.path("cache").exists());
    assert_eq!(listener.accept().unwrap_err().kind(), std::io::ErrorKind::WouldBlock);
}

#[test]
fn same_argv_and_cache_give_identical_run_dirs() {
    let f = Fixture::new();
    let args = [
        "--seed",
        "7",
        "--set",
        "selector_mode=\"random\"",
        "stage2",
        "--mock",
        "copy-nearest",
    ];
    assert_eq!(code(&f.ssp(&args)), 0);
    let first = snapshot(&f.path("run"));
    let cache = snapshot(&f.path("cache"));
    assert_eq!(code(&f.ssp(&args)), 0);
    assert_eq!(first, snapshot(&f.path("run")));
    assert_eq!(cache, snapshot(&f.path("cache")));
    assert!(first.contains_key(Path::new("stage2.preds.jsonl")));
}

/// Script answering every ablation prompt with the query's gold tags.
fn gold_script(f: &Fixture, seed: u64) -> BTreeMap<String, String> {
    let mut target = f.corpus.target.clone();
    target.task.coverage_labels = Some(vec!["NOUN".into(), "VERB".into()]);
    let pool = ExemplarPool::gold(target.clone()).unwrap();
    let mut script = BTreeMap::new();
    for mode in SelectionMode::ALL {
        let settings = Stage2Settings {
            k: 4,
            percentile: 80.0,
            mode,
            relaxation: Relaxation::Ladder,
            solver: SolverKind::Auto,
            seed: Some(seed),
            params: LlmParams::default(),
        };
        let gw = Gateway::new(Box::new(DryRun::new()), None, 1);
        let out = run_stage2_ssp(&pool, &f.corpus.target_store, &gw, &settings).unwrap();
        for (line, ex) in out.prompts.iter().zip(&target.examples) {
            let answer = tagging_answer(ex.token_slice(), ex.gold_labels.as_ref().unwrap());
            script.insert(Scripted::prompt_hash(&line.prompt), answer);
        }
    }
    script
}

#[test]
fn ablation_with_scripted_mock() {
    let f = Fixture::new();
    let mut script = gold_script(&f, 3);
    fs::write(f.path("script.json"), serde_json::to_string(&script).unwrap()).unwrap();
    let set = format!("paths.script={:?}", f.path("script.json"));
    let o = f.ssp(&["--seed", "3", "--set", &set, "ablate", "--mock", "scripted"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ablation = f.json("ablation.json");
    assert_eq!(ablation["full"]["micro_f1"], 1.0);
    let rows = ablation["rows"].as_array().unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["no-confidence", "no-coverage", "similarity-only", "random"]);
    assert!(rows.iter().all(|r| r["delta_micro_f1"] == 0.0));
    for m in ["full", "random"] {
        assert!(f.path("run/ablate").join(m).join("stage2.preds.jsonl").exists());
    }
    let csv = fs::read_to_string(f.path("run/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let first = script.keys().next().unwrap().clone();
    script.remove(&first);
    fs::write(f.path("script.json"), serde_json::to_string(&script).unwrap()).unwrap();
    fs::remove_dir_all(f.path("cache")).unwrap();
    let o = f.ssp(&["--seed", "3", "--set", &set, "ablate", "--mock", "scripted"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
