use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssp_core::corpus::{read_dataset, read_predictions, write_predictions, Dataset, TaskSpec};
use ssp_core::embedding::{load_or_fetch, EmbeddingClient, EmbeddingStore};
use ssp_core::eval::{confusion_csv, confusion_diff, exemplar_precision, per_label_csv, score, EvalReport};
use ssp_core::llm::{
    Backend, ChatBackend, CopyNearestExemplar, DryRun, EchoGold, Gateway, LlmParams, MockKind, Scripted,
};
use ssp_core::pipeline::{
    import_stage1, read_jsonl, run_noise_experiment, run_stage1_icl, run_stage2_ssp, select_all, write_json,
    write_jsonl, ExemplarPool, NoiseSettings, Provenance, QueryTrace, RunConfig, Stage1Mode, Stage2Settings,
    StageOutput,
};
use ssp_core::selector::SelectionMode;
use ssp_core::{Error, Result};

use crate::{Cli, Command, EvalArgs};

struct Ctx<'a> {
    cli: &'a Cli,
    config: RunConfig,
    task: TaskSpec,
}

pub fn run(cli: &Cli) -> Result<u8> {
    let config = crate::config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let task = config.task.spec()?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    write_json(&cli.out.join("config.json"), &config)?;
    let ctx = Ctx { cli, config, task };
    match &cli.command {
        Command::Embed => embed(&ctx),
        Command::Stage1 => stage1(&ctx),
        Command::ImportStage1 => import(&ctx),
        Command::Select => select(&ctx),
        Command::Stage2 => stage2(&ctx),
        Command::Eval(args) => eval(&ctx, args),
        Command::NoiseExp => noise_exp(&ctx),
        Command::Ablate => ablate(&ctx),
    }
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn dataset(&self, path: Option<&PathBuf>, key: &str) -> Result<Dataset> {
        let path = path.ok_or_else(|| Error::Config(format!("paths.{key} is not set")))?;
        read_dataset(path, &self.task)
    }

    fn target(&self) -> Result<Dataset> {
        self.dataset(self.config.paths.target.as_ref(), "target")
    }

    fn source(&self) -> Result<Dataset> {
        self.dataset(self.config.paths.source.as_ref(), "source")
    }

    fn embeddings_dir(&self) -> PathBuf {
        self.config
            .paths
            .embeddings
            .clone()
            .unwrap_or_else(|| self.out("embeddings"))
    }

    fn store(&self, which: &str) -> Result<EmbeddingStore> {
        let path = self.embeddings_dir().join(format!("{which}.jsonl"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "no {which} embeddings at {}; run `ssp embed` first or point paths.embeddings at a directory holding {which}.jsonl",
                path.display()
            )));
        }
        EmbeddingStore::read(&path)
    }

    fn gateway(&self, params: &LlmParams, datasets: &[&Dataset]) -> Result<Gateway> {
        let backend: Box<dyn Backend> = if self.cli.dry_run {
            Box::new(DryRun::new())
        } else if let Some(kind) = &self.cli.mock {
            match kind.parse::<MockKind>()? {
                MockKind::EchoGold => Box::new(EchoGold::new(datasets.iter().copied())),
                MockKind::CopyNearestExemplar => Box::new(CopyNearestExemplar::new(self.task.clone())),
                MockKind::Scripted => {
                    let path = self.config.paths.script.as_ref().ok_or_else(|| {
                        Error::Config("the scripted mock needs paths.script (a prompt-hash to response map)".into())
                    })?;
                    Box::new(Scripted::from_file(path)?)
                }
            }
        } else {
            Box::new(ChatBackend::from_env(params))
        };
        Ok(Gateway::new(
            backend,
            Some(self.cli.cache_dir.clone()),
            params.max_concurrency,
        ))
    }

    fn pool(&self, target: &Dataset) -> Result<ExemplarPool> {
        match self.config.stage1_mode {
            Stage1Mode::Gold => ExemplarPool::gold(target.clone()),
            Stage1Mode::Import => {
                let path = self
                    .config
                    .paths
                    .stage1_predictions
                    .as_ref()
                    .ok_or_else(|| Error::Config("stage1_mode = import needs paths.stage1_predictions".into()))?;
                import_stage1(path, target)
            }
            Stage1Mode::Icl => {
                let path = self
                    .config
                    .paths
                    .stage1_predictions
                    .clone()
                    .unwrap_or_else(|| self.out("stage1.preds.jsonl"));
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "no Stage I predictions at {}; run `ssp stage1` first",
                        path.display()
                    )));
                }
                ExemplarPool::new(target.clone(), read_predictions(&path)?, Provenance::IclStage1)
            }
        }
    }

    /// Writes a stage's artifacts; returns the exit code.
    fn finish(
        &self,
        stage: &str,
        trace_file: &str,
        metrics_file: &str,
        target: &Dataset,
        out: &StageOutput,
    ) -> Result<u8> {
        write_jsonl(&self.out(trace_file), &out.traces)?;
        if self.cli.dry_run {
            write_jsonl(&self.out(&format!("{stage}.prompts.jsonl")), &out.prompts)?;
            println!("{stage}: rendered {} prompts (dry run)", out.prompts.len());
            return Ok(0);
        }
        write_predictions(target, &out.predictions, &self.out(&format!("{stage}.preds.jsonl")))?;
        if !out.failures.is_empty() {
            write_jsonl(&self.out(&format!("{stage}.failures.jsonl")), &out.failures)?;
            log::warn!("{stage}: {} queries fell back to default labels", out.failures.len());
        }
        if target.is_labelled() {
            let report = score(target, &out.predictions)?;
            write_json(&self.out(metrics_file), &report)?;
            print_summary(stage, &report);
        } else {
            println!("{stage}: labelled {} examples", out.predictions.len());
        }
        Ok(if out.gateway_failures() > 0 { 2 } else { 0 })
    }

    fn stage2_settings(&self) -> Stage2Settings {
        Stage2Settings::from_config(&self.config)
    }
}

fn print_summary(stage: &str, r: &EvalReport) {
    match r.span_f1 {
        Some(s) => println!(
            "{stage}: micro_f1={:.4} span_f1={s:.4} accuracy={:.4}",
            r.micro_f1, r.accuracy
        ),
        None => println!("{stage}: micro_f1={:.4} accuracy={:.4}", r.micro_f1, r.accuracy),
    }
}

fn embed(ctx: &Ctx) -> Result<u8> {
    let cfg = ctx
        .config
        .embedding
        .clone()
        .ok_or_else(|| Error::Config("embedding endpoint not configured ([embedding] url and model)".into()))?;
    let key = std::env::var(&cfg.api_key_env).ok();
    let client = EmbeddingClient::new(cfg, key);
    let dir = ctx.embeddings_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut sets = vec![("target", ctx.target()?)];
    if ctx.config.paths.source.is_some() {
        sets.push(("source", ctx.source()?));
    }
    for (name, ds) in &sets {
        let items: Vec<(String, String)> = ds.examples.iter().map(|e| (e.id.clone(), e.embedding_text())).collect();
        let store = load_or_fetch(Some(&client), &items, &dir.join(format!("{name}.jsonl")))?;
        println!("{name}: {} embeddings of dimension {}", store.len(), store.dim());
    }
    Ok(0)
}

fn stage1(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    match ctx.config.stage1_mode {
        Stage1Mode::Import => import(ctx),
        Stage1Mode::Gold => {
            let pool = ExemplarPool::gold(target.clone())?;
            write_predictions(&target, &pool.predictions, &ctx.out("stage1.preds.jsonl"))?;
            println!("stage1: {} gold labellings", pool.len());
            Ok(0)
        }
        Stage1Mode::Icl => {
            let source = ctx.source()?;
            let gw = ctx.gateway(&ctx.config.stage1_llm, &[&target, &source])?;
            let out = run_stage1_icl(
                &target,
                &source,
                &ctx.store("target")?,
                &ctx.store("source")?,
                &gw,
                &ctx.config.stage1_llm,
                ctx.config.k,
            )?;
            ctx.finish("stage1", "stage1.trace.jsonl", "stage1.metrics.json", &target, &out)
        }
    }
}

fn import(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    let path = ctx
        .config
        .paths
        .stage1_predictions
        .as_ref()
        .ok_or_else(|| Error::Config("paths.stage1_predictions is not set".into()))?;
    let pool = import_stage1(path, &target)?;
    write_predictions(&target, &pool.predictions, &ctx.out("stage1.preds.jsonl"))?;
    if let Some(c) = &pool.confidences {
        fs::write(
            ctx.out("confidences.jsonl"),
            ssp_core::confidence::confidences_to_jsonl(c)?,
        )
        .map_err(|e| Error::io(ctx.out("confidences.jsonl"), e))?;
    }
    println!(
        "import-stage1: pooled {} predictions (confidences: {})",
        pool.len(),
        if pool.confidences.is_some() { "yes" } else { "no" }
    );
    Ok(0)
}

fn select(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    let pool = ctx.pool(&target)?;
    let traces = select_all(&pool, &ctx.store("target")?, &ctx.stage2_settings())?;
    write_jsonl(&ctx.out("selection_trace.jsonl"), &traces)?;
    let relaxed = traces.iter().filter(|t| !t.relaxations.is_empty()).count();
    println!("select: {} queries traced, {relaxed} with relaxations", traces.len());
    Ok(0)
}

fn stage2(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    let pool = ctx.pool(&target)?;
    let store = ctx.store("target")?;
    let gw = ctx.gateway(&ctx.config.stage2_llm, &[&target])?;
    let out = run_stage2_ssp(&pool, &store, &gw, &ctx.stage2_settings())?;
    ctx.finish("stage2", "selection_trace.jsonl", "metrics.json", &target, &out)
}

fn eval(ctx: &Ctx, args: &EvalArgs) -> Result<u8> {
    let target = ctx.target()?;
    let preds_path = args.preds.clone().unwrap_or_else(|| ctx.out("stage2.preds.jsonl"));
    let report = score(&target, &read_predictions(&preds_path)?)?;
    write_json(&ctx.out("metrics.json"), &report)?;
    write_text(&ctx.out("per_label.csv"), &per_label_csv(&report)?)?;
    write_text(&ctx.out("confusion.csv"), &confusion_csv(&report.confusion)?)?;
    print_summary("eval", &report);

    if let Some(other) = &args.compare {
        let b = score(&target, &read_predictions(other)?)?;
        let diff = confusion_diff(&report.confusion, &b.confusion)?;
        write_json(&ctx.out("confusion_diff.json"), &diff)?;
        write_text(&ctx.out("confusion_diff.csv"), &confusion_csv(&diff)?)?;
    }
    match (&args.trace, &args.pool) {
        (Some(trace), Some(pool)) => {
            let traces: Vec<QueryTrace> = read_jsonl(trace)?;
            let pool: HashMap<String, Vec<String>> = read_predictions(pool)?
                .into_iter()
                .map(|p| (p.example_id, p.labels))
                .collect();
            let gold: HashMap<String, Vec<String>> = target
                .examples
                .iter()
                .filter_map(|e| e.gold_labels.clone().map(|g| (e.id.clone(), g)))
                .collect();
            let prec = exemplar_precision(traces.iter().map(|t| t.exemplar_ids.as_slice()), &pool, &gold)?;
            write_json(&ctx.out("exemplar_precision.json"), &prec)?;
            println!("eval: exemplar macro precision {:.4}", prec.macro_precision);
        }
        (None, None) => {}
        _ => return Err(Error::Config("exemplar precision needs both --trace and --pool".into())),
    }
    Ok(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn noise_exp(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    let source = ctx.source()?;
    let gw = ctx.gateway(&ctx.config.stage2_llm, &[&target, &source])?;
    let settings = NoiseSettings {
        k: ctx.config.k,
        rates: ctx.config.noise.rates.clone(),
        mode: ctx.config.noise.mode,
        seed: ctx.config.seed,
        stage1_params: ctx.config.stage1_llm.clone(),
        stage2_params: ctx.config.stage2_llm.clone(),
    };
    let run = run_noise_experiment(
        &target,
        &source,
        &ctx.store("target")?,
        &ctx.store("source")?,
        &gw,
        &settings,
    )?;
    write_json(&ctx.out("noise_report.json"), &run.report)?;
    println!(
        "noise-exp: source baseline micro_f1={:.4}",
        run.report.baseline_micro_f1
    );
    for p in &run.report.points {
        println!("  rate {:.2}: micro_f1={:.4}", p.rate, p.micro_f1);
    }
    match run.report.crossover_rate {
        Some(r) => println!("  falls below the baseline at rate {r}"),
        None => println!("  never falls below the baseline"),
    }
    let gateway_failures: usize = run
        .per_rate
        .iter()
        .chain([&run.baseline])
        .map(StageOutput::gateway_failures)
        .sum();
    Ok(if gateway_failures > 0 { 2 } else { 0 })
}

#[derive(Serialize)]
struct AblationRow {
    mode: SelectionMode,
    micro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    span_f1: Option<f64>,
    accuracy: f64,
    delta_micro_f1: f64,
}

#[derive(Serialize)]
struct Ablation {
    full: AblationRow,
    rows: Vec<AblationRow>,
}

fn ablate(ctx: &Ctx) -> Result<u8> {
    let target = ctx.target()?;
    if !target.is_labelled() {
        return Err(Error::Validation("ablation needs a labelled target set".into()));
    }
    let pool = ctx.pool(&target)?;
    let store = ctx.store("target")?;
    let gw = ctx.gateway(&ctx.config.stage2_llm, &[&target])?;
    let mut failed = false;
    let mut rows = Vec::new();
    for mode in SelectionMode::ALL {
        let mut settings = ctx.stage2_settings();
        settings.mode = mode;
        let out = run_stage2_ssp(&pool, &store, &gw, &settings)?;
        failed |= out.gateway_failures() > 0;
        let dir = ctx.out("ablate").join(mode.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_predictions(&target, &out.predictions, &dir.join("stage2.preds.jsonl"))?;
        write_jsonl(&dir.join("selection_trace.jsonl"), &out.traces)?;
        let r = score(&target, &out.predictions)?;
        write_json(&dir.join("metrics.json"), &r)?;
        rows.push(AblationRow {
            mode,
            micro_f1: r.micro_f1,
            span_f1: r.span_f1,
            accuracy: r.accuracy,
            delta_micro_f1: 0.0,
        });
    }
    let full = rows.remove(0);
    for r in &mut rows {
        r.delta_micro_f1 = r.micro_f1 - full.micro_f1;
    }
    println!("ablate: full micro_f1={:.4}", full.micro_f1);
    let mut csv = String::from("mode,micro_f1,delta_micro_f1\n");
    csv.push_str(&format!("{},{},0\n", full.mode, full.micro_f1));
    for r in &rows {
        println!(
            "  {:<16} micro_f1={:.4} delta={:+.4}",
            r.mode.as_str(),
            r.micro_f1,
            r.delta_micro_f1
        );
        csv.push_str(&format!("{},{},{}\n", r.mode, r.micro_f1, r.delta_micro_f1));
    }
    write_json(&ctx.out("ablation.json"), &Ablation { full, rows })?;
    write_text(&ctx.out("ablation.csv"), &csv)?;
    Ok(if failed { 2 } else { 0 })
}
