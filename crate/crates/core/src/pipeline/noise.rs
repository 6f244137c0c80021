//! Stage II quality as a function of label noise in the in-language pool,
//! against a baseline prompted with source-language exemplars.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_stage1_icl, run_stage2_ssp, ExemplarPool, Provenance, Stage2Settings, StageOutput};
use crate::corpus::{Dataset, Prediction, TaskSpec};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::eval::score;
use crate::llm::{Gateway, LlmParams};
use crate::selector::{Relaxation, SelectionMode, SolverKind};

/// Replaces exactly `round(rate * n)` of the `n` label positions, chosen
/// uniformly without replacement, each with a uniformly drawn different
/// label. The draws do not depend on `rate`, so with equally seeded
/// generators the positions corrupted at a lower rate are a prefix of
/// those corrupted at a higher one.
pub fn inject_noise<R: Rng>(labels: &[Vec<String>], rate: f64, task: &TaskSpec, rng: &mut R) -> Vec<Vec<String>> {
    let mut positions: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, seq)| (0..seq.len()).map(move |p| (i, p)))
        .collect();
    positions.shuffle(rng);
    let tagset = &task.labels;
    let replacements: Vec<String> = positions
        .iter()
        .map(|&(i, p)| {
            let current = task.label_index(&labels[i][p]);
            match current {
                Some(c) if tagset.len() > 1 => {
                    let r = rng.random_range(0..tagset.len() - 1);
                    tagset[if r < c { r } else { r + 1 }].clone()
                }
                Some(_) => labels[i][p].clone(),
                None => tagset[rng.random_range(0..tagset.len())].clone(),
            }
        })
        .collect();
    let count = ((rate.clamp(0.0, 1.0) * positions.len() as f64).round() as usize).min(positions.len());
    let mut out = labels.to_vec();
    for (&(i, p), new) in positions.iter().zip(replacements).take(count) {
        out[i][p] = new;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSettings {
    pub k: usize,
    pub rates: Vec<f64>,
    pub mode: SelectionMode,
    /// Required when any rate is positive.
    pub seed: Option<u64>,
    pub stage1_params: LlmParams,
    pub stage2_params: LlmParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub rate: f64,
    pub changed_positions: usize,
    pub total_positions: usize,
    pub micro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_f1: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub k: usize,
    pub mode: SelectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub baseline_micro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_span_f1: Option<f64>,
    pub points: Vec<NoisePoint>,
    /// First rate, in the order given, whose F1 falls below the baseline.
    pub crossover_rate: Option<f64>,
}

pub struct NoiseRun {
    pub report: NoiseReport,
    pub baseline: StageOutput,
    pub per_rate: Vec<StageOutput>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_noise_experiment(
    target: &Dataset,
    source: &Dataset,
    target_store: &EmbeddingStore,
    source_store: &EmbeddingStore,
    gateway: &Gateway,
    settings: &NoiseSettings,
) -> Result<NoiseRun> {
    if !target.is_labelled() {
        return Err(Error::Validation(
            "the noise experiment needs a labelled target set".into(),
        ));
    }
    let noisy_rates = settings.rates.iter().any(|&r| r > 0.0);
    if noisy_rates && settings.seed.is_none() {
        return Err(Error::Config("noise injection requires a seed".into()));
    }
    let baseline = run_stage1_icl(
        target,
        source,
        target_store,
        source_store,
        gateway,
        &settings.stage1_params,
        settings.k,
    )?;
    let base = score(target, &baseline.predictions)?;

    let gold: Vec<Vec<String>> = target
        .examples
        .iter()
        .map(|e| e.gold_labels.clone().expect("checked labelled"))
        .collect();
    let total: usize = gold.iter().map(Vec::len).sum();
    let stage2 = Stage2Settings {
        k: settings.k,
        percentile: 100.0,
        mode: settings.mode,
        relaxation: Relaxation::Ladder,
        solver: SolverKind::Auto,
        seed: settings.seed,
        params: settings.stage2_params.clone(),
    };

    let mut points = Vec::with_capacity(settings.rates.len());
    let mut per_rate = Vec::with_capacity(settings.rates.len());
    for &rate in &settings.rates {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.unwrap_or(0));
        let noisy = inject_noise(&gold, rate, &target.task, &mut rng);
        let changed = noisy
            .iter()
            .zip(&gold)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum();
        let preds = target
            .examples
            .iter()
            .zip(noisy)
            .map(|(e, l)| Prediction::new(e.id.clone(), l))
            .collect();
        let pool = ExemplarPool::new(target.clone(), preds, Provenance::Gold)?;
        let out = run_stage2_ssp(&pool, target_store, gateway, &stage2)?;
        let r = score(target, &out.predictions)?;
        log::info!("noise rate {rate}: micro-F1 {:.4}", r.micro_f1);
        points.push(NoisePoint {
            rate,
            changed_positions: changed,
            total_positions: total,
            micro_f1: r.micro_f1,
            span_f1: r.span_f1,
            accuracy: r.accuracy,
        });
        per_rate.push(out);
    }
    let crossover_rate = points.iter().find(|p| p.micro_f1 < base.micro_f1).map(|p| p.rate);
    Ok(NoiseRun {
        report: NoiseReport {
            k: settings.k,
            mode: settings.mode,
            seed: settings.seed,
            baseline_micro_f1: base.micro_f1,
            baseline_span_f1: base.span_f1,
            points,
            crossover_rate,
        },
        baseline,
        per_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(n: usize, len: usize) -> Vec<Vec<String>> {
        vec![vec!["NOUN".to_string(); len]; n]
    }

    fn changed(a: &[Vec<String>], b: &[Vec<String>]) -> usize {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).filter(|(p, q)| p != q).count())
            .sum()
    }

    #[test]
    fn rate_zero_is_identity() {
        let task = TaskSpec::upos("gsw");
        let l = seqs(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_noise(&l, 0.0, &task, &mut rng), l);
    }

    #[test]
    fn rate_one_changes_everything() {
        let task = TaskSpec::upos("gsw");
        let l = seqs(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = inject_noise(&l, 1.0, &task, &mut rng);
        assert_eq!(changed(&l, &noisy), 20);
        assert!(noisy.iter().flatten().all(|t| task.has_label(t)));
    }

    #[test]
    fn exact_count() {
        let task = TaskSpec::upos("gsw");
        let l = seqs(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(changed(&l, &inject_noise(&l, 0.5, &task, &mut rng)), 50);
    }

    #[test]
    fn nested_across_rates() {
        let task = TaskSpec::ner("hau");
        let l = seqs(8, 6)
            .into_iter()
            .map(|s| s.iter().map(|_| "O".to_string()).collect())
            .collect::<Vec<Vec<String>>>();
        let at = |r: f64| inject_noise(&l, r, &task, &mut ChaCha8Rng::seed_from_u64(9));
        let lo = at(0.2);
        let hi = at(0.6);
        for (a, b) in lo.iter().flatten().zip(hi.iter().flatten()) {
            if a != "O" {
                assert_eq!(a, b);
            }
        }
    }
}
