use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskSpec;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::llm::LlmParams;
use crate::selector::SelectionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskPreset {
    Ner,
    Pos,
    Nli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub preset: TaskPreset,
    #[serde(default = "default_language")]
    pub language: String,
    /// Defaults to the whole tagset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_labels: Option<Vec<String>>,
    #[serde(default)]
    pub threshold_exclude: Vec<String>,
}

fn default_language() -> String {
    "und".into()
}

impl TaskConfig {
    pub fn spec(&self) -> Result<TaskSpec> {
        let mut spec = match self.preset {
            TaskPreset::Ner => TaskSpec::ner(&self.language),
            TaskPreset::Pos => TaskSpec::upos(&self.language),
            TaskPreset::Nli => TaskSpec::nli(&self.language),
        };
        spec.coverage_labels = self.coverage_labels.clone();
        spec.threshold_exclude = self.threshold_exclude.clone();
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Mode {
    /// In-context learning with source-language exemplars.
    #[default]
    Icl,
    /// Predictions from an external model.
    Import,
    /// Gold target labels (the skyline).
    Gold,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Labelled source-language data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Target-language data to label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Directory holding `source.jsonl` and `target.jsonl` embeddings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Stage I predictions to import.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_predictions: Option<PathBuf>,
    /// Prompt-hash to response map for the scripted mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    #[serde(default = "default_noise_mode")]
    pub mode: SelectionMode,
}

fn default_rates() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}

fn default_noise_mode() -> SelectionMode {
    SelectionMode::SimilarityOnly
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            rates: default_rates(),
            mode: default_noise_mode(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub selector_mode: SelectionMode,
    #[serde(default)]
    pub stage1_mode: Stage1Mode,
    #[serde(default)]
    pub stage1_llm: LlmParams,
    #[serde(default)]
    pub stage2_llm: LlmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingConfig>,
}

fn default_k() -> usize {
    8
}

fn default_percentile() -> f64 {
    80.0
}

impl RunConfig {
    pub fn new(task: TaskConfig) -> Self {
        RunConfig {
            task,
            k: default_k(),
            percentile: default_percentile(),
            selector_mode: SelectionMode::Full,
            stage1_mode: Stage1Mode::Icl,
            stage1_llm: LlmParams::default(),
            stage2_llm: LlmParams::default(),
            seed: None,
            paths: Paths::default(),
            noise: NoiseConfig::default(),
            embedding: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.spec()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!(
                "percentile must lie in (0, 100], got {}",
                self.percentile
            )));
        }
        if self.selector_mode == SelectionMode::Random && self.seed.is_none() {
            return Err(Error::Config("random selector mode requires a seed".into()));
        }
        if let Some(r) = self.noise.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("noise rate {r} outside [0, 1]")));
        }
        self.stage1_llm.validate()?;
        self.stage2_llm.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::new(TaskConfig {
            preset: TaskPreset::Ner,
            language: "hau".into(),
            coverage_labels: None,
            threshold_exclude: vec![],
        });
        c.seed = Some(1);
        c
    }

    #[test]
    fn defaults() {
        let c = cfg();
        assert_eq!(c.k, 8);
        assert_eq!(c.percentile, 80.0);
        assert_eq!(c.selector_mode, SelectionMode::Full);
        c.validate().unwrap();
    }

    #[test]
    fn seed_required_for_random() {
        let mut c = cfg();
        c.seed = None;
        c.validate().unwrap();
        c.selector_mode = SelectionMode::Random;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = cfg();
        c.k = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.percentile = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.task.coverage_labels = Some(vec!["NOPE".into()]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"task": {"preset": "pos"}, "kk": 3}"#;
        assert!(serde_json::from_str::<RunConfig>(json).is_err());
        let json = r#"{"task": {"preset": "pos"}, "k": 3}"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.task.spec().unwrap().default_label, "X");
    }
}
