//! Two-stage self-supervised prompting for zero-labelled cross-lingual
//! transfer.
//!
//! Stage I labels a target-language test set, either by in-context learning
//! with source-language exemplars or by importing an external model's
//! predictions. Stage II labels each test point again, prompting with
//! in-language exemplars taken from the Stage I output and chosen by an
//! exact, coverage- and confidence-constrained selector.
//!
//! Selection, confidences and embeddings are generic over the scalar type;
//! the aliases below fix the common choices.

pub mod confidence;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod http;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod selector;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Exact rational arithmetic for selection problems and confidences.
pub type Exact = num_rational::Rational64;

pub type SelectionProblemF64 = selector::SelectionProblem<f64>;
pub type SelectionProblemF32 = selector::SelectionProblem<f32>;
pub type SelectionProblemExact = selector::SelectionProblem<Exact>;

pub type CandidateF64 = selector::Candidate<f64>;
pub type CandidateF32 = selector::Candidate<f32>;
pub type CandidateExact = selector::Candidate<Exact>;

pub type SelectionResultF64 = selector::SelectionResult<f64>;
pub type SelectionResultF32 = selector::SelectionResult<f32>;
pub type SelectionResultExact = selector::SelectionResult<Exact>;

pub type LabelConfidenceF64 = confidence::LabelConfidence<f64>;
pub type LabelConfidenceF32 = confidence::LabelConfidence<f32>;
pub type LabelConfidenceExact = confidence::LabelConfidence<Exact>;

pub type ThresholdTableF64 = confidence::ThresholdTable<f64>;
pub type ThresholdTableF32 = confidence::ThresholdTable<f32>;
pub type ThresholdTableExact = confidence::ThresholdTable<Exact>;

pub type EmbeddingStoreF64 = embedding::EmbeddingStore<f64>;
pub type EmbeddingStoreF32 = embedding::EmbeddingStore<f32>;
