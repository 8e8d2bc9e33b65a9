//! Single-token evaluation engine.
//!
//! One frozen decoder-only backbone, one lightweight low-rank adapter per
//! metric, and a scoring rule that reads a classification out of the
//! next-token logits at the final position: class probabilities are the
//! softmax restricted to the class-token subset, which equals the full
//! vocabulary softmax renormalized over that subset. Everything is
//! deterministic for fixed inputs, so a metric is a pure function from a
//! rendered prompt to a calibrated confidence.

pub mod adapter;
pub mod classmap;
pub mod container;
pub mod gradcheck;
pub mod model;
pub mod report;
pub mod scoring;
pub mod template;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod util;

pub use adapter::{AdapterRegistry, LoraAdapter, LoraConfig, Target};
pub use classmap::{apply_fallback, preflight_classes, ClassKind, ClassMapping, ClassSet, Preflight};
pub use model::{Logits, ModelConfig, ModelWeights};
pub use scoring::{binary_confidence, restricted_normalize, EvalResult, Evaluator};
pub use template::{MetricSpec, NodeType, NodeVariables};
pub use tokenizer::Vocabulary;
