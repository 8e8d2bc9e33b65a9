//! Restricted-softmax scoring: class probabilities from final-position
//! logits.
//!
//! The conditional probability of class token `t_i` given that the output is
//! one of the class tokens `C` is
//!
//! ```text
//! P(t_i | C) = exp(s_i) / sum_{t_j in C} exp(s_j)
//! ```
//!
//! because the full-vocabulary softmax normalizer cancels when renormalizing
//! over the subset. `restricted_normalize` computes this directly from the
//! class logits; `binary_confidence` takes the long way (full softmax, then
//! the two-way ratio) so the two routes can be checked against each other.
//! Probabilities are accumulated in f64 regardless of the model precision.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterRegistry, LoraAdapter};
use crate::classmap::ClassSet;
use crate::model::{Logits, ModelError, ModelWeights};
use crate::template::{render, render_label_suffix, CompiledMetric, NodeVariables, SpecError};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("class set must contain at least 2 entries, got {got}")]
    TooFewClasses { got: usize },
    #[error("duplicate class token id {id}")]
    DuplicateClassId { id: u32 },
    #[error("class token id {id} out of range for {len} logits")]
    ClassIdOutOfRange { id: u32, len: usize },
    #[error("true and false ids must be distinct, both are {id}")]
    SameClassIds { id: u32 },
    #[error("metric {metric:?} has no registered adapter {adapter:?}")]
    AdapterMissing { metric: String, adapter: String },
    #[error("rendered prompt is {tokens} tokens, exceeding max context {max}")]
    ContextOverflow { tokens: usize, max: usize },
    #[error(transparent)]
    Render(#[from] SpecError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-class probabilities in class-word order.
pub type ClassDistribution = Vec<(String, f64)>;

/// Outcome of one single-token evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    /// Chosen class label (argmax; ties break toward the first-listed class).
    pub label: String,
    /// Probability of the chosen label under the restricted distribution.
    pub confidence: f64,
    /// All class probabilities, in class-word order.
    pub distribution: Vec<ClassProb>,
    /// Raw class-token logits, in class-word order.
    pub class_logits: Vec<ClassLogit>,
    pub prompt_tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub class: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLogit {
    pub class: String,
    pub logit: f32,
}

impl EvalResult {
    pub fn probability_of(&self, label: &str) -> Option<f64> {
        self.distribution
            .iter()
            .find(|c| c.class == label)
            .map(|c| c.p)
    }
}

/// One label's outcome from a multilabel evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub label: String,
    /// Confidence of the positive pair word at or above the spec threshold.
    pub positive: bool,
    pub result: EvalResult,
}

fn check_classes(logit_len: usize, ids: &[u32]) -> Result<(), ScoreError> {
    if ids.len() < 2 {
        return Err(ScoreError::TooFewClasses { got: ids.len() });
    }
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= logit_len {
            return Err(ScoreError::ClassIdOutOfRange {
                id,
                len: logit_len,
            });
        }
        if ids[..i].contains(&id) {
            return Err(ScoreError::DuplicateClassId { id });
        }
    }
    Ok(())
}

/// Restricted softmax over the class-token subset. Ignores every non-class
/// logit; stable via max subtraction; f64 accumulation.
pub fn restricted_normalize(
    logits: &Logits<f32>,
    classes: &ClassSet,
) -> Result<ClassDistribution, ScoreError> {
    let ids = classes.token_ids();
    check_classes(logits.len(), &ids)?;
    let probs = restricted_probs(logits.as_slice(), &ids);
    Ok(classes
        .entries()
        .iter()
        .zip(probs)
        .map(|(e, p)| (e.label.clone(), p))
        .collect())
}

/// Softmax over just the selected logit entries, in f64.
pub fn restricted_probs(logits: &[f32], ids: &[u32]) -> Vec<f64> {
    let selected: Vec<f64> = ids.iter().map(|&id| f64::from(logits[id as usize])).collect();
    let max = selected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Binary confidence computed the long way: full-vocabulary softmax, then
/// `p_true / (p_true + p_false)`. Algebraically equal to
/// `sigmoid(s_true - s_false)`.
pub fn binary_confidence(
    logits: &Logits<f32>,
    true_id: u32,
    false_id: u32,
) -> Result<f64, ScoreError> {
    if true_id == false_id {
        return Err(ScoreError::SameClassIds { id: true_id });
    }
    check_classes(logits.len(), &[true_id, false_id])?;
    // full softmax with max subtraction, f64
    let max = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0.0f64;
    for &s in logits.as_slice() {
        z += (f64::from(s) - max).exp();
    }
    let p_true = (f64::from(logits.as_slice()[true_id as usize]) - max).exp() / z;
    let p_false = (f64::from(logits.as_slice()[false_id as usize]) - max).exp() / z;
    Ok(p_true / (p_true + p_false))
}

/// Argmax with ties broken toward the earliest entry.
fn argmax_first(probs: &[(String, f64)]) -> usize {
    let mut best = 0;
    for (i, (_, p)) in probs.iter().enumerate().skip(1) {
        if *p > probs[best].1 {
            best = i;
        }
    }
    best
}

/// Shared immutable evaluation context: backbone weights, vocabulary, and the
/// adapter registry. Cheap to clone, safe to share across threads.
#[derive(Clone)]
pub struct Evaluator {
    pub weights: Arc<ModelWeights<f32>>,
    pub vocab: Arc<Vocabulary>,
    pub registry: Arc<AdapterRegistry>,
}

impl Evaluator {
    pub fn new(
        weights: Arc<ModelWeights<f32>>,
        vocab: Arc<Vocabulary>,
        registry: Arc<AdapterRegistry>,
    ) -> Self {
        Evaluator {
            weights,
            vocab,
            registry,
        }
    }

    /// Evaluate a binary or multiclass metric: render, tokenize, one forward
    /// pass, restricted normalization, argmax.
    pub fn evaluate(
        &self,
        metric: &CompiledMetric,
        vars: &NodeVariables,
    ) -> Result<EvalResult, ScoreError> {
        let adapter = self.lookup_adapter(metric)?;
        self.evaluate_detached(metric, vars, Some(&adapter))
    }

    /// Evaluate with an explicit adapter (or none, for the raw backbone),
    /// bypassing the registry. Training and baseline comparisons use this.
    pub fn evaluate_detached(
        &self,
        metric: &CompiledMetric,
        vars: &NodeVariables,
        adapter: Option<&LoraAdapter<f32>>,
    ) -> Result<EvalResult, ScoreError> {
        let start = Instant::now();
        let prompt = render(metric, vars)?;
        self.score_prompt(metric, &prompt, adapter, start)
    }

    /// Evaluate under a service-level token budget tighter than the model's
    /// own context window; rejects before running the forward pass.
    pub fn evaluate_limited(
        &self,
        metric: &CompiledMetric,
        vars: &NodeVariables,
        max_tokens: usize,
    ) -> Result<EvalResult, ScoreError> {
        let start = Instant::now();
        let prompt = render(metric, vars)?;
        let tokens = self.vocab.encode(&prompt).len();
        if tokens > max_tokens {
            return Err(ScoreError::ContextOverflow {
                tokens,
                max: max_tokens,
            });
        }
        let adapter = self.lookup_adapter(metric)?;
        self.score_prompt(metric, &prompt, Some(&adapter), start)
    }

    /// Evaluate a multilabel metric: one binary pass per label, each over the
    /// base prompt plus the label's rendered suffix.
    pub fn evaluate_multilabel(
        &self,
        metric: &CompiledMetric,
        vars: &NodeVariables,
    ) -> Result<Vec<LabelResult>, ScoreError> {
        let adapter = self.lookup_adapter(metric)?;
        self.evaluate_multilabel_detached(metric, vars, Some(&adapter))
    }

    pub fn evaluate_multilabel_detached(
        &self,
        metric: &CompiledMetric,
        vars: &NodeVariables,
        adapter: Option<&LoraAdapter<f32>>,
    ) -> Result<Vec<LabelResult>, ScoreError> {
        let base = render(metric, vars)?;
        let mut out = Vec::with_capacity(metric.spec.class_words.len());
        for label in &metric.spec.class_words {
            let start = Instant::now();
            let suffix = render_label_suffix(metric, label)?;
            let prompt = format!("{base}{suffix}");
            let result = self.score_prompt(metric, &prompt, adapter, start)?;
            let positive_word = &metric.class_set.entries()[0].label;
            let positive = result
                .probability_of(positive_word)
                .map(|p| p >= metric.spec.threshold)
                .unwrap_or(false);
            out.push(LabelResult {
                label: label.clone(),
                positive,
                result,
            });
        }
        Ok(out)
    }

    fn lookup_adapter(&self, metric: &CompiledMetric) -> Result<Arc<LoraAdapter<f32>>, ScoreError> {
        self.registry
            .get(&metric.spec.adapter_ref)
            .ok_or_else(|| ScoreError::AdapterMissing {
                metric: metric.spec.name.clone(),
                adapter: metric.spec.adapter_ref.clone(),
            })
    }

    fn score_prompt(
        &self,
        metric: &CompiledMetric,
        prompt: &str,
        adapter: Option<&LoraAdapter<f32>>,
        start: Instant,
    ) -> Result<EvalResult, ScoreError> {
        let tokens = self.vocab.encode(prompt);
        let max = self.weights.config().max_context;
        if tokens.len() > max {
            return Err(ScoreError::ContextOverflow {
                tokens: tokens.len(),
                max,
            });
        }
        let logits = self.weights.forward(&tokens, adapter)?;
        let distribution = restricted_normalize(&logits, &metric.class_set)?;
        let best = argmax_first(&distribution);
        let class_logits = metric
            .class_set
            .entries()
            .iter()
            .map(|e| ClassLogit {
                class: e.label.clone(),
                logit: logits.as_slice()[e.token_id as usize],
            })
            .collect();
        Ok(EvalResult {
            metric: metric.spec.name.clone(),
            label: distribution[best].0.clone(),
            confidence: distribution[best].1,
            distribution: distribution
                .into_iter()
                .map(|(class, p)| ClassProb { class, p })
                .collect(),
            class_logits,
            prompt_tokens: tokens.len(),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}
