//! Adapter fine-tuning against a frozen backbone.
//!
//! The loss is cross-entropy over the restricted class distribution at the
//! final position: only class-token logits participate, every other
//! vocabulary entry has an exactly-zero gradient. Optimization is AdamW with
//! linear warmup and cosine decay, updating adapter tensors only — the
//! backbone is shared immutably and its bytes are identical before and after
//! a run.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{LoraAdapter, LoraConfig, LoraGrads};
use crate::classmap::{ClassKind, ClassSet};
use crate::model::{Logits, ModelError, ModelWeights};
use crate::report::{binary_metrics, multiclass_metrics, ClassifyMetrics};
use crate::scoring::restricted_probs;
use crate::template::{render, render_label_suffix, CompiledMetric, NodeVariables, SpecError};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("example {index}: label {label:?} is not one of the metric's class words")]
    BadLabel { index: usize, label: String },
    #[error("example {index}: prompt is {tokens} tokens, exceeding max context {max}")]
    PromptTooLong {
        index: usize,
        tokens: usize,
        max: usize,
    },
    #[error("example {index}: {source}")]
    Render {
        index: usize,
        #[source]
        source: SpecError,
    },
    #[error("label {label:?} not in class set")]
    LabelNotInClasses { label: String },
    #[error("dataset line {line}: {message}")]
    DatasetParse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] crate::adapter::AdapterError),
}

// ---------------------------------------------------------------------------
// restricted cross-entropy
// ---------------------------------------------------------------------------

/// Loss and gradient over a slice of class logits: `loss = -log p[label]`,
/// `d loss / d s_i = p_i - y_i`. Probabilities in f64.
pub fn restricted_ce_from_class_logits<T: Scalar>(
    class_logits: &[T],
    label_idx: usize,
) -> (f64, Vec<T>) {
    debug_assert!(label_idx < class_logits.len());
    let max = class_logits
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = class_logits
        .iter()
        .map(|v| (v.to_f64() - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label_idx] / sum).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let p = e / sum;
            let y = if i == label_idx { 1.0 } else { 0.0 };
            T::from_f64(p - y)
        })
        .collect();
    (loss, grad)
}

/// Restricted cross-entropy of a full logit vector against a class set.
pub fn restricted_ce_loss(
    logits: &Logits<f32>,
    classes: &ClassSet,
    label: &str,
) -> Result<f64, TrainError> {
    let idx = class_index(classes, label)?;
    let ids = classes.token_ids();
    let probs = restricted_probs(logits.as_slice(), &ids);
    Ok(-probs[idx].ln())
}

/// Loss plus the gradient over the **full** vocabulary: non-class entries are
/// never written, so they are exactly zero.
pub fn restricted_ce_loss_full_grad<T: Scalar>(
    logits: &[T],
    classes: &ClassSet,
    label: &str,
) -> Result<(f64, Vec<T>), TrainError> {
    let idx = class_index(classes, label)?;
    let ids = classes.token_ids();
    let class_logits: Vec<T> = ids.iter().map(|&id| logits[id as usize]).collect();
    let (loss, class_grad) = restricted_ce_from_class_logits(&class_logits, idx);
    let mut full = vec![T::ZERO; logits.len()];
    for (&id, g) in ids.iter().zip(class_grad) {
        full[id as usize] = g;
    }
    Ok((loss, full))
}

fn class_index(classes: &ClassSet, label: &str) -> Result<usize, TrainError> {
    classes
        .entries()
        .iter()
        .position(|e| e.label == label)
        .ok_or_else(|| TrainError::LabelNotInClasses {
            label: label.to_string(),
        })
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay over a flat list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: params and grads must be index-aligned with the shapes the
    /// optimizer was created with.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr_t = T::from_f64(lr);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            let gd = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + ob1 * g;
                vd[i] = b2 * vd[i] + ob2 * g * g;
                let m_hat = md[i] * inv_bc1;
                let v_hat = vd[i] * inv_bc2;
                pd[i] = pd[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// run configuration and schedule
// ---------------------------------------------------------------------------

/// Hyperparameters for one adapter training run.
#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Cosine decay to zero after warmup; constant otherwise.
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub lora: LoraConfig,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainRunConfig {
    /// Defaults for a dataset of `n_examples`: 3 epochs, batch 16, warmup
    /// 10% of steps, lr 3e-3, cosine decay to zero.
    pub fn for_examples(n_examples: usize) -> Self {
        Self::for_examples_epochs(n_examples, 3)
    }

    pub fn for_examples_epochs(n_examples: usize, epochs: usize) -> Self {
        let batch_size = 16usize;
        let steps_per_epoch = n_examples.div_ceil(batch_size).max(1);
        let total_steps = steps_per_epoch * epochs;
        TrainRunConfig {
            learning_rate: 3e-3,
            warmup_steps: total_steps / 10,
            total_steps,
            cosine_decay: true,
            batch_size,
            seed: 42,
            lora: LoraConfig::desk(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay to zero (or a constant plateau when decay
/// is disabled).
pub fn lr_at_step(cfg: &TrainRunConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if !cfg.cosine_decay {
        return cfg.learning_rate;
    }
    let total = cfg.total_steps.max(cfg.warmup_steps + 1);
    let progress = (step - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps) as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

// ---------------------------------------------------------------------------
// dataset types
// ---------------------------------------------------------------------------

/// Ground-truth label: one class word, or a label set for multilabel metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Single(String),
    Set(Vec<String>),
}

impl LabelValue {
    pub fn single(&self) -> Option<&str> {
        match self {
            LabelValue::Single(s) => Some(s),
            LabelValue::Set(_) => None,
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        match self {
            LabelValue::Single(s) => s == label,
            LabelValue::Set(set) => set.iter().any(|s| s == label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub vars: NodeVariables,
    pub label: LabelValue,
    pub trace_id: String,
}

/// Line-delimited dataset file: one JSON object per line.
pub fn write_dataset(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("serializable");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>, TrainError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample =
            serde_json::from_str(&line).map_err(|e| TrainError::DatasetParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(ex);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// trace-level split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub warnings: Vec<String>,
}

/// Split at the level of full traces: no `trace_id` ever appears in both
/// halves. Deterministic for a fixed seed.
pub fn split_by_trace(
    dataset: &[TrainingExample],
    test_fraction: f64,
    seed: u64,
) -> Result<SplitOutcome, TrainError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(TrainError::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut traces: Vec<&str> = Vec::new();
    for ex in dataset {
        if !traces.contains(&ex.trace_id.as_str()) {
            traces.push(&ex.trace_id);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = traces.clone();
    shuffled.shuffle(&mut rng);
    let n_test = ((shuffled.len() as f64) * test_fraction).round() as usize;
    let test_traces: std::collections::HashSet<&str> = shuffled[..n_test].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for ex in dataset {
        if test_traces.contains(ex.trace_id.as_str()) {
            test.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    let mut warnings = Vec::new();
    if train.is_empty() {
        warnings.push("train split is empty".to_string());
    }
    if test.is_empty() {
        warnings.push("test split is empty".to_string());
    }
    Ok(SplitOutcome {
        train,
        test,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// toy dataset generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    /// Label is true iff the marker word appears in the input.
    Marker,
    /// (question, documents, answer) triples; negatives swap an entity in the
    /// answer against the document.
    CorruptionAdherence,
}

impl std::str::FromStr for ToyTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "marker" => Ok(ToyTask::Marker),
            "corruption-adherence" => Ok(ToyTask::CorruptionAdherence),
            other => Err(format!(
                "unknown toy task {other:?} (expected marker or corruption-adherence)"
            )),
        }
    }
}

const PERSONS: [&str; 10] = [
    "alice", "bruno", "chloe", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas",
];
const CITIES: [&str; 10] = [
    "paris", "london", "tokyo", "berlin", "cairo", "oslo", "lima", "quito", "dakar", "hanoi",
];
const JOBS: [&str; 6] = ["baker", "pilot", "doctor", "farmer", "singer", "teacher"];
/// Corruption vocabulary: entities that appear only in corrupted answers,
/// never in documents. The toy world's hallucinations are drawn from here,
/// which keeps the label a first-order function of the prompt — a randomly
/// initialized frozen backbone has no mechanism for token-coincidence
/// features, so a same-pool swap is not learnable at desk scale.
const CITIES_FOIL: [&str; 6] = ["madrid", "nairobi", "seoul", "vienna", "bogota", "perth"];
const JOBS_FOIL: [&str; 4] = ["juggler", "plumber", "barista", "clerk"];
const FILLER: [&str; 24] = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "while", "cat", "sleeps",
    "on", "mat", "weather", "today", "looks", "bright", "and", "calm", "outside", "please",
    "tell", "me", "about",
];
const MARKER_WORD: &str = "zebra";

/// Deterministic synthetic dataset for the given toy task.
pub fn generate_toy_dataset(
    kind: ToyTask,
    n: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        ToyTask::Marker => Ok(generate_marker(n, &mut rng)),
        ToyTask::CorruptionAdherence => Ok(generate_corruption(n, &mut rng)),
    }
}

fn generate_marker(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let words: Vec<&str> = (0..rng.random_range(8..14usize))
            .map(|_| FILLER[rng.random_range(0..FILLER.len())])
            .collect();
        let mut words: Vec<String> = words.into_iter().map(str::to_string).collect();
        if positive {
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, MARKER_WORD.to_string());
        }
        out.push(TrainingExample {
            vars: NodeVariables {
                input: Some(words.join(" ")),
                ..Default::default()
            },
            label: LabelValue::Single(if positive { "true" } else { "false" }.to_string()),
            trace_id: format!("marker-{i:05}"),
        });
    }
    out
}

fn generate_corruption(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingExample> {
    let traces = n.div_ceil(2);
    let mut out = Vec::with_capacity(n);
    for t in 0..traces {
        let trace_id = format!("trace-{t:05}");
        let person = PERSONS[rng.random_range(0..PERSONS.len())];
        let city = CITIES[rng.random_range(0..CITIES.len())];
        let job = JOBS[rng.random_range(0..JOBS.len())];
        let pattern = rng.random_range(0..3u8);

        let (documents, question, answer_true, answer_false) = match pattern {
            0 => {
                let foil = CITIES_FOIL[rng.random_range(0..CITIES_FOIL.len())];
                (
                    format!("{person} was born in {city}."),
                    format!("where was {person} born"),
                    format!("{person} was born in {city}"),
                    format!("{person} was born in {foil}"),
                )
            }
            1 => {
                let foil = CITIES_FOIL[rng.random_range(0..CITIES_FOIL.len())];
                (
                    format!("{person} lives in {city}."),
                    format!("where does {person} live"),
                    format!("{person} lives in {city}"),
                    format!("{person} lives in {foil}"),
                )
            }
            _ => {
                let foil = JOBS_FOIL[rng.random_range(0..JOBS_FOIL.len())];
                (
                    format!("{person} works as a {job}."),
                    format!("what does {person} do"),
                    format!("{person} works as a {job}"),
                    format!("{person} works as a {foil}"),
                )
            }
        };

        let positive = TrainingExample {
            vars: NodeVariables {
                question: Some(question.clone()),
                answer: Some(answer_true),
                documents: Some(documents.clone()),
                ..Default::default()
            },
            label: LabelValue::Single("true".into()),
            trace_id: trace_id.clone(),
        };
        let negative = TrainingExample {
            vars: NodeVariables {
                question: Some(question),
                answer: Some(answer_false),
                documents: Some(documents),
                ..Default::default()
            },
            label: LabelValue::Single("false".into()),
            trace_id,
        };
        out.push(positive);
        if out.len() < n {
            out.push(negative);
        }
        if out.len() == n {
            break;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Per-step losses and final quality of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub train_metrics: ClassifyMetrics,
    pub val_metrics: Option<ClassifyMetrics>,
    pub wall_secs: f64,
    pub steps: usize,
    pub examples: usize,
}

impl TrainReport {
    /// Per-step loss CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, loss) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{loss}\n"));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "steps: {}  examples: {}  wall: {:.1}s\n",
            self.steps, self.examples, self.wall_secs
        ));
        let m = &self.train_metrics;
        out.push_str(&format!(
            "train: accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}\n",
            m.accuracy, m.precision, m.recall, m.f1
        ));
        if let Some(m) = &self.val_metrics {
            out.push_str(&format!(
                "val:   accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}\n",
                m.accuracy, m.precision, m.recall, m.f1
            ));
        }
        out
    }
}

/// Tokenized training item: prompt tokens plus the index of the target class.
struct TrainItem {
    tokens: Vec<u32>,
    label_idx: usize,
}

/// Adapter trainer bound to a frozen backbone and vocabulary.
pub struct Trainer<'a> {
    pub weights: &'a ModelWeights<f32>,
    pub vocab: &'a Vocabulary,
}

impl<'a> Trainer<'a> {
    pub fn new(weights: &'a ModelWeights<f32>, vocab: &'a Vocabulary) -> Self {
        Trainer { weights, vocab }
    }

    /// Train a fresh adapter for `metric` on `dataset`. The returned adapter
    /// is not registered anywhere; the caller decides when it goes live.
    pub fn train(
        &self,
        metric: &CompiledMetric,
        dataset: &[TrainingExample],
        val: Option<&[TrainingExample]>,
        cfg: &TrainRunConfig,
    ) -> Result<(LoraAdapter<f32>, TrainReport), TrainError> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let started = Instant::now();
        let items = self.prepare_items(metric, dataset)?;
        let class_ids = metric.class_set.token_ids();

        let mut adapter =
            LoraAdapter::<f32>::init(&metric.spec.name, self.weights.config(), cfg.lora.clone(), cfg.seed)?;
        let shapes: Vec<Vec<usize>> = adapter
            .sites()
            .iter()
            .flat_map(|s| [s.a.shape().to_vec(), s.b.shape().to_vec()])
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut optimizer = AdamW::<f32>::new(
            &shape_refs,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
            cfg.weight_decay,
        );

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut cursor = items.len(); // trigger a shuffle before the first batch
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        let mut losses = Vec::with_capacity(cfg.total_steps);

        for step in 0..cfg.total_steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            // parallel per-example forward/backward, deterministic ordered sum
            let per_example: Vec<(f64, LoraGrads<f32>)> = batch
                .par_iter()
                .map(|&idx| self.example_grad(&items[idx], &adapter, &class_ids))
                .collect();
            let mut grads = LoraGrads::zeros_like(&adapter);
            let mut loss_sum = 0.0;
            for (loss, g) in &per_example {
                loss_sum += loss;
                grads.accumulate(g);
            }
            let inv_batch = 1.0 / cfg.batch_size as f64;
            grads.scale(inv_batch as f32);
            losses.push(loss_sum * inv_batch);

            let lr = lr_at_step(cfg, step);
            let mut params: Vec<&mut Tensor<f32>> = Vec::with_capacity(shapes.len());
            for site in adapter.sites_mut() {
                params.push(&mut site.a);
                params.push(&mut site.b);
            }
            let mut grad_refs: Vec<&Tensor<f32>> = Vec::with_capacity(shapes.len());
            for i in 0..grads.len() {
                let (a, b) = grads.site(i);
                grad_refs.push(a);
                grad_refs.push(b);
            }
            optimizer.step(&mut params, &grad_refs, lr);
        }

        let train_metrics = self.evaluate_metrics(metric, dataset, &adapter)?;
        let val_metrics = match val {
            Some(v) if !v.is_empty() => Some(self.evaluate_metrics(metric, v, &adapter)?),
            _ => None,
        };
        let report = TrainReport {
            losses,
            train_metrics,
            val_metrics,
            wall_secs: started.elapsed().as_secs_f64(),
            steps: cfg.total_steps,
            examples: dataset.len(),
        };
        Ok((adapter, report))
    }

    /// Render and tokenize every example; multilabel metrics expand to one
    /// item per (example, label) with a true/false target.
    fn prepare_items(
        &self,
        metric: &CompiledMetric,
        dataset: &[TrainingExample],
    ) -> Result<Vec<TrainItem>, TrainError> {
        let max = self.weights.config().max_context;
        let mut items = Vec::with_capacity(dataset.len());
        for (index, ex) in dataset.iter().enumerate() {
            let base = render(metric, &ex.vars).map_err(|source| TrainError::Render {
                index,
                source,
            })?;
            if metric.class_set.kind == ClassKind::Multilabel {
                for label in &metric.spec.class_words {
                    let suffix =
                        render_label_suffix(metric, label).map_err(|source| TrainError::Render {
                            index,
                            source,
                        })?;
                    let tokens = self.vocab.encode(&format!("{base}{suffix}"));
                    if tokens.len() > max {
                        return Err(TrainError::PromptTooLong {
                            index,
                            tokens: tokens.len(),
                            max,
                        });
                    }
                    let target = if ex.label.contains(label) { 0 } else { 1 };
                    items.push(TrainItem {
                        tokens,
                        label_idx: target,
                    });
                }
            } else {
                let label = ex.label.single().ok_or_else(|| TrainError::BadLabel {
                    index,
                    label: format!("{:?}", ex.label),
                })?;
                let label_idx = metric
                    .class_set
                    .entries()
                    .iter()
                    .position(|e| e.label == label)
                    .ok_or_else(|| TrainError::BadLabel {
                        index,
                        label: label.to_string(),
                    })?;
                let tokens = self.vocab.encode(&base);
                if tokens.len() > max {
                    return Err(TrainError::PromptTooLong {
                        index,
                        tokens: tokens.len(),
                        max,
                    });
                }
                items.push(TrainItem { tokens, label_idx });
            }
        }
        Ok(items)
    }

    fn example_grad(
        &self,
        item: &TrainItem,
        adapter: &LoraAdapter<f32>,
        class_ids: &[u32],
    ) -> (f64, LoraGrads<f32>) {
        let tape = self
            .weights
            .forward_train(&item.tokens, adapter)
            .expect("items pre-validated");
        let class_logits = self.weights.class_logits_from_tape(&tape, class_ids);
        let (loss, class_grad) = restricted_ce_from_class_logits(&class_logits, item.label_idx);
        let d_logits: Vec<(u32, f32)> = class_ids
            .iter()
            .copied()
            .zip(class_grad)
            .collect();
        let mut grads = LoraGrads::zeros_like(adapter);
        self.weights.backward(&tape, adapter, &d_logits, &mut grads);
        (loss, grads)
    }

    /// Accuracy/precision/recall/F1 of the adapter on a labeled dataset,
    /// using the restricted distribution at the metric's threshold.
    pub fn evaluate_metrics(
        &self,
        metric: &CompiledMetric,
        dataset: &[TrainingExample],
        adapter: &LoraAdapter<f32>,
    ) -> Result<ClassifyMetrics, TrainError> {
        self.evaluate_metrics_opt(metric, dataset, Some(adapter))
    }

    /// Same, with an optional adapter (`None` scores the raw backbone).
    pub fn evaluate_metrics_opt(
        &self,
        metric: &CompiledMetric,
        dataset: &[TrainingExample],
        adapter: Option<&LoraAdapter<f32>>,
    ) -> Result<ClassifyMetrics, TrainError> {
        let items = self.prepare_items(metric, dataset)?;
        let class_ids = metric.class_set.token_ids();
        let preds: Vec<(usize, usize)> = items
            .par_iter()
            .map(|item| {
                let logits = self
                    .weights
                    .forward(&item.tokens, adapter)
                    .expect("items pre-validated");
                let probs = restricted_probs(logits.as_slice(), &class_ids);
                let pred = predict_index(&probs, metric.spec.threshold);
                (pred, item.label_idx)
            })
            .collect();
        if metric.class_set.len() == 2 {
            let pairs: Vec<(bool, bool)> = preds
                .iter()
                .map(|&(pred, truth)| (pred == 0, truth == 0))
                .collect();
            Ok(binary_metrics(&pairs).0)
        } else {
            let labels: Vec<String> = metric
                .class_set
                .entries()
                .iter()
                .map(|e| e.label.clone())
                .collect();
            let report = multiclass_metrics(&preds, &labels);
            Ok(ClassifyMetrics {
                accuracy: report.accuracy,
                precision: report.macro_precision,
                recall: report.macro_recall,
                f1: report.macro_f1,
            })
        }
    }
}

/// Predicted class index: for a two-class distribution, the first class wins
/// iff its probability meets the threshold; otherwise plain argmax with ties
/// toward the earlier class.
pub fn predict_index(probs: &[f64], threshold: f64) -> usize {
    if probs.len() == 2 {
        return usize::from(probs[0] < threshold);
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
