//! Train a toy adapter end-to-end and print per-phase quality.
//!
//! ```text
//! cargo run --release --example toy_train -- marker 600 2
//! cargo run --release --example toy_train -- corruption-adherence 2500 3
//! ```

use std::time::Instant;

use onetok_core::model::{ModelConfig, ModelWeights};
use onetok_core::template::{examples, parse_spec, validate_spec};
use onetok_core::tokenizer::Vocabulary;
use onetok_core::trainer::{
    generate_toy_dataset, split_by_trace, TrainRunConfig, Trainer, ToyTask,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task: ToyTask = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(ToyTask::Marker);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let rank: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(16);

    let spec_text = match task {
        ToyTask::Marker => examples::MARKER,
        ToyTask::CorruptionAdherence => examples::CONTEXT_ADHERENCE,
    };
    let vocab = Vocabulary::toy();
    let metric = validate_spec(&parse_spec(spec_text).unwrap(), vocab).unwrap();

    let started = Instant::now();
    let weights = ModelWeights::<f32>::init_random(ModelConfig::desk()).unwrap();
    let dataset = generate_toy_dataset(task, n, 7).unwrap();
    let split = split_by_trace(&dataset, 0.2, 13).unwrap();
    println!(
        "dataset: {} train / {} test  (gen+split {:.1}s)",
        split.train.len(),
        split.test.len(),
        started.elapsed().as_secs_f64()
    );

    let trainer = Trainer::new(&weights, vocab);
    let base = trainer
        .evaluate_metrics_opt(&metric, &split.test, None)
        .unwrap();
    println!(
        "base (no adapter): acc {:.3} precision {:.3} recall {:.3} f1 {:.3}",
        base.accuracy, base.precision, base.recall, base.f1
    );

    let mut cfg = TrainRunConfig::for_examples_epochs(split.train.len(), epochs);
    cfg.lora = onetok_core::adapter::LoraConfig::with_rank(rank);
    cfg.learning_rate = lr;
    cfg.batch_size = batch;
    cfg.total_steps = split.train.len().div_ceil(batch).max(1) * epochs;
    cfg.warmup_steps = cfg.total_steps / 10;
    println!(
        "training: steps {} batch {} lr {} rank {}",
        cfg.total_steps, cfg.batch_size, cfg.learning_rate, rank
    );
    let (adapter, report) = trainer
        .train(&metric, &split.train, Some(&split.test), &cfg)
        .unwrap();
    let first = &report.losses[..report.losses.len() / 10 + 1];
    let last = &report.losses[report.losses.len() - report.losses.len() / 10 - 1..];
    println!(
        "loss: first {:.4} .. last {:.4}  wall {:.1}s",
        first.iter().sum::<f64>() / first.len() as f64,
        last.iter().sum::<f64>() / last.len() as f64,
        report.wall_secs
    );
    let t = &report.train_metrics;
    println!(
        "train: acc {:.3} precision {:.3} recall {:.3} f1 {:.3}",
        t.accuracy, t.precision, t.recall, t.f1
    );
    if let Some(v) = &report.val_metrics {
        println!(
            "val:   acc {:.3} precision {:.3} recall {:.3} f1 {:.3}",
            v.accuracy, v.precision, v.recall, v.f1
        );
    }
    let _ = adapter;
    println!("total {:.1}s", started.elapsed().as_secs_f64());
}
