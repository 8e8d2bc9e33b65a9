//! Latency and throughput measurement.
//!
//! Latency sweeps run synthetic prompts padded to exact token lengths, drop
//! warmup iterations, and report per-length mean/p50/p95. Throughput runs a
//! closed loop of concurrent workers against a running service and reports
//! goodput plus shed (503) and error counts.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use onetok_core::model::{ModelError, ModelWeights};
use onetok_core::report::linear_fit;
use onetok_serve::http::{ClientError, HttpClient};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("service returned {status}: {body}")]
    Service { status: u16, body: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-length latency statistics, lengths strictly increasing.
#[derive(Debug, Clone)]
pub struct LatencyProfile {
    pub rows: Vec<LatencyRow>,
}

#[derive(Debug, Clone)]
pub struct LatencyRow {
    pub length: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

impl LatencyProfile {
    fn from_samples(length_samples: Vec<(usize, Vec<f64>)>) -> Self {
        let rows = length_samples
            .into_iter()
            .map(|(length, mut samples)| {
                samples.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                LatencyRow {
                    length,
                    mean_ms: mean,
                    p50_ms: percentile(&samples, 0.50),
                    p95_ms: percentile(&samples, 0.95),
                    samples: samples.len(),
                }
            })
            .collect();
        LatencyProfile { rows }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("length,mean_ms,p50_ms,p95_ms,samples\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.length, row.mean_ms, row.p50_ms, row.p95_ms, row.samples
            ));
        }
        out
    }

    pub fn means_are_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_ms >= w[0].mean_ms)
    }

    /// R-squared of a least-squares line through (length, mean_ms).
    pub fn linear_r2(&self) -> f64 {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.length as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.mean_ms).collect();
        linear_fit(&xs, &ys).2
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::from("length  mean_ms   p50_ms    p95_ms    samples\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{:<7} {:<9.3} {:<9.3} {:<9.3} {}\n",
                row.length, row.mean_ms, row.p50_ms, row.p95_ms, row.samples
            ));
        }
        let (slope, intercept, r2) = {
            let xs: Vec<f64> = self.rows.iter().map(|r| r.length as f64).collect();
            let ys: Vec<f64> = self.rows.iter().map(|r| r.mean_ms).collect();
            linear_fit(&xs, &ys)
        };
        out.push_str(&format!(
            "linear fit: {slope:.5} ms/token + {intercept:.3} ms (r2 {r2:.4})\n"
        ));
        out.push_str(
            "note: for scale context, production 3B-class evaluators on server GPUs \
             run ~500-token prompts in roughly 100 ms; desk-scale CPU numbers are \
             not comparable and are never asserted against that figure.\n",
        );
        out
    }
}

/// Index-based percentile over a sorted sample: `ceil(q * n) - 1`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

fn check_lengths(lengths: &[usize], max_context: usize) -> Result<(), BenchError> {
    if lengths.is_empty() {
        return Err(BenchError::Config("need at least one length".into()));
    }
    if !lengths.windows(2).all(|w| w[1] > w[0]) {
        return Err(BenchError::Config("lengths must be strictly increasing".into()));
    }
    for &l in lengths {
        if l == 0 {
            return Err(BenchError::Config("lengths must be positive".into()));
        }
        if l > max_context {
            return Err(BenchError::Config(format!(
                "length {l} exceeds max context {max_context}"
            )));
        }
    }
    Ok(())
}

/// In-process sweep: forward passes over synthetic token sequences of exactly
/// the requested lengths. `warmup` iterations per length are discarded.
pub fn latency_inprocess(
    model_path: &Path,
    lengths: &[usize],
    repeats: usize,
    warmup: usize,
) -> Result<LatencyProfile, BenchError> {
    let weights = ModelWeights::<f32>::load(model_path)?;
    latency_with_weights(&weights, lengths, repeats, warmup)
}

pub fn latency_with_weights(
    weights: &ModelWeights<f32>,
    lengths: &[usize],
    repeats: usize,
    warmup: usize,
) -> Result<LatencyProfile, BenchError> {
    check_lengths(lengths, weights.config().max_context)?;
    if repeats == 0 {
        return Err(BenchError::Config("repeats must be positive".into()));
    }
    let vocab_size = weights.config().vocab_size as u32;
    let mut collected = Vec::with_capacity(lengths.len());
    for &length in lengths {
        // deterministic synthetic prompt of exactly `length` tokens
        let tokens: Vec<u32> = (0..length).map(|i| (i as u32 * 31 + 7) % vocab_size).collect();
        for _ in 0..warmup {
            let _ = weights.forward(&tokens, None)?;
        }
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            let _ = weights.forward(&tokens, None)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        collected.push((length, samples));
    }
    Ok(LatencyProfile::from_samples(collected))
}

/// Remote sweep against a running service. Pad words are calibrated through
/// the service's own `prompt_tokens` so every request lands on the exact
/// target length; the recorded latency is the server-side measurement.
pub fn latency_remote(
    url: &str,
    metric: &str,
    lengths: &[usize],
    repeats: usize,
    warmup: usize,
    max_context: usize,
) -> Result<LatencyProfile, BenchError> {
    check_lengths(lengths, max_context)?;
    if repeats == 0 {
        return Err(BenchError::Config("repeats must be positive".into()));
    }
    let mut client = HttpClient::new(url)?;

    let tokens_for = |client: &mut HttpClient, words: usize| -> Result<(usize, f64), BenchError> {
        let input = pad_words(words);
        let request = serde_json::json!({"metric": metric, "vars": {"input": input}});
        let (status, body) = client.post("/v1/evaluate", &serde_json::to_vec(&request).unwrap())?;
        if status != 200 {
            return Err(BenchError::Service {
                status,
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        let v: serde_json::Value = serde_json::from_slice(&body).map_err(|e| BenchError::Service {
            status,
            body: e.to_string(),
        })?;
        Ok((
            v["prompt_tokens"].as_u64().unwrap_or(0) as usize,
            v["latency_ms"].as_f64().unwrap_or(0.0),
        ))
    };

    // calibrate: tokens(words) is affine in the word count
    let (t1, _) = tokens_for(&mut client, 1)?;
    let (t3, _) = tokens_for(&mut client, 3)?;
    let per_word = (t3 - t1) / 2;
    if per_word == 0 {
        return Err(BenchError::Config("padding calibration failed".into()));
    }
    let base = t1 - per_word;

    let mut collected = Vec::with_capacity(lengths.len());
    for &length in lengths {
        if length <= base {
            return Err(BenchError::Config(format!(
                "length {length} is below the metric's template overhead ({base} tokens)"
            )));
        }
        if (length - base) % per_word != 0 {
            return Err(BenchError::Config(format!(
                "length {length} is not reachable: template is {base} tokens and each pad word adds {per_word}"
            )));
        }
        let words = (length - base) / per_word;
        let (observed, _) = tokens_for(&mut client, words)?;
        if observed != length {
            return Err(BenchError::Config(format!(
                "padding calibration drifted: asked for {length} tokens, got {observed}"
            )));
        }
        for _ in 0..warmup.saturating_sub(1) {
            let _ = tokens_for(&mut client, words)?;
        }
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let (_, latency) = tokens_for(&mut client, words)?;
            samples.push(latency);
        }
        collected.push((length, samples));
    }
    Ok(LatencyProfile::from_samples(collected))
}

fn pad_words(count: usize) -> String {
    vec!["pad"; count].join(" ")
}

/// Closed-loop throughput result.
#[derive(Debug, Clone)]
pub struct ThroughputReport {
    pub concurrency: usize,
    pub duration_secs: f64,
    pub completed: u64,
    pub shed_503: u64,
    pub errors: u64,
    pub queries_per_sec: f64,
    pub mean_latency_ms: f64,
}

impl ThroughputReport {
    pub fn csv(&self) -> String {
        format!(
            "concurrency,duration_secs,completed,shed_503,errors,qps,mean_latency_ms\n{},{},{},{},{},{},{}\n",
            self.concurrency,
            self.duration_secs,
            self.completed,
            self.shed_503,
            self.errors,
            self.queries_per_sec,
            self.mean_latency_ms
        )
    }

    pub fn summary_text(&self) -> String {
        format!(
            "concurrency {}  duration {:.1}s  completed {}  qps {:.1}  shed(503) {}  errors {}  mean latency {:.2} ms\n",
            self.concurrency,
            self.duration_secs,
            self.completed,
            self.queries_per_sec,
            self.shed_503,
            self.errors,
            self.mean_latency_ms
        )
    }
}

/// Drive the service with `concurrency` closed-loop workers for `duration`.
/// Every response must be a well-formed evaluation payload or a structured
/// error; anything else counts as an error.
pub fn throughput(
    url: &str,
    metric: &str,
    input: &str,
    concurrency: usize,
    duration: Duration,
) -> Result<ThroughputReport, BenchError> {
    if concurrency == 0 {
        return Err(BenchError::Config("concurrency must be positive".into()));
    }
    // fail fast if the service is unreachable
    HttpClient::new(url)?.get("/health")?;

    let stop = Arc::new(AtomicBool::new(false));
    let completed = Arc::new(AtomicU64::new(0));
    let shed = Arc::new(AtomicU64::new(0));
    let errors = Arc::new(AtomicU64::new(0));
    let latency_us = Arc::new(AtomicU64::new(0));

    let request = serde_json::to_vec(&serde_json::json!({
        "metric": metric,
        "vars": {"input": input},
    }))
    .expect("serializable");

    let started = Instant::now();
    let mut workers = Vec::with_capacity(concurrency);
    for _ in 0..concurrency {
        let url = url.to_string();
        let stop = stop.clone();
        let completed = completed.clone();
        let shed = shed.clone();
        let errors = errors.clone();
        let latency_us = latency_us.clone();
        let request = request.clone();
        workers.push(std::thread::spawn(move || {
            let Ok(mut client) = HttpClient::new(&url) else {
                return;
            };
            while !stop.load(Ordering::Relaxed) {
                match client.post("/v1/evaluate", &request) {
                    Ok((200, body)) => {
                        match serde_json::from_slice::<serde_json::Value>(&body) {
                            Ok(v) if v["label"].is_string() && v["confidence"].is_number() => {
                                completed.fetch_add(1, Ordering::Relaxed);
                                let us = (v["latency_ms"].as_f64().unwrap_or(0.0) * 1e3) as u64;
                                latency_us.fetch_add(us, Ordering::Relaxed);
                            }
                            _ => {
                                errors.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                    Ok((503, _)) => {
                        shed.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(_) => {
                        errors.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(_) => {
                        errors.fetch_add(1, Ordering::Relaxed);
                        std::thread::sleep(Duration::from_millis(5));
                    }
                }
            }
        }));
    }
    std::thread::sleep(duration);
    stop.store(true, Ordering::Relaxed);
    for worker in workers {
        let _ = worker.join();
    }
    let elapsed = started.elapsed().as_secs_f64();
    let done = completed.load(Ordering::Relaxed);
    Ok(ThroughputReport {
        concurrency,
        duration_secs: elapsed,
        completed: done,
        shed_503: shed.load(Ordering::Relaxed),
        errors: errors.load(Ordering::Relaxed),
        queries_per_sec: done as f64 / elapsed,
        mean_latency_ms: if done == 0 {
            0.0
        } else {
            latency_us.load(Ordering::Relaxed) as f64 / 1e3 / done as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_indexing() {
        let sorted = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&sorted, 0.50), 2.0);
        assert_eq!(percentile(&sorted, 0.95), 4.0);
        // single sample: p50 == p95 == the sample
        assert_eq!(percentile(&[7.0], 0.50), 7.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn length_validation() {
        assert!(check_lengths(&[64, 128], 1024).is_ok());
        assert!(check_lengths(&[], 1024).is_err());
        assert!(check_lengths(&[128, 64], 1024).is_err());
        assert!(check_lengths(&[64, 2048], 1024).is_err());
    }

    #[test]
    fn repeats_one_collapses_stats() {
        let profile = LatencyProfile::from_samples(vec![(8, vec![3.5])]);
        let row = &profile.rows[0];
        assert_eq!(row.mean_ms, 3.5);
        assert_eq!(row.p50_ms, 3.5);
        assert_eq!(row.p95_ms, 3.5);
        assert_eq!(row.samples, 1);
    }

    #[test]
    fn zero_concurrency_is_config_error() {
        let err = throughput("http://127.0.0.1:9", "m", "x", 0, Duration::from_millis(1));
        assert!(matches!(err, Err(BenchError::Config(_))));
    }
}
