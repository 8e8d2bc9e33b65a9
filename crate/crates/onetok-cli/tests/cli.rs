//! CLI and bench harness integration: the installed binary end to end, the
//! closed-loop throughput sanity law, and remote report plumbing.

use std::process::Command;
use std::time::Duration;

use onetok_cli::bench;
use onetok_cli::reportcmd::{classify_report, roc_from_scored, score_dataset};
use onetok_cli::runner::{MetricRunner, RemoteRunner};
use onetok_core::adapter::{LoraAdapter, LoraConfig};
use onetok_core::classmap::ClassKind;
use onetok_core::model::{ModelConfig, ModelWeights};
use onetok_core::template::examples;
use onetok_core::trainer::{generate_toy_dataset, ToyTask};
use onetok_serve::{Server, ServiceConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onetok"))
}

struct LiveService {
    running: onetok_serve::RunningServer,
    _dir: tempfile::TempDir,
}

/// Tiny backbone + marker metric behind a real socket.
fn live_service(max_concurrent: usize) -> LiveService {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::<f32>::init_random(cfg).unwrap();
    model.save(dir.path().join("model.bin")).unwrap();
    let adapters = dir.path().join("adapters");
    std::fs::create_dir(&adapters).unwrap();
    LoraAdapter::<f32>::init("marker", &cfg, LoraConfig::with_rank(2), 2)
        .unwrap()
        .save(adapters.join("marker.lora"))
        .unwrap();
    let metrics = dir.path().join("metrics");
    std::fs::create_dir(&metrics).unwrap();
    std::fs::write(metrics.join("marker.spec"), examples::MARKER).unwrap();

    let config = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        model: dir.path().join("model.bin"),
        adapters,
        metrics: Some(metrics),
        vocab: None,
        max_concurrent,
        max_context: cfg.max_context,
        thresholds: Vec::new(),
    };
    let mut running = Server::bind(config).unwrap().start().unwrap();
    running.wait_ready();
    LiveService { running, _dir: dir }
}

#[test]
fn binary_runs_the_full_offline_flow() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bin");
    let data = dir.path().join("marker.jsonl");
    let adapter = dir.path().join("marker.lora");
    let spec = dir.path().join("marker.spec");
    std::fs::write(&spec, examples::MARKER).unwrap();

    let status = bin()
        .args(["model", "init", "--arch", "tiny"])
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    assert!(status.success());

    let status = bin()
        .args(["dataset", "gen", "--kind", "marker", "--n", "60", "--seed", "3"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let status = bin()
        .args(["train", "--epochs", "1", "--rank", "2"])
        .arg("--model")
        .arg(&model)
        .arg("--spec")
        .arg(&spec)
        .arg("--dataset")
        .arg(&data)
        .arg("--out")
        .arg(&adapter)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(adapter.exists());

    // classify in-process over the trained adapter
    let output = bin()
        .args(["report", "classify"])
        .arg("--dataset")
        .arg(&data)
        .arg("--model")
        .arg(&model)
        .arg("--spec")
        .arg(&spec)
        .arg("--adapter")
        .arg(&adapter)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("accuracy"), "{text}");

    // in-process latency bench emits a CSV
    let csv = dir.path().join("lat.csv");
    let status = bin()
        .args(["bench", "latency", "--lengths", "16,32", "--repeats", "3", "--warmup", "1"])
        .arg("--model")
        .arg(&model)
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("length,mean_ms,p50_ms,p95_ms,samples\n"));
    assert_eq!(csv_text.lines().count(), 3);
}

#[test]
fn closed_loop_throughput_obeys_littles_law_at_c1() {
    let service = live_service(4);
    let url = service.running.base_url();
    let report = bench::throughput(
        &url,
        "marker",
        "the quick brown fox jumps over the lazy dog",
        1,
        Duration::from_secs(3),
    )
    .unwrap();
    assert!(report.completed > 50, "only {} requests completed", report.completed);
    assert_eq!(report.errors, 0);

    // closed loop at c=1: qps ~ 1000 / mean per-request wall time. The
    // server-side latency excludes client and transport overhead, so it
    // bounds qps from above; require agreement within 20% plus that slack.
    let implied = 1000.0 / report.mean_latency_ms;
    assert!(
        report.queries_per_sec <= implied * 1.2,
        "qps {:.1} exceeds implied ceiling {:.1}",
        report.queries_per_sec,
        implied
    );
    // and the wall-clock accounting itself must be consistent within 20%
    let wall_implied = report.completed as f64 / report.duration_secs;
    let ratio = report.queries_per_sec / wall_implied;
    assert!((0.8..=1.25).contains(&ratio), "ratio {ratio}");
    service.running.stop();
}

#[test]
fn unreachable_service_is_connection_error() {
    let err = bench::throughput(
        "http://127.0.0.1:1",
        "marker",
        "x",
        1,
        Duration::from_millis(100),
    )
    .unwrap_err();
    assert!(err.to_string().contains("connection"), "{err}");
}

#[test]
fn remote_latency_sweep_hits_exact_lengths() {
    let service = live_service(4);
    let url = service.running.base_url();
    // marker template overhead is fixed; pick lengths congruent to it
    let mut client = onetok_serve::HttpClient::new(&url).unwrap();
    let probe = |client: &mut onetok_serve::HttpClient, words: usize| -> usize {
        let input = vec!["pad"; words].join(" ");
        let body = serde_json::json!({"metric": "marker", "vars": {"input": input}});
        let (status, body) = client
            .post("/v1/evaluate", &serde_json::to_vec(&body).unwrap())
            .unwrap();
        assert_eq!(status, 200);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        v["prompt_tokens"].as_u64().unwrap() as usize
    };
    let t1 = probe(&mut client, 1);
    let t2 = probe(&mut client, 2);
    let per = t2 - t1;
    let base = t1 - per;
    let lengths = [base + 10 * per, base + 20 * per];
    let profile =
        bench::latency_remote(&url, "marker", &lengths, 3, 1, 256).unwrap();
    assert_eq!(profile.rows.len(), 2);
    assert_eq!(profile.rows[0].length, lengths[0]);
    assert_eq!(profile.rows[1].length, lengths[1]);
    assert!(profile.rows.iter().all(|r| r.samples == 3));
    service.running.stop();
}

#[test]
fn remote_report_matches_local_scoring() {
    let service = live_service(4);
    let url = service.running.base_url();
    let dataset = generate_toy_dataset(ToyTask::Marker, 24, 9).unwrap();
    let mut runner = MetricRunner::Remote(RemoteRunner::new(&url, "marker").unwrap());
    let scored = score_dataset(&mut runner, &dataset).unwrap();
    assert_eq!(scored.len(), 24);
    let classes = vec!["true".to_string(), "false".to_string()];
    let report = classify_report(&scored, &classes, ClassKind::Binary).unwrap();
    let f1 = report.f1();
    assert!((0.0..=1.0).contains(&f1));
    // roc over the same scores works when both classes are present
    let roc = roc_from_scored(&scored, "true").unwrap();
    assert!((0.0..=1.0).contains(&roc.auc));
    service.running.stop();
}
