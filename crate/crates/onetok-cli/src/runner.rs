//! A metric runner that evaluates either in-process (model + adapter files)
//! or against a running service over HTTP. Report commands work identically
//! over both.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use onetok_core::adapter::{AdapterError, AdapterRegistry, LoraAdapter};
use onetok_core::model::{ModelError, ModelWeights};
use onetok_core::scoring::{EvalResult, Evaluator, ScoreError};
use onetok_core::template::{parse_spec, validate_spec, CompiledMetric, NodeVariables, SpecError};
use onetok_core::tokenizer::{VocabError, Vocabulary};
use onetok_serve::api::{EvalRequest, WireEvalResult};
use onetok_serve::http::{ClientError, HttpClient};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("service returned {status}: {body}")]
    Service { status: u16, body: String },
}

pub enum MetricRunner {
    Local(LocalRunner),
    Remote(RemoteRunner),
}

pub struct LocalRunner {
    pub evaluator: Evaluator,
    pub metric: CompiledMetric,
}

pub struct RemoteRunner {
    pub client: HttpClient,
    pub metric: String,
}

impl LocalRunner {
    /// Load model, spec and adapter files into a standalone evaluator.
    pub fn from_files(
        model: &Path,
        spec: &Path,
        adapter: &Path,
        vocab: Option<&Path>,
    ) -> Result<Self, RunnerError> {
        let weights = ModelWeights::<f32>::load(model)?;
        let vocab = match vocab {
            Some(path) => Arc::new(Vocabulary::load(path)?),
            None => Arc::new(Vocabulary::toy().clone()),
        };
        let spec = parse_spec(&std::fs::read_to_string(spec)?)?;
        let metric = validate_spec(&spec, &vocab)?;
        let registry = Arc::new(AdapterRegistry::new(*weights.config()));
        registry.register(LoraAdapter::load(adapter)?, false)?;
        Ok(LocalRunner {
            evaluator: Evaluator::new(Arc::new(weights), vocab, registry),
            metric,
        })
    }
}

impl RemoteRunner {
    pub fn new(url: &str, metric: &str) -> Result<Self, RunnerError> {
        Ok(RemoteRunner {
            client: HttpClient::new(url)?,
            metric: metric.to_string(),
        })
    }
}

impl MetricRunner {
    pub fn evaluate(&mut self, vars: &NodeVariables) -> Result<EvalResult, RunnerError> {
        match self {
            MetricRunner::Local(runner) => {
                Ok(runner.evaluator.evaluate(&runner.metric, vars)?)
            }
            MetricRunner::Remote(runner) => {
                let request = EvalRequest {
                    metric: runner.metric.clone(),
                    vars: vars.clone(),
                    request_id: None,
                };
                let body = serde_json::to_vec(&request).expect("serializable");
                let (status, response) = runner.client.post("/v1/evaluate", &body)?;
                if status != 200 {
                    return Err(RunnerError::Service {
                        status,
                        body: String::from_utf8_lossy(&response).into_owned(),
                    });
                }
                let wire: WireEvalResult =
                    serde_json::from_slice(&response).map_err(|e| RunnerError::Service {
                        status,
                        body: format!("unparseable response: {e}"),
                    })?;
                Ok(EvalResult {
                    metric: wire.metric,
                    label: wire.label,
                    confidence: wire.confidence,
                    distribution: wire.distribution,
                    class_logits: wire.class_logits,
                    prompt_tokens: wire.prompt_tokens,
                    latency_ms: wire.latency_ms,
                })
            }
        }
    }

    /// Decision threshold the runner's metric uses (remote metrics report it
    /// in the listing; default 0.5 when unavailable).
    pub fn threshold(&mut self) -> f64 {
        match self {
            MetricRunner::Local(runner) => runner.metric.spec.threshold,
            MetricRunner::Remote(runner) => {
                let Ok((200, body)) = runner.client.get("/v1/metrics") else {
                    return 0.5;
                };
                serde_json::from_slice::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| {
                        v["metrics"].as_array().and_then(|list| {
                            list.iter()
                                .find(|m| m["name"] == runner.metric.as_str())
                                .and_then(|m| m["threshold"].as_f64())
                        })
                    })
                    .unwrap_or(0.5)
            }
        }
    }
}
