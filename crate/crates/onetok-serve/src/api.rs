//! Wire schemas and request routing.
//!
//! Endpoints:
//! - `POST /v1/evaluate`  — run one metric over node variables
//! - `POST /v1/metrics`   — register a metric from spec-file text (`?replace=true` to overwrite)
//! - `GET  /v1/metrics`   — list registered metrics
//! - `GET  /health`       — load state
//!
//! Errors are `{"error": {"code": ..., "message": ...}}` with a matching
//! status: 400 malformed JSON, 404 unknown metric, 409 duplicate, 413 context
//! overflow, 422 invalid spec or variables, 503 at the concurrency limit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use onetok_core::classmap::ClassKind;
use onetok_core::scoring::{ClassLogit, ClassProb, EvalResult, LabelResult, ScoreError};
use onetok_core::template::NodeVariables;

use crate::http::{Request, Response};
use crate::state::{RegisterError, ServiceState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub metric: String,
    pub vars: NodeVariables,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

/// Single-label evaluation payload; field order is the wire contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireEvalResult {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub label: String,
    pub confidence: f64,
    pub distribution: Vec<ClassProb>,
    pub class_logits: Vec<ClassLogit>,
    pub prompt_tokens: usize,
    pub latency_ms: f64,
}

impl WireEvalResult {
    pub fn from_result(result: EvalResult, request_id: Option<String>) -> Self {
        WireEvalResult {
            metric: result.metric,
            request_id,
            label: result.label,
            confidence: result.confidence,
            distribution: result.distribution,
            class_logits: result.class_logits,
            prompt_tokens: result.prompt_tokens,
            latency_ms: result.latency_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireLabelResult {
    pub label: String,
    pub positive: bool,
    pub confidence: f64,
    pub distribution: Vec<ClassProb>,
}

/// Multilabel evaluation payload: one entry per label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireMultilabelResult {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub labels: Vec<WireLabelResult>,
    pub prompt_tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireError {
    pub error: WireErrorBody,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub node_type: String,
    pub class_kind: String,
    pub classes: Vec<String>,
    pub threshold: f64,
    pub adapter: String,
    pub adapter_params: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsList {
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<usize>,
}

fn error_response(status: u16, code: &str, message: impl Into<String>) -> Response {
    let body = serde_json::to_vec(&WireError {
        error: WireErrorBody {
            code: code.into(),
            message: message.into(),
        },
    })
    .expect("serializable");
    Response::json(status, body)
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    Response::json(200, serde_json::to_vec(value).expect("serializable"))
}

pub fn route(state: &ServiceState, request: &Request) -> Response {
    match (request.method.as_str(), request.path.as_str()) {
        ("GET", "/health") => health(state),
        ("GET", "/v1/metrics") => list_metrics(state),
        ("POST", "/v1/metrics") => register_metric(state, request),
        ("POST", "/v1/evaluate") => evaluate(state, request),
        ("GET", _) | ("POST", _) => error_response(404, "not_found", "no such route"),
        _ => error_response(405, "method_not_allowed", "use GET or POST"),
    }
}

fn health(state: &ServiceState) -> Response {
    let body = if let Some(message) = state.load_error() {
        Health {
            status: "error".into(),
            message: Some(message),
            metrics: None,
        }
    } else if state.engine().is_none() {
        Health {
            status: "loading".into(),
            message: None,
            metrics: None,
        }
    } else {
        Health {
            status: "ready".into(),
            message: None,
            metrics: Some(state.metric_count()),
        }
    };
    ok_json(&body)
}

fn list_metrics(state: &ServiceState) -> Response {
    let metrics = state.metric_summaries();
    ok_json(&MetricsList { metrics })
}

fn register_metric(state: &ServiceState, request: &Request) -> Response {
    if state.engine().is_none() {
        return error_response(503, "loading", "model is still loading");
    }
    let text = match std::str::from_utf8(&request.body) {
        Ok(t) => t,
        Err(_) => return error_response(422, "invalid_spec", "spec body must be utf-8 text"),
    };
    let replace = request.query_flag("replace");
    match state.register_spec_text(text, replace) {
        Ok(name) => ok_json(&serde_json::json!({ "registered": name })),
        Err(RegisterError::Duplicate { name }) => error_response(
            409,
            "duplicate_metric",
            format!("metric {name:?} is already registered (use ?replace=true)"),
        ),
        Err(RegisterError::Invalid(message)) => error_response(422, "invalid_spec", message),
    }
}

fn evaluate(state: &ServiceState, request: &Request) -> Response {
    let Some(engine) = state.engine() else {
        return error_response(503, "loading", "model is still loading");
    };
    let Some(_permit) = state.try_acquire() else {
        return error_response(
            503,
            "busy",
            format!(
                "concurrency limit of {} evaluations reached",
                state.config().max_concurrent
            ),
        );
    };
    let eval_req: EvalRequest = match serde_json::from_slice(&request.body) {
        Ok(r) => r,
        Err(e) => return error_response(400, "bad_json", e.to_string()),
    };
    // server-side timing: from request parse to response serialization
    let started = Instant::now();
    let Some(metric) = state.metric(&eval_req.metric) else {
        return error_response(
            404,
            "metric_not_found",
            format!("unknown metric: {}", eval_req.metric),
        );
    };

    if metric.class_set.kind == ClassKind::Multilabel {
        match engine.evaluator.evaluate_multilabel(&metric, &eval_req.vars) {
            Ok(results) => {
                let prompt_tokens = results.first().map(|r| r.result.prompt_tokens).unwrap_or(0);
                let max = state.effective_max_context();
                if let Some(overlong) = results.iter().find(|r| r.result.prompt_tokens > max) {
                    return score_error_response(ScoreError::ContextOverflow {
                        tokens: overlong.result.prompt_tokens,
                        max,
                    });
                }
                let labels = results
                    .into_iter()
                    .map(|r: LabelResult| WireLabelResult {
                        label: r.label,
                        positive: r.positive,
                        confidence: r.result.confidence,
                        distribution: r.result.distribution,
                    })
                    .collect();
                let body = WireMultilabelResult {
                    metric: metric.spec.name.clone(),
                    request_id: eval_req.request_id,
                    labels,
                    prompt_tokens,
                    latency_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                ok_json(&body)
            }
            Err(e) => score_error_response(e),
        }
    } else {
        match engine
            .evaluator
            .evaluate_limited(&metric, &eval_req.vars, state.effective_max_context())
        {
            Ok(mut result) => {
                result.latency_ms = started.elapsed().as_secs_f64() * 1e3;
                ok_json(&WireEvalResult::from_result(result, eval_req.request_id))
            }
            Err(e) => score_error_response(e),
        }
    }
}

fn score_error_response(e: ScoreError) -> Response {
    match e {
        ScoreError::ContextOverflow { tokens, max } => error_response(
            413,
            "context_overflow",
            format!("prompt is {tokens} tokens, limit is {max}"),
        ),
        ScoreError::AdapterMissing { metric, adapter } => error_response(
            404,
            "adapter_not_found",
            format!("metric {metric:?} has no adapter {adapter:?}"),
        ),
        ScoreError::Render(e) => error_response(422, "invalid_vars", e.to_string()),
        other => error_response(500, "internal", other.to_string()),
    }
}
