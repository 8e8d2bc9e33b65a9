//! Shared service state: one resident backbone, the adapter registry, and the
//! registered-metric map. A metric becomes visible atomically — readers see
//! either nothing or a fully validated spec with its adapter resident.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use onetok_core::adapter::{AdapterRegistry, LoraAdapter};
use onetok_core::model::ModelWeights;
use onetok_core::scoring::Evaluator;
use onetok_core::template::{parse_spec, serialize_spec, validate_spec, CompiledMetric};
use onetok_core::tokenizer::Vocabulary;

use crate::api::MetricSummary;
use crate::config::ServiceConfig;

pub struct Engine {
    pub evaluator: Evaluator,
}

pub struct ServiceState {
    config: ServiceConfig,
    engine: OnceLock<Engine>,
    load_error: OnceLock<String>,
    metrics: RwLock<HashMap<String, Arc<CompiledMetric>>>,
    inflight: AtomicUsize,
}

#[derive(Debug)]
pub enum RegisterError {
    Duplicate { name: String },
    Invalid(String),
}

/// RAII concurrency permit; dropping it releases the slot.
pub struct Permit<'a>(&'a AtomicUsize);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl ServiceState {
    pub fn new(config: ServiceConfig) -> Self {
        ServiceState {
            config,
            engine: OnceLock::new(),
            load_error: OnceLock::new(),
            metrics: RwLock::new(HashMap::new()),
            inflight: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Load weights and vocabulary from the configured paths, then register
    /// any metric specs found in the metrics directory.
    pub fn load(&self) -> Result<(), String> {
        let result = self.load_inner();
        if let Err(e) = &result {
            let _ = self.load_error.set(e.clone());
        }
        result
    }

    fn load_inner(&self) -> Result<(), String> {
        let weights = ModelWeights::<f32>::load(&self.config.model)
            .map_err(|e| format!("loading model {}: {e}", self.config.model.display()))?;
        let vocab = match &self.config.vocab {
            Some(path) => Arc::new(
                Vocabulary::load(path).map_err(|e| format!("loading vocab {}: {e}", path.display()))?,
            ),
            None => Arc::new(Vocabulary::toy().clone()),
        };
        let registry = Arc::new(AdapterRegistry::new(*weights.config()));
        let evaluator = Evaluator::new(Arc::new(weights), vocab, registry);
        self.engine
            .set(Engine { evaluator })
            .map_err(|_| "model already loaded".to_string())?;

        if let Some(dir) = self.config.metrics.clone() {
            let mut entries: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| format!("reading metrics dir {}: {e}", dir.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().map(|x| x == "spec").unwrap_or(false))
                .collect();
            entries.sort();
            for path in entries {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| format!("reading {}: {e}", path.display()))?;
                self.register_spec_text(&text, true)
                    .map_err(|e| format!("registering {}: {e:?}", path.display()))?;
            }
        }
        Ok(())
    }

    /// Install an already-constructed engine (in-process embedding, tests).
    pub fn install_engine(&self, evaluator: Evaluator) {
        self.engine
            .set(Engine { evaluator })
            .unwrap_or_else(|_| panic!("engine already installed"));
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.engine.get()
    }

    pub fn load_error(&self) -> Option<String> {
        self.load_error.get().cloned()
    }

    pub fn try_acquire(&self) -> Option<Permit<'_>> {
        let max = self.config.max_concurrent;
        self.inflight
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |cur| {
                (cur < max).then_some(cur + 1)
            })
            .ok()
            .map(|_| Permit(&self.inflight))
    }

    pub fn effective_max_context(&self) -> usize {
        match self.engine.get() {
            Some(engine) => self
                .config
                .max_context
                .min(engine.evaluator.weights.config().max_context),
            None => self.config.max_context,
        }
    }

    pub fn metric(&self, name: &str) -> Option<Arc<CompiledMetric>> {
        self.metrics.read().expect("metrics lock").get(name).cloned()
    }

    pub fn metric_count(&self) -> usize {
        self.metrics.read().expect("metrics lock").len()
    }

    pub fn metric_summaries(&self) -> Vec<MetricSummary> {
        let engine = self.engine.get();
        let map = self.metrics.read().expect("metrics lock");
        let mut out: Vec<MetricSummary> = map
            .values()
            .map(|m| MetricSummary {
                name: m.spec.name.clone(),
                node_type: m.spec.node_type.as_str().to_string(),
                class_kind: m.spec.class_kind.as_str().to_string(),
                classes: m.spec.class_words.clone(),
                threshold: m.spec.threshold,
                adapter: m.spec.adapter_ref.clone(),
                adapter_params: engine
                    .and_then(|e| e.evaluator.registry.get(&m.spec.adapter_ref))
                    .map(|a| a.param_count())
                    .unwrap_or(0),
            })
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    /// Bytes of adapter tensors currently resident.
    pub fn resident_adapter_bytes(&self) -> usize {
        self.engine
            .get()
            .map(|e| e.evaluator.registry.resident_bytes())
            .unwrap_or(0)
    }

    /// Validate spec text, load its adapter file, and make both visible
    /// atomically. The spec round-trips through the canonical serializer
    /// before registration, so what is listed is what was parsed.
    pub fn register_spec_text(&self, text: &str, replace: bool) -> Result<String, RegisterError> {
        let engine = self
            .engine
            .get()
            .ok_or_else(|| RegisterError::Invalid("model is still loading".into()))?;
        let mut spec = parse_spec(text).map_err(|e| RegisterError::Invalid(e.to_string()))?;
        serialize_spec(&spec).map_err(|e| RegisterError::Invalid(e.to_string()))?;
        if let Some(t) = self.config.threshold_for(&spec.name) {
            spec.threshold = t;
        }
        let compiled = validate_spec(&spec, &engine.evaluator.vocab)
            .map_err(|e| RegisterError::Invalid(e.to_string()))?;

        let adapter_path = self.config.adapters.join(format!("{}.lora", spec.adapter_ref));
        let adapter = LoraAdapter::load(&adapter_path).map_err(|e| {
            RegisterError::Invalid(format!("adapter file {}: {e}", adapter_path.display()))
        })?;

        self.register_compiled(compiled, adapter, replace)
    }

    /// Registration with in-memory objects (tests, embedded use).
    pub fn register_compiled(
        &self,
        compiled: CompiledMetric,
        adapter: LoraAdapter<f32>,
        replace: bool,
    ) -> Result<String, RegisterError> {
        let engine = self
            .engine
            .get()
            .ok_or_else(|| RegisterError::Invalid("model is still loading".into()))?;
        let name = compiled.spec.name.clone();
        let mut map = self.metrics.write().expect("metrics lock");
        if map.contains_key(&name) && !replace {
            return Err(RegisterError::Duplicate { name });
        }
        engine
            .evaluator
            .registry
            .register(adapter, true)
            .map_err(|e| RegisterError::Invalid(e.to_string()))?;
        map.insert(name.clone(), Arc::new(compiled));
        Ok(name)
    }
}
