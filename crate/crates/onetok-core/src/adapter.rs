//! Low-rank adapters over the frozen backbone, one per metric, plus the
//! registry that keeps many of them resident for multi-tenant evaluation.
//!
//! An adapter holds a pair `A` (`r x d_in`) and `B` (`d_out x r`) per
//! (layer, target projection). Its contribution to a projection output is
//! `(alpha / r) * B . (A . x)`, added to the frozen weight's output — never
//! merged into the weight itself, so one shared backbone can serve any
//! adapter per request. `B` starts at zero, which makes a fresh adapter an
//! exact no-op on the model.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::model::ModelConfig;
use crate::tensor::{mm, mm_acc, mm_tn_acc, Scalar, Tensor};

/// Attention projection an adapter site attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Query, Target::Key, Target::Value, Target::Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
            Target::Output => "o",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" => Ok(Target::Query),
            "k" => Ok(Target::Key),
            "v" => Ok(Target::Value),
            "o" => Ok(Target::Output),
            other => Err(format!("unknown adapter target {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter config error: {0}")]
    Config(String),
    #[error("adapter has no site for layer {layer} target {target}")]
    MissingSite { layer: usize, target: &'static str },
    #[error("adapter {name:?} already registered (pass replace to overwrite)")]
    Conflict { name: String },
    #[error("adapter tensor {what} has shape {got:?}, expected {expected:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("adapter was trained against a different backbone (fingerprint {adapter:#x}, ours {backbone:#x})")]
    FingerprintMismatch { adapter: u64, backbone: u64 },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("lora_delta input must be rank 1 [d_in] or rank 2 [rows, d_in], got {got:?}")]
    BadInput { got: Vec<usize> },
}

/// Rank, scaling and target projections for an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
}

impl LoraConfig {
    /// Conventional full-scale settings: rank 16, alpha 16, all four targets.
    pub fn full() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: Target::ALL.to_vec(),
        }
    }

    /// Desk-scale default: rank 8 keeps the adapter under 5% of the desk
    /// backbone's parameters.
    pub fn desk() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 8.0,
            targets: Target::ALL.to_vec(),
        }
    }

    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: rank as f64,
            targets: Target::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::Config("rank must be at least 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(AdapterError::Config("alpha must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(AdapterError::Config("targets must be non-empty".into()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(AdapterError::Config(format!(
                    "duplicate target {}",
                    t.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn targets_str(&self) -> String {
        self.targets
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::full()
    }
}

/// One (layer, target) attachment point.
#[derive(Debug, Clone)]
pub struct LoraSite<T = f32> {
    pub layer: usize,
    pub target: Target,
    /// `[rank, d_in]`, small random normal at creation.
    pub a: Tensor<T>,
    /// `[d_out, rank]`, zero at creation.
    pub b: Tensor<T>,
}

/// A metric's low-rank deltas over every configured (layer, target) site.
#[derive(Debug, Clone)]
pub struct LoraAdapter<T = f32> {
    pub metric_name: String,
    pub config: LoraConfig,
    sites: Vec<LoraSite<T>>,
    n_layers: usize,
    pub backbone_fingerprint: u64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter for the given backbone: `A ~ N(0, 1/sqrt(d_in))` seeded
    /// (the usual fan-in scale), `B = 0` so the delta starts as an exact no-op.
    pub fn init(
        metric_name: &str,
        model: &ModelConfig,
        config: LoraConfig,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d_model;
        let r = config.rank;
        let a_std = 1.0 / (d as f64).sqrt();
        let mut sites = Vec::with_capacity(model.n_layers * config.targets.len());
        for layer in 0..model.n_layers {
            for &target in &config.targets {
                let a = small_normal(&mut rng, &[r, d], a_std);
                let b = Tensor::zeros(&[d, r]);
                sites.push(LoraSite {
                    layer,
                    target,
                    a,
                    b,
                });
            }
        }
        Ok(LoraAdapter {
            metric_name: metric_name.to_string(),
            config,
            sites,
            n_layers: model.n_layers,
            backbone_fingerprint: model.fingerprint(),
        })
    }

    pub fn sites(&self) -> &[LoraSite<T>] {
        &self.sites
    }

    pub fn sites_mut(&mut self) -> &mut [LoraSite<T>] {
        &mut self.sites
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn site_index(&self, layer: usize, target: Target) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| s.layer == layer && s.target == target)
    }

    pub fn site(&self, layer: usize, target: Target) -> Option<&LoraSite<T>> {
        self.site_index(layer, target).map(|i| &self.sites[i])
    }

    /// Number of trainable parameters across all sites.
    pub fn param_count(&self) -> usize {
        self.sites.iter().map(|s| s.a.len() + s.b.len()).sum()
    }

    /// Resident bytes of the adapter tensors (f32 storage).
    pub fn resident_bytes(&self) -> usize {
        self.param_count() * std::mem::size_of::<f32>()
    }

    /// The low-rank delta `(alpha/r) * B . (A . x)` for one site.
    ///
    /// Accepts `x` as rank-1 `[d_in]` (a single column) or rank-2
    /// `[rows, d_in]` (a batch of row vectors).
    pub fn lora_delta(
        &self,
        layer: usize,
        target: Target,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>, AdapterError> {
        let site = self
            .site(layer, target)
            .ok_or(AdapterError::MissingSite {
                layer,
                target: target.as_str(),
            })?;
        match x.shape() {
            [d_in] => {
                let (r, a_din) = (site.a.shape()[0], site.a.shape()[1]);
                let d_out = site.b.shape()[0];
                if *d_in != a_din {
                    return Err(AdapterError::Shape {
                        what: "lora_delta input".into(),
                        expected: vec![a_din],
                        got: x.shape().to_vec(),
                    });
                }
                // p = A . x, delta = scale * B . p
                let mut p = vec![T::ZERO; r];
                mm(&mut p, site.a.data(), x.data(), r, a_din, 1);
                let mut delta = vec![T::ZERO; d_out];
                mm(&mut delta, site.b.data(), &p, d_out, r, 1);
                let s = T::from_f64(self.config.scale());
                for v in delta.iter_mut() {
                    *v *= s;
                }
                Ok(Tensor::from_vec(&[d_out], delta).unwrap())
            }
            [rows, d_in] => {
                let a_din = site.a.shape()[1];
                if *d_in != a_din {
                    return Err(AdapterError::Shape {
                        what: "lora_delta input".into(),
                        expected: vec![*rows, a_din],
                        got: x.shape().to_vec(),
                    });
                }
                let d_out = site.b.shape()[0];
                let mut out = Tensor::zeros(&[*rows, d_out]);
                add_rows_delta(site, self.config.scale(), x, &mut out);
                Ok(out)
            }
            other => Err(AdapterError::BadInput {
                got: other.to_vec(),
            }),
        }
    }

    /// Add this site's delta to an already-computed projection output
    /// (row-vector convention). No-op when the site does not exist.
    pub fn add_delta_rows(&self, layer: usize, target: Target, x: &Tensor<T>, out: &mut Tensor<T>) {
        if let Some(site) = self.site(layer, target) {
            add_rows_delta(site, self.config.scale(), x, out);
        }
    }

    /// Backward of `add_delta_rows`: accumulates gradients for `A` and `B`
    /// into `grads` and adds the input-gradient contribution into `d_x`.
    pub fn backward_delta_rows(
        &self,
        layer: usize,
        target: Target,
        x: &Tensor<T>,
        d_out: &Tensor<T>,
        d_x: &mut Tensor<T>,
        grads: &mut LoraGrads<T>,
    ) {
        let Some(idx) = self.site_index(layer, target) else {
            return;
        };
        let site = &self.sites[idx];
        let rows = x.shape()[0];
        let d_in = x.shape()[1];
        let d_out_dim = d_out.shape()[1];
        let r = site.a.shape()[0];
        let s = T::from_f64(self.config.scale());

        // p = x . A^T            [rows, r]
        let mut p = vec![T::ZERO; rows * r];
        crate::tensor::mm_nt(&mut p, x.data(), site.a.data(), rows, d_in, r);
        // tmp = s * (d_out . B)  [rows, r]
        let mut tmp = vec![T::ZERO; rows * r];
        mm(&mut tmp, d_out.data(), site.b.data(), rows, d_out_dim, r);
        for v in tmp.iter_mut() {
            *v *= s;
        }
        // d_x += tmp . A
        mm_acc(d_x.data_mut(), &tmp, site.a.data(), rows, r, d_in);
        // d_B += s * d_out^T . p
        let (d_a, d_b) = grads.site_mut(idx);
        let mut db_local = vec![T::ZERO; d_out_dim * r];
        mm_tn_acc(&mut db_local, d_out.data(), &p, d_out_dim, rows, r);
        for (acc, v) in d_b.data_mut().iter_mut().zip(db_local.iter()) {
            *acc += s * *v;
        }
        // d_A += tmp^T . x
        mm_tn_acc(d_a.data_mut(), &tmp, x.data(), r, rows, d_in);
    }

    /// Shape check against a backbone configuration.
    pub fn check_against(&self, model: &ModelConfig) -> Result<(), AdapterError> {
        if self.backbone_fingerprint != model.fingerprint() {
            return Err(AdapterError::FingerprintMismatch {
                adapter: self.backbone_fingerprint,
                backbone: model.fingerprint(),
            });
        }
        for site in &self.sites {
            if site.layer >= model.n_layers {
                return Err(AdapterError::Config(format!(
                    "site layer {} out of range for {}-layer backbone",
                    site.layer, model.n_layers
                )));
            }
            let r = self.config.rank;
            let d = model.d_model;
            if site.a.shape() != [r, d] {
                return Err(AdapterError::Shape {
                    what: format!("layers.{}.{}.a", site.layer, site.target.as_str()),
                    expected: vec![r, d],
                    got: site.a.shape().to_vec(),
                });
            }
            if site.b.shape() != [d, r] {
                return Err(AdapterError::Shape {
                    what: format!("layers.{}.{}.b", site.layer, site.target.as_str()),
                    expected: vec![d, r],
                    got: site.b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn add_rows_delta<T: Scalar>(site: &LoraSite<T>, scale: f64, x: &Tensor<T>, out: &mut Tensor<T>) {
    let rows = x.shape()[0];
    let d_in = x.shape()[1];
    let r = site.a.shape()[0];
    let d_out = site.b.shape()[0];
    // p = x . A^T [rows, r]; out += s * p . B^T
    let mut p = vec![T::ZERO; rows * r];
    crate::tensor::mm_nt(&mut p, x.data(), site.a.data(), rows, d_in, r);
    let s = T::from_f64(scale);
    for v in p.iter_mut() {
        *v *= s;
    }
    let mut delta = vec![T::ZERO; rows * d_out];
    crate::tensor::mm_nt(&mut delta, &p, site.b.data(), rows, r, d_out);
    for (o, dv) in out.data_mut().iter_mut().zip(delta.iter()) {
        *o += *dv;
    }
}

fn small_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let rad = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::from_f64(std * rad * theta.cos()));
        if data.len() < n {
            data.push(T::from_f64(std * rad * theta.sin()));
        }
    }
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}

/// Gradient buffers aligned with an adapter's site list.
#[derive(Debug, Clone)]
pub struct LoraGrads<T = f32> {
    sites: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> LoraGrads<T> {
    pub fn zeros_like(adapter: &LoraAdapter<T>) -> Self {
        LoraGrads {
            sites: adapter
                .sites
                .iter()
                .map(|s| (Tensor::zeros(s.a.shape()), Tensor::zeros(s.b.shape())))
                .collect(),
        }
    }

    pub fn site_mut(&mut self, idx: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let pair = &mut self.sites[idx];
        (&mut pair.0, &mut pair.1)
    }

    pub fn site(&self, idx: usize) -> (&Tensor<T>, &Tensor<T>) {
        let pair = &self.sites[idx];
        (&pair.0, &pair.1)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Elementwise accumulate another gradient set (fixed order, so batch
    /// reduction stays deterministic).
    pub fn accumulate(&mut self, other: &LoraGrads<T>) {
        for (mine, theirs) in self.sites.iter_mut().zip(other.sites.iter()) {
            for (o, v) in mine.0.data_mut().iter_mut().zip(theirs.0.data()) {
                *o += *v;
            }
            for (o, v) in mine.1.data_mut().iter_mut().zip(theirs.1.data()) {
                *o += *v;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for pair in self.sites.iter_mut() {
            for v in pair.0.data_mut() {
                *v *= factor;
            }
            for v in pair.1.data_mut() {
                *v *= factor;
            }
        }
    }
}

impl LoraAdapter<f32> {
    /// Save in the shared tensor-container layout with an adapter manifest.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), AdapterError> {
        let mut c = Container::new();
        c.set_meta("kind", "adapter");
        c.set_meta("metric_name", &self.metric_name);
        c.set_meta("rank", self.config.rank);
        c.set_meta("alpha", self.config.alpha);
        c.set_meta("targets", self.config.targets_str());
        c.set_meta("n_layers", self.n_layers);
        c.set_meta("backbone_fingerprint", self.backbone_fingerprint);
        for site in &self.sites {
            let prefix = format!("layers.{}.{}", site.layer, site.target.as_str());
            c.push(&format!("{prefix}.a"), site.a.clone());
            c.push(&format!("{prefix}.b"), site.b.clone());
        }
        c.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, AdapterError> {
        let mut c = Container::load(path)?;
        if c.meta("kind")? != "adapter" {
            return Err(AdapterError::Config("container is not an adapter file".into()));
        }
        let metric_name: String = c.meta("metric_name")?.to_string();
        let rank: usize = c.meta_parsed("rank")?;
        let alpha: f64 = c.meta_parsed("alpha")?;
        let n_layers: usize = c.meta_parsed("n_layers")?;
        let backbone_fingerprint: u64 = c.meta_parsed("backbone_fingerprint")?;
        let targets = c
            .meta("targets")?
            .split(',')
            .map(|t| t.parse::<Target>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(AdapterError::Config)?;
        let config = LoraConfig {
            rank,
            alpha,
            targets,
        };
        config.validate()?;
        let mut sites = Vec::with_capacity(n_layers * config.targets.len());
        for layer in 0..n_layers {
            for &target in &config.targets {
                let prefix = format!("layers.{layer}.{}", target.as_str());
                sites.push(LoraSite {
                    layer,
                    target,
                    a: c.take(&format!("{prefix}.a"))?,
                    b: c.take(&format!("{prefix}.b"))?,
                });
            }
        }
        Ok(LoraAdapter {
            metric_name,
            config,
            sites,
            n_layers,
            backbone_fingerprint,
        })
    }
}

/// Thread-safe adapter store keyed by metric name.
///
/// Readers get an `Arc` snapshot of a complete adapter or nothing; a
/// registration in flight is never observable half-done.
pub struct AdapterRegistry {
    backbone: ModelConfig,
    map: RwLock<HashMap<String, Arc<LoraAdapter<f32>>>>,
}

impl AdapterRegistry {
    pub fn new(backbone: ModelConfig) -> Self {
        AdapterRegistry {
            backbone,
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn backbone(&self) -> &ModelConfig {
        &self.backbone
    }

    /// Register an adapter under its metric name. Fails on duplicates unless
    /// `replace`, and on any shape/fingerprint mismatch with the backbone.
    pub fn register(&self, adapter: LoraAdapter<f32>, replace: bool) -> Result<(), AdapterError> {
        adapter.check_against(&self.backbone)?;
        let name = adapter.metric_name.clone();
        let mut map = self.map.write().expect("registry lock");
        if map.contains_key(&name) && !replace {
            return Err(AdapterError::Conflict { name });
        }
        map.insert(name, Arc::new(adapter));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Arc<LoraAdapter<f32>>> {
        self.map.read().expect("registry lock").get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.read().expect("registry lock").contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.map.read().expect("registry lock").keys().cloned().collect();
        names.sort();
        names
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total bytes of resident adapter tensors.
    pub fn resident_bytes(&self) -> usize {
        self.map
            .read()
            .expect("registry lock")
            .values()
            .map(|a| a.resident_bytes())
            .sum()
    }
}
