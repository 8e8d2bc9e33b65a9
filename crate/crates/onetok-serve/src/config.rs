//! Service configuration: a `key = value` file, environment overrides, and
//! programmatic construction. CLI flags mirror the same keys.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config error: {0}")]
    Invalid(String),
}

/// Everything the service needs to start.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Listen address, e.g. `127.0.0.1:8080`; port 0 picks a free port.
    pub listen: String,
    /// Weight container file for the backbone.
    pub model: PathBuf,
    /// Directory holding `<adapter_ref>.lora` adapter files.
    pub adapters: PathBuf,
    /// Optional directory of `*.spec` metric files registered at startup.
    pub metrics: Option<PathBuf>,
    /// Optional vocabulary file; the bundled toy vocabulary otherwise.
    pub vocab: Option<PathBuf>,
    /// Maximum concurrent evaluations before requests get 503.
    pub max_concurrent: usize,
    /// Service-level prompt budget; clamped to the model's own context.
    pub max_context: usize,
    /// Per-metric decision-threshold overrides.
    pub thresholds: Vec<(String, f64)>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            model: PathBuf::from("model.bin"),
            adapters: PathBuf::from("adapters"),
            metrics: None,
            vocab: None,
            max_concurrent: 8,
            max_context: 1024,
            thresholds: Vec::new(),
        }
    }
}

impl ServiceConfig {
    /// Parse the config file format:
    ///
    /// ```text
    /// listen = 127.0.0.1:8080
    /// model = model.bin
    /// adapters = adapters/
    /// metrics = metrics/
    /// max_concurrent = 8
    /// max_context = 1024
    /// threshold.context_adherence = 0.6
    /// ```
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ServiceConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value).map_err(|message| ConfigError::Parse {
                line: i + 1,
                message,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "listen" => self.listen = value.to_string(),
            "model" => self.model = PathBuf::from(value),
            "adapters" => self.adapters = PathBuf::from(value),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "max_concurrent" => {
                self.max_concurrent = value
                    .parse()
                    .map_err(|_| format!("bad max_concurrent {value:?}"))?
            }
            "max_context" => {
                self.max_context = value
                    .parse()
                    .map_err(|_| format!("bad max_context {value:?}"))?
            }
            other => {
                if let Some(metric) = other.strip_prefix("threshold.") {
                    let t: f64 = value
                        .parse()
                        .map_err(|_| format!("bad threshold {value:?}"))?;
                    self.thresholds.push((metric.to_string(), t));
                } else {
                    return Err(format!("unknown config key {other:?}"));
                }
            }
        }
        Ok(())
    }

    /// Apply `ONETOK_*` environment variable overrides.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        for (key, var) in [
            ("listen", "ONETOK_LISTEN"),
            ("model", "ONETOK_MODEL"),
            ("adapters", "ONETOK_ADAPTERS"),
            ("metrics", "ONETOK_METRICS"),
            ("vocab", "ONETOK_VOCAB"),
            ("max_concurrent", "ONETOK_MAX_CONCURRENT"),
            ("max_context", "ONETOK_MAX_CONTEXT"),
        ] {
            if let Ok(value) = std::env::var(var) {
                self.apply(key, &value).map_err(ConfigError::Invalid)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_concurrent == 0 {
            return Err(ConfigError::Invalid("max_concurrent must be positive".into()));
        }
        if self.max_context == 0 {
            return Err(ConfigError::Invalid("max_context must be positive".into()));
        }
        Ok(())
    }

    pub fn threshold_for(&self, metric: &str) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|(m, _)| m == metric)
            .map(|(_, t)| *t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = "# comment\nlisten = 0.0.0.0:9000\nmodel = m.bin\nadapters = a/\n\
                    metrics = specs/\nmax_concurrent = 3\nmax_context = 256\n\
                    threshold.tone = 0.7\n";
        let cfg = ServiceConfig::from_str(text).unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.max_concurrent, 3);
        assert_eq!(cfg.max_context, 256);
        assert_eq!(cfg.threshold_for("tone"), Some(0.7));
        assert_eq!(cfg.threshold_for("other"), None);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let err = ServiceConfig::from_str("listen = x\nwat = 7\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn zero_limits_are_invalid() {
        let cfg = ServiceConfig::from_str("max_concurrent = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn environment_overrides_file_values() {
        std::env::set_var("ONETOK_LISTEN", "10.0.0.5:4444");
        std::env::set_var("ONETOK_MAX_CONCURRENT", "21");
        let mut cfg = ServiceConfig::from_str("listen = 127.0.0.1:1\nmax_concurrent = 2\n").unwrap();
        cfg.apply_env().unwrap();
        std::env::remove_var("ONETOK_LISTEN");
        std::env::remove_var("ONETOK_MAX_CONCURRENT");
        assert_eq!(cfg.listen, "10.0.0.5:4444");
        assert_eq!(cfg.max_concurrent, 21);
    }
}
