use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{InstanceConfig, PoolPolicy, SchedulerConfig};

/// Prefix of environment variables that override config fields, e.g.
/// `NLUFORGE_RETRY_CAP=5` or `NLUFORGE_POOL_MIN_READY=2`.
pub const ENV_PREFIX: &str = "NLUFORGE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("bad config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Simulated,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub pool: PoolPolicy,
    pub tick_period_s: f64,
    pub retry_cap: u32,
    pub provider: ProviderKind,
    pub store_root: PathBuf,
    pub heartbeat_timeout_s: f64,
    /// Slots per autoscaled instance.
    pub instance_capacity: usize,
    pub bind: String,
    /// Worker executable for the subprocess provider; defaults to the
    /// running executable.
    pub worker_program: Option<PathBuf>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            pool: PoolPolicy::default(),
            tick_period_s: 1.0,
            retry_cap: 3,
            provider: ProviderKind::Simulated,
            store_root: PathBuf::from("nluforge-store"),
            heartbeat_timeout_s: 10.0,
            instance_capacity: 1,
            bind: "127.0.0.1:8080".into(),
            worker_program: None,
        }
    }
}

fn set_path(root: &mut serde_json::Value, path: &[&str], value: serde_json::Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        node = node
            .as_object_mut()
            .expect("config is an object")
            .entry(key.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    node.as_object_mut()
        .expect("config is an object")
        .insert(path[path.len() - 1].to_string(), value);
}

const POOL_FIELDS: [&str; 4] = ["min_ready", "max_instances", "scale_up_queue_threshold", "idle_shutdown_s"];
const TOP_FIELDS: [&str; 8] = [
    "tick_period_s",
    "retry_cap",
    "provider",
    "store_root",
    "heartbeat_timeout_s",
    "instance_capacity",
    "bind",
    "worker_program",
];

impl PlatformConfig {
    /// Reads an optional JSON file, then applies `NLUFORGE_*` overrides from
    /// `vars`. Unrelated variables are ignored.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        if !value.is_object() {
            return Err(ConfigError::Invalid("config must be a JSON object".into()));
        }
        for (name, raw) in vars {
            let Some(field) = name.strip_prefix(ENV_PREFIX).map(str::to_ascii_lowercase) else {
                continue;
            };
            let parsed = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw.clone()));
            if let Some(pool_field) = field.strip_prefix("pool_").filter(|f| POOL_FIELDS.contains(f)) {
                set_path(&mut value, &["pool", pool_field], parsed);
            } else if TOP_FIELDS.contains(&field.as_str()) {
                // Paths and names stay strings even when they parse as JSON.
                let v = if matches!(field.as_str(), "store_root" | "bind" | "worker_program" | "provider") {
                    serde_json::Value::String(raw)
                } else {
                    parsed
                };
                set_path(&mut value, &[field.as_str()], v);
            }
        }
        let config: PlatformConfig = serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    // The negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.tick_period_s > 0.0) {
            return bad(format!("tick_period_s must be positive, got {}", self.tick_period_s));
        }
        if !(self.heartbeat_timeout_s > 0.0) {
            return bad(format!("heartbeat_timeout_s must be positive, got {}", self.heartbeat_timeout_s));
        }
        if self.retry_cap == 0 {
            return bad("retry_cap must be at least 1".into());
        }
        if self.instance_capacity == 0 {
            return bad("instance_capacity must be at least 1".into());
        }
        if self.pool.min_ready > self.pool.max_instances {
            return bad(format!(
                "pool.min_ready {} exceeds pool.max_instances {}",
                self.pool.min_ready, self.pool.max_instances
            ));
        }
        Ok(())
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            pool: self.pool.clone(),
            retry_cap: self.retry_cap,
            heartbeat_timeout_ms: (self.heartbeat_timeout_s * 1000.0) as u64,
            instance_template: InstanceConfig {
                capacity_slots: self.instance_capacity,
                ..InstanceConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_then_file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"pool": {"min_ready": 2, "max_instances": 5}, "retry_cap": 4, "provider": "subprocess"}"#).unwrap();
        let c = PlatformConfig::load(
            Some(&path),
            vars(&[
                ("NLUFORGE_RETRY_CAP", "6"),
                ("NLUFORGE_POOL_IDLE_SHUTDOWN_S", "30"),
                ("NLUFORGE_STORE_ROOT", "/tmp/x"),
                ("NLUFORGE_API", "http://ignored"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(c.pool.min_ready, 2);
        assert_eq!(c.pool.max_instances, 5);
        assert_eq!(c.pool.idle_shutdown_s, 30);
        assert_eq!(c.retry_cap, 6);
        assert_eq!(c.provider, ProviderKind::Subprocess);
        assert_eq!(c.store_root, PathBuf::from("/tmp/x"));
        assert_eq!(c.tick_period_s, 1.0);
    }

    #[test]
    fn bad_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"poool": {}}"#).unwrap();
        assert!(matches!(PlatformConfig::load(Some(&path), vec![]), Err(ConfigError::Invalid(_))));
        assert!(PlatformConfig::load(None, vars(&[("NLUFORGE_POOL_MIN_READY", "9")])).is_err());
        assert!(PlatformConfig::load(None, vars(&[("NLUFORGE_TICK_PERIOD_S", "0")])).is_err());
        assert!(PlatformConfig::load(None, vars(&[("NLUFORGE_PROVIDER", "cloud")])).is_err());
        assert!(matches!(
            PlatformConfig::load(Some(&dir.path().join("missing.json")), vec![]),
            Err(ConfigError::Read { .. })
        ));
    }
}
