use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use reachmap::Config;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "REACHMAP_";

/// Listener, session and engine settings. Engine fields sit at the top
/// level of the file next to the service ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    /// `0` picks a free port.
    pub port: u16,
    pub seed: u64,
    /// Where the live session is archived; nothing is written when unset.
    pub archive_dir: Option<PathBuf>,
    pub tick_hz: f64,
    #[serde(flatten)]
    pub engine: Config,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8765,
            seed: 0,
            archive_dir: None,
            tick_hz: 60.0,
            engine: Config::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] serde_json::Error),
}

impl ServiceConfig {
    pub fn addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Optional file, then `REACHMAP_<FIELD>` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        base.with_overrides(|key| std::env::var(format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())).ok())
    }

    /// Values are parsed as JSON first and fall back to a plain string.
    pub fn with_overrides<F>(self, lookup: F) -> Result<Self, ConfigError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut value = serde_json::to_value(&self)?;
        if let serde_json::Value::Object(map) = &mut value {
            for (key, slot) in map.iter_mut() {
                if let Some(raw) = lookup(key) {
                    *slot = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw));
                }
            }
        }
        Ok(serde_json::from_value(value)?)
    }
}
