//! Service settings from a TOML file, overridden by flags and `SEASTAR_*`
//! environment variables.

use std::path::Path;
use std::time::Duration;

use seastar_api::{Mode, TierConfig};
use seastar_core::entity::parse_duration;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7400";

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub listen: Option<String>,
    pub mode: Option<String>,
    pub upstream: Option<String>,
    pub cache_ttl: Option<String>,
    pub cache_capacity: Option<u64>,
    pub partition: Option<Vec<String>>,
    pub log: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub listen: Option<String>,
    pub mode: Option<String>,
    pub upstream: Option<String>,
    pub cache_ttl: Option<String>,
    pub cache_capacity: Option<u64>,
    pub partition: Option<Vec<String>>,
    pub log: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeSettings {
    pub listen: String,
    pub tier: TierConfig,
    pub log: Option<String>,
}

pub fn parse_ttl(text: &str) -> Result<Duration, CliError> {
    parse_duration(text)
        .map(|n| Duration::from_nanos(n as u64))
        .ok_or_else(|| CliError::Config(format!("bad duration `{text}`")))
}

impl ServeSettings {
    pub fn resolve(file: FileConfig, over: Overrides) -> Result<Self, CliError> {
        let mode: Mode = over
            .mode
            .or(file.mode)
            .as_deref()
            .unwrap_or("master")
            .parse()
            .map_err(CliError::Config)?;
        let mut tier = TierConfig {
            mode,
            upstream: over.upstream.or(file.upstream),
            partition: over.partition.or(file.partition).unwrap_or_default(),
            ..TierConfig::default()
        };
        if let Some(ttl) = over.cache_ttl.or(file.cache_ttl) {
            tier.cache_ttl = parse_ttl(&ttl)?;
        }
        if let Some(cap) = over.cache_capacity.or(file.cache_capacity) {
            tier.cache_capacity = cap;
        }
        tier.validate().map_err(CliError::Config)?;
        Ok(ServeSettings {
            listen: over.listen.or(file.listen).unwrap_or_else(|| DEFAULT_LISTEN.to_string()),
            tier,
            log: over.log.or(file.log),
        })
    }
}
