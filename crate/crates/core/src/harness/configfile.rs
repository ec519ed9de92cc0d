//! Flat key-value configuration files.
//!
//! One `key = value` pair per line, `#` comments, keys mirroring the serving
//! configuration fields. Unknown and duplicate keys are errors. Missing keys
//! keep their defaults.

use crate::config::{ConfigError, ServeConfig};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigFileError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(#[from] ConfigError),
}

fn parse_num<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
) -> Result<T, ConfigFileError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigFileError::BadValue {
            line,
            key: key.to_string(),
            msg: e.to_string(),
        })
}

/// Parses a config file's contents on top of the defaults and validates the
/// result.
pub fn parse_config(text: &str) -> Result<ServeConfig, ConfigFileError> {
    let mut cfg = ServeConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or(ConfigFileError::Syntax { line })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigFileError::Syntax { line });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigFileError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        match key {
            "max_num_batched_tokens" => cfg.max_num_batched_tokens = parse_num(line, key, value)?,
            "max_num_logits" => cfg.max_num_logits = parse_num(line, key, value)?,
            "gen_length" => cfg.gen_length = parse_num(line, key, value)?,
            "num_steps" => cfg.num_steps = parse_num(line, key, value)?,
            "block_size" => cfg.block_size = parse_num(line, key, value)?,
            "refresh_interval" => {
                cfg.refresh_interval = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse_num(line, key, value)?)
                }
            }
            "retention_ratio" => cfg.retention_ratio = parse_num(line, key, value)?,
            "pool_kernel" => cfg.pool_kernel = parse_num(line, key, value)?,
            "vocab_size" => cfg.vocab_size = parse_num(line, key, value)?,
            "num_heads" => cfg.num_heads = parse_num(line, key, value)?,
            "head_dim" => cfg.head_dim = parse_num(line, key, value)?,
            "hidden_dim" => cfg.hidden_dim = parse_num(line, key, value)?,
            "num_layers" => cfg.num_layers = parse_num(line, key, value)?,
            "bytes_per_element" => cfg.bytes_per_element = parse_num(line, key, value)?,
            "workspace_scale" => cfg.workspace_scale = parse_num(line, key, value)?,
            "hbm_bytes" => cfg.hw.hbm_bytes = parse_num(line, key, value)?,
            "weights_bytes" => cfg.hw.weights_bytes = parse_num(line, key, value)?,
            "compute_rate" => cfg.hw.compute_rate = parse_num(line, key, value)?,
            "mem_bandwidth" => cfg.hw.mem_bandwidth = parse_num(line, key, value)?,
            "guard_band_fraction" => cfg.hw.guard_band_fraction = parse_num(line, key, value)?,
            _ => {
                return Err(ConfigFileError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Canonical serialization with every key present.
pub fn config_to_string(cfg: &ServeConfig) -> String {
    let refresh = match cfg.refresh_interval {
        Some(k) => k.to_string(),
        None => "none".to_string(),
    };
    format!(
        "max_num_batched_tokens = {}\n\
         max_num_logits = {}\n\
         gen_length = {}\n\
         num_steps = {}\n\
         block_size = {}\n\
         refresh_interval = {}\n\
         retention_ratio = {}\n\
         pool_kernel = {}\n\
         vocab_size = {}\n\
         num_heads = {}\n\
         head_dim = {}\n\
         hidden_dim = {}\n\
         num_layers = {}\n\
         bytes_per_element = {}\n\
         workspace_scale = {}\n\
         hbm_bytes = {}\n\
         weights_bytes = {}\n\
         compute_rate = {}\n\
         mem_bandwidth = {}\n\
         guard_band_fraction = {}\n",
        cfg.max_num_batched_tokens,
        cfg.max_num_logits,
        cfg.gen_length,
        cfg.num_steps,
        cfg.block_size,
        refresh,
        cfg.retention_ratio,
        cfg.pool_kernel,
        cfg.vocab_size,
        cfg.num_heads,
        cfg.head_dim,
        cfg.hidden_dim,
        cfg.num_layers,
        cfg.bytes_per_element,
        cfg.workspace_scale,
        cfg.hw.hbm_bytes,
        cfg.hw.weights_bytes,
        cfg.hw.compute_rate,
        cfg.hw.mem_bandwidth,
        cfg.hw.guard_band_fraction
    )
}
