//! Arrival-trace file format.
//!
//! One record per line: `arrival_time,prompt_len,gen_length`, UTF-8, with a
//! mandatory header line. `#` starts a comment. Arrival times must be
//! nondecreasing. The writer emits the canonical form; writing a parsed
//! canonical file reproduces it byte for byte.

use crate::config::ServeConfig;
use thiserror::Error;

pub const TRACE_HEADER: &str = "arrival_time,prompt_len,gen_length";

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("missing or malformed header; expected `{TRACE_HEADER}`")]
    MissingHeader,
    #[error("line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("line {line}: arrival time decreases")]
    NonMonotonic { line: usize },
    #[error("line {line}: gen_length {gen_length} incompatible with block_size {block_size} and configured maximum {max}")]
    BadGenLength {
        line: usize,
        gen_length: u32,
        block_size: u32,
        max: u32,
    },
}

/// One arrival: when, how much prompt, how much to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub arrival_time: f64,
    pub prompt_len: u32,
    pub gen_length: u32,
}

/// Parses a trace file's contents.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut header_seen = false;
    let mut prev_arrival = f64::NEG_INFINITY;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if !header_seen {
            if content != TRACE_HEADER {
                return Err(TraceError::MissingHeader);
            }
            header_seen = true;
            continue;
        }
        let mut fields = content.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| TraceError::BadRecord {
                    line: line_no,
                    msg: format!("missing field {name}"),
                })
        };
        let arrival_time: f64 =
            next("arrival_time")?
                .parse()
                .map_err(|e| TraceError::BadRecord {
                    line: line_no,
                    msg: format!("arrival_time: {e}"),
                })?;
        let prompt_len: u32 = next("prompt_len")?
            .parse()
            .map_err(|e| TraceError::BadRecord {
                line: line_no,
                msg: format!("prompt_len: {e}"),
            })?;
        let gen_length: u32 = next("gen_length")?
            .parse()
            .map_err(|e| TraceError::BadRecord {
                line: line_no,
                msg: format!("gen_length: {e}"),
            })?;
        if fields.next().is_some() {
            return Err(TraceError::BadRecord {
                line: line_no,
                msg: "too many fields".into(),
            });
        }
        if !arrival_time.is_finite() || arrival_time < 0.0 {
            return Err(TraceError::BadRecord {
                line: line_no,
                msg: "arrival_time must be finite and non-negative".into(),
            });
        }
        if arrival_time < prev_arrival {
            return Err(TraceError::NonMonotonic { line: line_no });
        }
        prev_arrival = arrival_time;
        records.push(TraceRecord {
            arrival_time,
            prompt_len,
            gen_length,
        });
    }
    if !header_seen {
        return Err(TraceError::MissingHeader);
    }
    Ok(records)
}

/// Canonical serialization.
pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 24 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{}\n",
            r.arrival_time, r.prompt_len, r.gen_length
        ));
    }
    out
}

/// Validates trace lengths against a serving configuration: generation
/// lengths must be whole blocks, at least one block, and no longer than the
/// configured maximum.
pub fn validate_against_config(
    records: &[TraceRecord],
    cfg: &ServeConfig,
) -> Result<(), TraceError> {
    for (idx, r) in records.iter().enumerate() {
        let ok = r.gen_length >= cfg.block_size
            && r.gen_length % cfg.block_size == 0
            && r.gen_length <= cfg.gen_length;
        if !ok {
            return Err(TraceError::BadGenLength {
                line: idx + 2, // account for the header line
                gen_length: r.gen_length,
                block_size: cfg.block_size,
                max: cfg.gen_length,
            });
        }
    }
    Ok(())
}
