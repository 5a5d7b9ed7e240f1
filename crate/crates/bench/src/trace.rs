//! Line-delimited run traces: one header object, then one record per
//! iteration.

use std::io::{BufRead, Write};

use addtree::TreeSpace;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::runner::Algorithm;

pub const TRACE_FORMAT: &str = "addtree-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("empty trace")]
    Empty,
    #[error("unsupported trace format {format} version {version}")]
    Version { format: String, version: u32 },
    #[error("record {index} is invalid: {reason}")]
    Invalid { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub algorithm: Algorithm,
    pub objective: String,
    pub seed: u64,
    pub config_digest: String,
    pub known_optimum: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based iteration.
    pub t: usize,
    pub leaf: usize,
    pub values: Vec<f64>,
    pub y: f64,
    /// Lowest `y` so far.
    pub best: f64,
    pub phase: Phase,
    pub beta: Option<f64>,
    pub info_gain: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

/// SHA-256 of the canonical JSON encoding of `config` (compact, object keys
/// sorted), hex encoded. Re-parsing the stored JSON yields the same digest.
pub fn config_digest<C: Serialize>(config: &C) -> String {
    // `Value` objects are key-sorted maps.
    let value = serde_json::to_value(config).expect("configs serialize to JSON");
    let bytes = serde_json::to_vec(&value).expect("values serialize to JSON");
    hex::encode(Sha256::digest(&bytes))
}

impl RunTrace {
    pub fn new(algorithm: Algorithm, objective: &str, seed: u64, config_digest: String, known_optimum: Option<f64>) -> Self {
        Self {
            header: TraceHeader {
                format: TRACE_FORMAT.to_string(),
                version: TRACE_VERSION,
                algorithm,
                objective: objective.to_string(),
                seed,
                config_digest,
                known_optimum,
            },
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Best-so-far after `t` iterations; the final incumbent past the end.
    pub fn incumbent_at(&self, t: usize) -> Option<f64> {
        if t == 0 || self.records.is_empty() {
            return None;
        }
        Some(self.records[t.min(self.records.len()) - 1].best)
    }

    pub fn final_incumbent(&self) -> Option<f64> {
        self.records.last().map(|r| r.best)
    }

    /// Copy with every wall-clock field zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        t.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
        t
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        serde_json::to_writer(&mut w, &self.header).map_err(|e| TraceError::Json { line: 1, source: e })?;
        w.write_all(b"\n")?;
        for (i, r) in self.records.iter().enumerate() {
            serde_json::to_writer(&mut w, r).map_err(|e| TraceError::Json { line: i + 2, source: e })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: TraceHeader = serde_json::from_str(&first?).map_err(|e| TraceError::Json { line: 1, source: e })?;
        if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
            return Err(TraceError::Version {
                format: header.format,
                version: header.version,
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            records.push(serde_json::from_str(&line?).map_err(|e| TraceError::Json { line: i + 1, source: e })?);
        }
        Ok(Self { header, records })
    }

    /// Re-checks the per-record invariants: consecutive `t`, points inside
    /// the space, and a non-increasing incumbent that tracks the minimum.
    pub fn validate(&self, space: &TreeSpace<f64>) -> Result<(), TraceError> {
        let mut best = f64::INFINITY;
        for (i, r) in self.records.iter().enumerate() {
            let bad = |reason: String| TraceError::Invalid { index: i, reason };
            if r.t != i + 1 {
                return Err(bad(format!("t = {} out of sequence", r.t)));
            }
            space.linearize(r.leaf, &r.values).map_err(|e| bad(e.to_string()))?;
            best = best.min(r.y);
            if r.best != best {
                return Err(bad(format!("incumbent {} differs from running minimum {best}", r.best)));
            }
        }
        Ok(())
    }
}
