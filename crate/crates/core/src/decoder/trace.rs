//! Per-iteration generation records and their on-disk form.
//!
//! A trace is two files: `<name>.jsonl` with one [`IterationRecord`] per line,
//! and `<name>.summary.json` with the [`TraceSummary`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{GenerationConfig, Strategy};
use crate::cache::RefreshAction;
use crate::model::{ModelConfig, TokenId};
use crate::skip::Indicator;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnmaskEvent {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f32,
}

/// Variation terms of one indicator at one layer, aligned with `positions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationRecord {
    pub layer: usize,
    pub indicator: Indicator,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub block: usize,
    pub action: RefreshAction,
    /// The surviving set had no masked position and one extra
    /// single-position forward was run.
    pub fallback: bool,
    pub flops: u64,
    /// FLOPs spent inside transformer layers (output head excluded).
    pub layer_flops: u64,
    pub active_per_layer: Vec<usize>,
    /// Positions that produced fresh logits, with their max probability.
    pub conf_positions: Vec<usize>,
    pub confidences: Vec<f32>,
    pub unmasked: Vec<UnmaskEvent>,
    pub variations: Vec<VariationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub label: String,
    pub engine_version: String,
    pub model: ModelConfig,
    pub prompt_len: usize,
    pub total_flops: u64,
    pub iterations: u64,
    pub unmask_order: Vec<usize>,
    pub tokens: Vec<TokenId>,
    /// Every iteration logged confidences for every position.
    pub full_confidence: bool,
    pub per_strategy_config: GenerationConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub summary: TraceSummary,
    pub records: Vec<IterationRecord>,
}

/// `run.jsonl` → `run.summary.json`.
pub fn summary_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("summary.json")
}

impl GenerationTrace {
    pub fn strategy(&self) -> Strategy {
        self.summary.per_strategy_config.strategy
    }

    pub fn output_range(&self) -> std::ops::Range<usize> {
        let p = self.summary.prompt_len;
        p..p + self.summary.per_strategy_config.gen_length
    }

    /// Iteration in which each output position was unmasked, indexed from
    /// the start of the output region.
    pub fn unmask_iterations(&self) -> Vec<Option<u64>> {
        let range = self.output_range();
        let mut out = vec![None; range.len()];
        for r in &self.records {
            for e in &r.unmasked {
                if range.contains(&e.position) {
                    out[e.position - range.start] = Some(r.iteration);
                }
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    /// Writes the JSON-lines records to `path` and the summary next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_jsonl()?)?;
        w.flush()?;
        let sp = summary_path(path);
        let mut s = serde_json::to_vec_pretty(&self.summary)?;
        s.push(b'\n');
        std::fs::write(&sp, s)?;
        Ok(sp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sp = summary_path(path);
        let summary: TraceSummary = serde_json::from_slice(&std::fs::read(&sp).map_err(|e| {
            Error::input(format!("missing trace summary {}: {e}", sp.display()))
        })?)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| {
                Error::input(format!("{} line {}: {e}", path.display(), i + 1))
            })?);
        }
        Ok(Self { summary, records })
    }
}
