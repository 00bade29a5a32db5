//! Serialized artifact schemas: task datasets and protocol results as
//! JSON-lines, evaluation reports and sweep matrices as single JSON
//! documents. Every record carries the tool version, resolved config hash,
//! and seed, so artifacts are self-describing and reproducible.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use acomm_core::protocols::{Message, ProtocolRun};
use acomm_core::tasks::{EvalReport, TaskInstance};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    BadRecord {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0} holds no records")]
    Empty(String),
}

/// Shared provenance fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub seed: u64,
    pub tool_version: String,
    pub config_hash: String,
}

/// One task-dataset line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub task: TaskInstance,
    #[serde(flatten)]
    pub meta: Meta,
}

/// One protocol-run line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub protocol: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    pub answer: String,
    pub gold: String,
    pub score: u32,
    pub nl_flops_model: u128,
    pub ac_flops_model: u128,
    pub seed: u64,
    pub transcript: Vec<Message>,
    pub prompt_a: String,
    pub prompt_b: String,
    pub answer_tokens: usize,
    pub tool_version: String,
    pub config_hash: String,
    /// Set when the run failed; `score` is 0 and `answer` empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn from_run(run: ProtocolRun, score: u32, tool_version: &str, config_hash: &str) -> Self {
        Self {
            task_id: run.task_id,
            protocol: run.protocol.to_string(),
            variant: run.variant.map(|v| v.to_string()),
            k: run.graft_k,
            j: run.graft_j,
            f: run.combine_kind.map(|f| f.to_string()),
            answer: run.answer,
            gold: run.gold,
            score,
            nl_flops_model: run.cost.nl_flops,
            ac_flops_model: run.cost.ac_flops,
            seed: run.seed,
            transcript: run.transcript,
            prompt_a: run.prompt_a,
            prompt_b: run.prompt_b,
            answer_tokens: run.answer_tokens,
            tool_version: tool_version.to_string(),
            config_hash: config_hash.to_string(),
            error: None,
        }
    }

    pub fn from_failure(
        task: &TaskInstance,
        protocol: &str,
        seed: u64,
        message: String,
        tool_version: &str,
        config_hash: &str,
    ) -> Self {
        Self {
            task_id: task.id.clone(),
            protocol: protocol.to_string(),
            variant: None,
            k: None,
            j: None,
            f: None,
            answer: String::new(),
            gold: task.gold.clone(),
            score: 0,
            nl_flops_model: 0,
            ac_flops_model: 0,
            seed,
            transcript: Vec::new(),
            prompt_a: task.prompt_a.clone(),
            prompt_b: task.prompt_b.clone(),
            answer_tokens: 0,
            tool_version: tool_version.to_string(),
            config_hash: config_hash.to_string(),
            error: Some(message),
        }
    }
}

/// Evaluation report document (`report` subcommand output).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRecord {
    #[serde(flatten)]
    pub eval: EvalReport,
    pub tool_version: String,
    pub config_hash: String,
}

/// Layer-sweep accuracy matrix document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub k_values: Vec<usize>,
    pub j_values: Vec<usize>,
    pub accuracy: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub meta: Meta,
}

/// Cost-model report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostRecord {
    pub params: acomm_core::costmodel::CostParams,
    /// Preset whose single forward pass normalizes the totals.
    pub reference: String,
    #[serde(flatten)]
    pub report: acomm_core::costmodel::CostReport,
    pub tool_version: String,
    pub config_hash: String,
}

/// Map-training report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub corpus_size: usize,
    pub k: usize,
    pub j: usize,
    pub source_model_digest: String,
    pub target_model_digest: String,
    #[serde(flatten)]
    pub meta: Meta,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes records as JSON lines (one compact object per line).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RecordError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a JSON-lines file; blank lines are skipped, an empty file is an error.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RecordError> {
    read_jsonl_with_digest(path).map(|(records, _)| records)
}

/// Like [`read_jsonl`] but also returns the SHA-256 of the raw file bytes,
/// for content-addressed config hashing.
pub fn read_jsonl_with_digest<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(Vec<T>, String), RecordError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let digest = crate::sha256_hex(&bytes);
    let text = String::from_utf8_lossy(&bytes);
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|source| RecordError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(RecordError::Empty(path.display().to_string()));
    }
    Ok((records, digest))
}

/// Writes one pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, record: &T) -> Result<(), RecordError> {
    let mut text = serde_json::to_string_pretty(record).expect("record serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}
