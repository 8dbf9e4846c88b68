//! Line-delimited JSON records written by the subcommands.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tgcnet::config::{RunConfig, Variant};
use tgcnet::gate::Adjacency;
use tgcnet::train::MetricRecord;

use crate::error::{CliError, Result};
use crate::stats::MeanCi;

pub const METRICS_FORMAT: u32 = 1;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Header {
        format: u32,
        variant: Variant,
        seed: u64,
        config: Box<RunConfig>,
    },
    Metric(MetricRecord),
    /// Training continued from a checkpoint taken at `step`.
    Resume {
        step: usize,
    },
    Summary(RunSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub episodes: usize,
    pub updates: usize,
    pub gate_liveness: f64,
    pub final_test_success_rate: Option<f64>,
    pub final_mean_edges_per_step: Option<f64>,
}

/// One line of `eval.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalLine {
    Episode {
        index: usize,
        length: usize,
        #[serde(rename = "return")]
        episode_return: f64,
        success: bool,
        edges: usize,
    },
    Summary(EvalSummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: Variant,
    pub checkpoint_step: usize,
    pub episodes: usize,
    pub greedy: bool,
    pub success: MeanCi,
    #[serde(rename = "return")]
    pub episode_return: MeanCi,
    pub mean_edges_per_step: f64,
}

/// One step of one traced episode. `pre` is the graph the
/// pre-communication used, `matrix` the gated graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub episode: usize,
    pub t: usize,
    pub pre: Adjacency,
    pub matrix: Adjacency,
    pub edges: usize,
}

/// Per-variant aggregate over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub final_success: Vec<f64>,
    pub median_success: f64,
    pub success: MeanCi,
    pub final_edges_per_step: Vec<f64>,
    pub median_edges_per_step: f64,
}

/// Append-only line writer; every line is flushed so an interrupted run
/// leaves a parseable prefix.
pub struct JsonLines {
    path: PathBuf,
    file: File,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(path)
            .map_err(CliError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write<T: Serialize>(&mut self, line: &T) -> Result<()> {
        let mut text = serde_json::to_string(line).map_err(|source| CliError::Json {
            path: self.path.clone(),
            source,
        })?;
        text.push('\n');
        self.file
            .write_all(text.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(CliError::io(&self.path))
    }
}

/// Parse every nonempty line of a JSON-lines file.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| CliError::Json {
                path: path.to_path_buf(),
                source,
            })?,
        );
    }
    Ok(out)
}
