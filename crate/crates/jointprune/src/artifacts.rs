//! On-disk run artifacts: the checkpoint directory (weight store plus run
//! state), the JSON-lines trace, and the final-architecture summary.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{ConstraintSpec, CostMetric, LatencyTable};
use crate::error::{Error, Result};
use crate::estimator::Schedule;
use crate::net::{SgdHyper, SharedWeightStore};
use crate::optimizer::TraceRecord;
use crate::rng::RngState;
use crate::runconfig::DataSection;
use crate::space::{ArchitectureConfig, ArchitectureSpace};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const STORE_FILE: &str = "store.bin";
pub const STATE_FILE: &str = "state.json";

/// Everything besides the weight store needed to resume or re-evaluate a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointState {
    pub schema_version: u32,
    pub space: ArchitectureSpace,
    pub constraint: ConstraintSpec,
    pub latency_table: Option<LatencyTable>,
    pub data: DataSection,
    pub hyper: SgdHyper,
    pub mu: Vec<f64>,
    pub outer_step: usize,
    pub sigma_schedule: Schedule,
    pub alpha_schedule: Schedule,
    pub rng: RngState,
}

impl CheckpointState {
    /// Write `state.json` + `store.bin` into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, store: &SharedWeightStore) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        store.save_to(&dir.join(STORE_FILE))?;
        let f = std::fs::File::create(dir.join(STATE_FILE))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(CheckpointState, SharedWeightStore)> {
        let state_path = dir.join(STATE_FILE);
        let f = std::fs::File::open(&state_path).map_err(|e| {
            Error::Checkpoint(format!("cannot open {}: {e}", state_path.display()))
        })?;
        let state: CheckpointState = serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Checkpoint(format!("bad state.json: {e}")))?;
        if state.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint schema {}",
                state.schema_version
            )));
        }
        let store = SharedWeightStore::load_from(&dir.join(STORE_FILE))?;
        store.matches_space(&state.space)?;
        Ok((state, store))
    }
}

/// Streaming JSONL trace writer; one record per line, flushed per record.
pub struct TraceWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<TraceWriter> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(TraceWriter {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Read a trace; a malformed or truncated tail yields the valid prefix and
/// `truncated = true` instead of an error.
pub fn read_trace(path: &Path) -> Result<(Vec<TraceRecord>, bool)> {
    let f = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut truncated = false;
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => records.push(r),
            Err(_) => {
                truncated = true;
                break;
            }
        }
    }
    Ok((records, truncated))
}

/// Final search result, written next to the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalArchitecture {
    pub out_channels: Vec<usize>,
    pub spatial: usize,
    pub depth: usize,
    pub cost: f64,
    pub metric: CostMetric,
    pub mu: Vec<f64>,
}

impl FinalArchitecture {
    pub fn from_config(config: &ArchitectureConfig, cost: f64, metric: CostMetric, mu: Vec<f64>) -> Self {
        FinalArchitecture {
            out_channels: config.out_channels.clone(),
            spatial: config.spatial,
            depth: config.depth,
            cost,
            metric,
            mu,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FinalArchitecture> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
