//! Checkpoints are single JSON documents:
//! `{"format": "tgcnet-checkpoint", "version": 1, "state": {...}}`.
//!
//! `state` holds the run config, online and target parameters as
//! `(name, shape, data)` records, Adam moments, the replay buffer, counters
//! and the three RNG stream positions. Floats are written with shortest
//! round-trip formatting so a reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tgcnet::train::{TrainerState, STATE_VERSION};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "tgcnet-checkpoint";

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    state: TrainerState,
}

/// Write atomically: a temporary sibling is renamed into place.
pub fn save(path: &Path, state: &TrainerState) -> Result<()> {
    let doc = Document {
        format: FORMAT.into(),
        version: STATE_VERSION,
        state: state.clone(),
    };
    let text = serde_json::to_string(&doc).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(CliError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<TrainerState> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let doc: Document = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if doc.format != FORMAT {
        return Err(CliError::Invalid(format!(
            "{}: not a checkpoint (format `{}`)",
            path.display(),
            doc.format
        )));
    }
    if doc.version != STATE_VERSION || doc.state.version != STATE_VERSION {
        return Err(CliError::Invalid(format!(
            "{}: checkpoint version {} is not supported (expected {STATE_VERSION})",
            path.display(),
            doc.version
        )));
    }
    Ok(doc.state)
}
