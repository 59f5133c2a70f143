//! On-disk form of a trained model: a JSON manifest next to binary
//! embedding tables. Tables are stored at full precision and the
//! manifest has a stable field order, so saving, loading, and saving
//! again reproduces every file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cemb::{self, CembError, Precision};

use super::{EpochRecord, RecModel, TrainSettings, TrainedState};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "cllmr-checkpoint";
const FORMAT_VERSION: u32 = 1;

/// Seed streams the trainer derives from the master seed; recorded so
/// a checkpoint documents everything needed to reproduce the run.
const SEED_STREAMS: [&str; 6] = [
    "embeddings",
    "user-encoder",
    "item-encoder",
    "user-gate",
    "item-gate",
    "sse-noise",
];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint manifest: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Table(#[from] CembError),
    #[error("checkpoint tables disagree with manifest: {message}")]
    Mismatch { message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    n_users: usize,
    n_items: usize,
    dim: usize,
    has_gates: bool,
    has_side: bool,
    settings: TrainSettings,
    seed_streams: Vec<String>,
    best_epoch: usize,
    history: Vec<EpochRecord>,
}

/// Writes `manifest.json`, `propagated.cemb`, and, when present,
/// `gates.cemb` and `side.cemb` into `dir`.
pub fn save(dir: &Path, state: &TrainedState) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        n_users: state.model.n_users,
        n_items: state.model.n_items,
        dim: state.model.dim(),
        has_gates: state.model.gates.is_some(),
        has_side: state.model.side.is_some(),
        settings: state.settings.clone(),
        seed_streams: SEED_STREAMS.iter().map(|s| s.to_string()).collect(),
        best_epoch: state.best_epoch,
        history: state.history.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("plain fields");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;

    cemb::write_table(&dir.join("propagated.cemb"), &state.model.propagated, Precision::F64)?;
    if let Some(g) = &state.model.gates {
        cemb::write_table(&dir.join("gates.cemb"), g, Precision::F64)?;
    }
    if let Some(s) = &state.model.side {
        cemb::write_table(&dir.join("side.cemb"), s, Precision::F64)?;
    }
    Ok(())
}

/// Reads a directory written by [`save`].
pub fn load(dir: &Path) -> Result<TrainedState, CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format {
            path: manifest_path.clone(),
            message: format!("format field is '{}'", manifest.format),
        });
    }
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Format {
            path: manifest_path,
            message: format!("unsupported version {}", manifest.version),
        });
    }

    let propagated = cemb::read_table(&dir.join("propagated.cemb"))?;
    let n_nodes = manifest.n_users + manifest.n_items;
    if propagated.dim() != (n_nodes, manifest.dim) {
        return Err(CheckpointError::Mismatch {
            message: format!(
                "propagated table is {}x{}, manifest says {}x{}",
                propagated.nrows(),
                propagated.ncols(),
                n_nodes,
                manifest.dim
            ),
        });
    }
    let gates = if manifest.has_gates {
        let g = cemb::read_table(&dir.join("gates.cemb"))?;
        if g.dim() != propagated.dim() {
            return Err(CheckpointError::Mismatch {
                message: "gate table shape differs from the embedding table".to_string(),
            });
        }
        Some(g)
    } else {
        None
    };
    let side = if manifest.has_side {
        let s = cemb::read_table(&dir.join("side.cemb"))?;
        if s.nrows() != n_nodes {
            return Err(CheckpointError::Mismatch {
                message: "side table row count differs from the node count".to_string(),
            });
        }
        Some(s)
    } else {
        None
    };

    Ok(TrainedState {
        model: RecModel {
            n_users: manifest.n_users,
            n_items: manifest.n_items,
            propagated,
            gates,
            side,
        },
        settings: manifest.settings,
        best_epoch: manifest.best_epoch,
        history: manifest.history,
    })
}
