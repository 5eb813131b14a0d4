//! Parameter checkpoints, their sidecar metadata and resumable train state.
//!
//! A checkpoint is `{format_version: 1, params: {name: {shape, values}}}`
//! with doubles at full round-trip precision. `<stem>.meta.json` next to it
//! records what produced it and how to rebuild the encoders.

use std::fs;
use std::path::{Path, PathBuf};

use cmssl_core::encoders::{Encoder, EncoderBundle};
use cmssl_core::trainer::TrainState;
use cmssl_core::ParamSet;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub params: ParamSet,
}

/// How the run's randomness was derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngInfo {
    pub generator: String,
    /// Seed given on the command line.
    pub seed: u64,
    /// Root seed of the pre-training substreams, derived from `seed` and the modality set.
    pub stream_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_fingerprint: String,
    /// `final` or `best`.
    pub kind: String,
    /// Epochs completed when the parameters were taken.
    pub epoch: usize,
    pub modalities: Vec<String>,
    pub star: bool,
    pub encoders: Vec<Encoder>,
    pub rng: RngInfo,
}

/// `dir/name.json` → `dir/name.meta.json`.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.meta.json"))
}

/// Write pretty JSON with a trailing newline, via a temporary file so a
/// crash never leaves a truncated output behind.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::format(path, format!("cannot serialize: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| CliError::format(path, format!("at `{}`: {}", e.path(), e.inner())))
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    write_json(path, &CheckpointFile { format_version: FORMAT_VERSION, params: params.clone() })
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let file: CheckpointFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported format_version {}", file.format_version)));
    }
    Ok(file.params)
}

/// Save parameters and their sidecar.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    save_params(path, params)?;
    write_json(&meta_path(path), meta)
}

/// Load a checkpoint and rebuild its encoders from the sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(EncoderBundle, CheckpointMeta)> {
    let meta: CheckpointMeta = read_json(&meta_path(path))?;
    let params = load_params(path)?;
    let bundle =
        EncoderBundle::from_parts(meta.encoders.clone(), params).map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((bundle, meta))
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    write_json(path, state)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    read_json(path)
}
