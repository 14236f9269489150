//! File formats: checkpoints, configs, records and curves.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

mod checkpoint;
mod config;
mod manifest;
mod records;
mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{parse_config, parse_config_str, ExperimentConfig, InputPaths, OutputPaths};
pub use manifest::{
    load_stream, prune_manifest_from_str, prune_manifest_to_string, write_stream, IdxFiles, ManifestTask,
    PruneManifest, StreamManifest, TaskRole, STREAM_MANIFEST,
};
pub use records::{
    curves_to_csv, load_records, records_from_csv, records_to_csv, save_records, CURVE_HEADER, RECORDS_HEADER,
};
pub use report::{curves_svg, report, DENSE_METHOD};
