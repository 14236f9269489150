//! TOML manifests for generated streams and pruning results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, write_idx, Dataset, StreamData, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::prune::{KeepSet, PruneResult, PruningPlan};

pub const STREAM_MANIFEST: &str = "stream.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRole {
    Pretrain,
    Downstream,
}

/// IDX file pair, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub role: TaskRole,
    pub spec: TaskSpec,
    pub train: IdxFiles,
    pub val: IdxFiles,
    pub test: IdxFiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub seed: u64,
    /// Pretraining task first, then downstream tasks in stream order.
    pub tasks: Vec<ManifestTask>,
}

fn toml_string<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::InvalidSpec(format!("manifest serialization: {e}")))
}

fn split_files(task_id: &str, split: &str) -> IdxFiles {
    IdxFiles {
        images: PathBuf::from(task_id).join(format!("{split}-images.idx3-ubyte")),
        labels: PathBuf::from(task_id).join(format!("{split}-labels.idx1-ubyte")),
    }
}

/// Writes every split of every task as IDX files under `dir` plus
/// `dir/stream.toml`, and returns the manifest.
pub fn write_stream(data: &StreamData, seed: u64, dir: &Path) -> Result<StreamManifest> {
    let mut tasks = Vec::new();
    let all = std::iter::once((TaskRole::Pretrain, &data.pretrain))
        .chain(data.downstream.iter().map(|t| (TaskRole::Downstream, t)));
    for (role, task) in all {
        let id = &task.spec.task_id;
        fs::create_dir_all(dir.join(id)).map_err(|e| Error::io(dir.join(id), e))?;
        let entry = ManifestTask {
            role,
            spec: task.spec.clone(),
            train: split_files(id, "train"),
            val: split_files(id, "val"),
            test: split_files(id, "test"),
        };
        for (files, ds) in [(&entry.train, &task.train), (&entry.val, &task.val), (&entry.test, &task.test)] {
            write_idx(ds, dir.join(&files.images), dir.join(&files.labels))?;
        }
        tasks.push(entry);
    }
    let manifest = StreamManifest { seed, tasks };
    write_atomic(&dir.join(STREAM_MANIFEST), toml_string(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn load_split(dir: &Path, files: &IdxFiles, spec: &TaskSpec, expected: usize) -> Result<Dataset> {
    let ds = load_idx(dir.join(&files.images), dir.join(&files.labels))?;
    let size = spec.image_size;
    if ds.len() != expected || ds.images.shape()[2..] != [size, size] {
        return Err(Error::InvalidTask {
            task: spec.task_id.clone(),
            reason: format!(
                "{} holds {:?}, manifest expects {expected} images of {size}x{size}",
                files.images.display(),
                ds.images.shape()
            ),
        });
    }
    Ok(ds)
}

/// Reads a manifest written by [`write_stream`] and loads its datasets.
pub fn load_stream(manifest_path: &Path) -> Result<(StreamManifest, StreamData)> {
    let manifest: StreamManifest = toml::from_str(&read_to_string(manifest_path)?)
        .map_err(|e| Error::InvalidSpec(format!("{}: {}", manifest_path.display(), e.message())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut pretrain = None;
    let mut downstream = Vec::new();
    for t in &manifest.tasks {
        t.spec.validate()?;
        let data = TaskData {
            spec: t.spec.clone(),
            train: load_split(dir, &t.train, &t.spec, t.spec.n_train)?,
            val: load_split(dir, &t.val, &t.spec, t.spec.n_val)?,
            test: load_split(dir, &t.test, &t.spec, t.spec.n_test)?,
        };
        match t.role {
            TaskRole::Pretrain if pretrain.is_none() => pretrain = Some(data),
            TaskRole::Pretrain => return Err(Error::InvalidSpec("manifest lists two pretraining tasks".into())),
            TaskRole::Downstream => downstream.push(data),
        }
    }
    let pretrain = pretrain.ok_or_else(|| Error::InvalidSpec("manifest has no pretraining task".into()))?;
    Ok((manifest, StreamData { pretrain, downstream }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneManifest {
    pub plan: PruningPlan,
    pub rate: f64,
    /// FLOP fraction removed over the prunable layers.
    pub achieved: f64,
    /// FLOP fraction removed over the whole training step.
    pub achieved_model: f64,
    pub integer_pinned: bool,
    pub keep_sets: Vec<KeepSet>,
}

impl From<&PruneResult> for PruneManifest {
    fn from(r: &PruneResult) -> Self {
        Self {
            plan: r.plan,
            rate: r.rate,
            achieved: r.achieved,
            achieved_model: r.achieved_model,
            integer_pinned: r.integer_pinned,
            keep_sets: r.keep_sets.clone(),
        }
    }
}

pub fn prune_manifest_to_string(manifest: &PruneManifest) -> Result<String> {
    toml_string(manifest)
}

pub fn prune_manifest_from_str(text: &str) -> Result<PruneManifest> {
    toml::from_str(text).map_err(|e| Error::InvalidSpec(format!("prune manifest: {}", e.message())))
}
