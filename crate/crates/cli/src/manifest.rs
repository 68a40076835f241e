//! Dataset, split and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gpcl_core::scene_io::load_scene;
use gpcl_core::SceneSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Hex SHA-256 of `"blob <len>\0" + content`, the git object layout.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(content_hash(&bytes))
}

/// One scene file with its group id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub path: PathBuf,
    pub group_id: u32,
}

/// Scene files written by `gen-data`; paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub synth: gpcl_core::synth::SynthConfig,
    pub first_scene: u64,
    pub scenes: Vec<SceneEntry>,
}

/// Labeled and unlabeled scene lists written by `split`; paths are absolute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub class_count: usize,
    pub labeled_ratio: f64,
    pub sequence_aware: bool,
    pub seed: u64,
    pub cut_group: Option<u32>,
    pub labeled: Vec<SceneEntry>,
    pub unlabeled: Vec<SceneEntry>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

impl DatasetManifest {
    /// Entries with paths resolved against the manifest location.
    pub fn resolved(&self, manifest_path: &Path) -> CliResult<Vec<SceneEntry>> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        self.scenes
            .iter()
            .map(|e| {
                let p = dir.join(&e.path);
                let p = p.canonicalize().map_err(|err| CliError::io(&p, err))?;
                Ok(SceneEntry { path: p, group_id: e.group_id })
            })
            .collect()
    }
}

/// Loads scene files, dropping labels when `drop_labels` is set.
pub fn load_set(entries: &[SceneEntry], class_count: usize, drop_labels: bool) -> CliResult<SceneSet> {
    let mut set = SceneSet::empty(class_count);
    for e in entries {
        let (cloud, k) = load_scene(&e.path)?;
        if k != class_count {
            return Err(CliError::Data(format!(
                "{} has {k} classes, expected {class_count}",
                e.path.display()
            )));
        }
        set.push(if drop_labels { cloud.without_labels() } else { cloud }, e.group_id);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub hash: String,
}

impl Artifact {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(Self { path: path.to_path_buf(), hash: file_hash(path)? })
    }
}

/// Record of one command invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector; `rerun` replays it from `cwd`.
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    /// Hash over the input hashes in order.
    pub input_hash: String,
    pub outputs: Vec<Artifact>,
    pub started_unix: f64,
    pub wall_seconds: f64,
}

/// Collects manifest fields while a command runs.
pub struct RunRecorder {
    command: String,
    args: Vec<String>,
    started: SystemTime,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.into(),
            args: args.to_vec(),
            started: SystemTime::now(),
            config: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes inputs and outputs and writes `run_manifest.json` into `dir`.
    pub fn finish(self, dir: &Path) -> CliResult<()> {
        let inputs = self.inputs.iter().map(|p| Artifact::of(p)).collect::<CliResult<Vec<_>>>()?;
        let outputs = self.outputs.iter().map(|p| Artifact::of(p)).collect::<CliResult<Vec<_>>>()?;
        let joined: String = inputs.iter().map(|a| a.hash.as_str()).collect::<Vec<_>>().join("\n");
        let started_unix = self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let wall_seconds = self.started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            cwd: std::env::current_dir().unwrap_or_default(),
            config: self.config,
            seeds: self.seeds,
            input_hash: content_hash(joined.as_bytes()),
            inputs,
            outputs,
            started_unix,
            wall_seconds,
        };
        write_json(&manifest, &dir.join(RUN_MANIFEST))
    }
}
