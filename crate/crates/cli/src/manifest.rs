//! `manifest.json`: one per run directory, a list of run entries that only
//! ever grows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tps_partition::util::{sha256_hex, write_atomic};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory for outputs; as given for inputs.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    /// Reads the file back, so a listed artifact is known to exist on disk.
    pub fn of(path: &Path, base: Option<&Path>) -> anyhow::Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("validating {}", path.display()))?;
        let shown = base.and_then(|b| path.strip_prefix(b).ok()).unwrap_or(path);
        Ok(Self {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, f64>,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Appends `entry` to the directory's manifest, keeping earlier runs intact.
    pub fn append(dir: &Path, entry: RunEntry) -> anyhow::Result<PathBuf> {
        let mut m = Self::load(dir)?;
        m.runs.push(entry);
        let path = dir.join(MANIFEST);
        write_atomic(&path, serde_json::to_string_pretty(&m)?.as_bytes())?;
        let back = Self::load(dir)?;
        if back != m {
            bail!("manifest {} did not read back intact", path.display());
        }
        Ok(path)
    }
}

/// Collects what a command did for its manifest entry.
pub struct Recorder {
    command: String,
    config: ExperimentConfig,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<Artifact>,
    timings_ms: BTreeMap<String, f64>,
    started: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("master".to_string(), config.seed);
        Self {
            command: command.to_string(),
            config: config.clone(),
            seeds,
            inputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(Artifact::of(path, None)?);
        Ok(())
    }

    /// Runs `f`, recording its wall-clock time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings_ms
            .insert(stage.to_string(), t.elapsed().as_secs_f64() * 1e3);
        out
    }

    /// Validates every written file and appends the manifest entry.
    pub fn finish(mut self, dir: &Path, written: &[PathBuf]) -> anyhow::Result<PathBuf> {
        let mut artifacts = written
            .iter()
            .map(|p| Artifact::of(p, Some(dir)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.timings_ms
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let entry = RunEntry {
            command: self.command,
            argv: std::env::args().skip(1).collect(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            artifacts,
            timings_ms: self.timings_ms,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        RunManifest::append(dir, entry)
    }
}
