//! Provenance sidecars. Every artifact `X` gets `X.manifest.json` recording
//! the flags, input and output digests, seed and version. Wall-clock data is
//! confined to the `timing` object so the rest is reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{write_file, Failure};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, Failure> {
        let data = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub elapsed_ms: f64,
    /// Per-stage wall time in milliseconds.
    pub stages: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timing: Timing,
}

/// Accumulates stage timings while a command runs.
pub struct Recorder {
    command: &'static str,
    started: SystemTime,
    clock: Instant,
    last: Instant,
    stages: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        let now = Instant::now();
        Self {
            command,
            started: SystemTime::now(),
            clock: now,
            last: now,
            stages: BTreeMap::new(),
        }
    }

    /// Closes the current stage under `name`.
    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        *self.stages.entry(name.to_string()).or_default() += (now - self.last).as_secs_f64() * 1e3;
        self.last = now;
    }

    pub fn stages(&self) -> &BTreeMap<String, f64> {
        &self.stages
    }

    /// Writes `<primary>.manifest.json` describing `outputs` (the first of
    /// which is the primary artifact).
    pub fn finish(
        self,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<PathBuf, Failure> {
        let primary = outputs.first().expect("at least one artifact");
        let manifest = RunManifest {
            tool: "sparsealign",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed,
            config: serde_json::to_value(config).expect("flags serialize"),
            inputs: inputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_, _>>()?,
            outputs: outputs
                .iter()
                .map(|p| FileDigest::of(p))
                .collect::<Result<_, _>>()?,
            timing: Timing {
                started_unix_ms: self
                    .started
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0),
                elapsed_ms: self.clock.elapsed().as_secs_f64() * 1e3,
                stages: self.stages,
            },
        };
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
