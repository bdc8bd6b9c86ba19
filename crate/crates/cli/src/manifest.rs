use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bacon_core::data::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::Failure;

pub const FILE_NAME: &str = "manifest.json";

/// Everything needed to rerun a command: the resolved config, the
/// command-specific inputs, and digests of the data it read.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Value,
    pub datasets: BTreeMap<String, String>,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `done` or `failed`.
    pub status: String,
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, inputs: Value, out: &Path) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.distill.seed,
            config,
            inputs,
            datasets: BTreeMap::new(),
            output_dir: out.display().to_string(),
            started_unix: now(),
            finished_unix: None,
            status: "running".into(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn path(&self) -> PathBuf {
        Path::new(&self.output_dir).join(FILE_NAME)
    }

    pub fn write(&self) -> Result<(), Failure> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Failure::Runtime(e.to_string()))?;
        write_atomic(self.path(), &bytes)?;
        Ok(())
    }

    pub fn finish(&mut self, ok: bool) -> Result<(), Failure> {
        self.finished_unix = Some(now());
        self.status = if ok { "done" } else { "failed" }.into();
        self.write()
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("manifest {}: {e}", path.display())))
    }

    /// Fails when a dataset digest differs from the recorded one.
    pub fn check_datasets(&self, current: &BTreeMap<String, String>) -> Result<(), Failure> {
        for (name, digest) in &self.datasets {
            match current.get(name) {
                Some(d) if d == digest => {}
                Some(d) => {
                    return Err(Failure::Usage(format!(
                        "dataset `{name}` digest {d} differs from the manifest's {digest}"
                    )))
                }
                None => return Err(Failure::Usage(format!("dataset `{name}` from the manifest was not loaded"))),
            }
        }
        Ok(())
    }
}
