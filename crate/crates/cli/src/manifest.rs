use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};
use crate::settings::Settings;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleVersion {
    pub name: &'static str,
    pub version: &'static str,
}

/// Provenance of one output directory. Rewritten in place as a run
/// progresses; `complete` is set last.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub settings: Settings,
    pub seeds: Vec<u64>,
    /// True when the resolved config applies no guidance updates.
    pub unguided: bool,
    pub inputs: Vec<InputDigest>,
    pub modules: Vec<ModuleVersion>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub complete: bool,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, settings: &Settings, seeds: Vec<u64>, inputs: Vec<InputDigest>) -> Self {
        Self {
            command: command.into(),
            unguided: settings.guidance.is_unguided(),
            settings: settings.clone(),
            seeds,
            inputs,
            modules: vec![
                ModuleVersion {
                    name: "motionguide-core",
                    version: motionguide::VERSION,
                },
                ModuleVersion {
                    name: "motionguide-cli",
                    version: env!("CARGO_PKG_VERSION"),
                },
            ],
            started_unix: now(),
            finished_unix: None,
            complete: false,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult {
        let json = serde_json::to_string_pretty(self).map_err(|e| Failure::from(motionguide::Error::from(e)))?;
        crate::write_file(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
    }

    pub fn finish(&mut self, dir: &Path) -> CliResult {
        self.finished_unix = Some(now());
        self.complete = true;
        self.write(dir)
    }
}
