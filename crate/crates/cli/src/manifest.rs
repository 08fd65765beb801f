//! The `manifest.json` written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub fgcca: &'static str,
    pub fgcca_cli: &'static str,
}

/// Everything that may differ between reproducible runs lives here.
#[derive(Debug, Serialize)]
pub struct Runtime {
    pub threads: usize,
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub warnings: usize,
    pub versions: Versions,
    pub runtime: Runtime,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Accumulates manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: Option<u64>) {
        self.seed = seed;
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> serde_json::Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.push(InputFile {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn write(mut self, dir: &Path, warnings: usize) -> std::io::Result<()> {
        self.timings
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        self.outputs.push("run.log".into());
        self.outputs.sort();
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            warnings,
            versions: Versions {
                fgcca: fgcca::VERSION,
                fgcca_cli: env!("CARGO_PKG_VERSION"),
            },
            runtime: Runtime {
                threads: rayon::current_num_threads(),
                timings_ms: self.timings,
            },
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")
    }
}
