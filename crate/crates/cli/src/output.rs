use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMINGS: &str = "timings.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(prisp_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content hashes and provenance of one command's outputs. Everything here
/// is deterministic; wall-clock goes to the timings sidecar.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    config_hash: &'a str,
    config: &'a crate::config::RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// Collects the files a command writes into one directory.
pub struct RunDir {
    dir: PathBuf,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timings: BTreeMap<String, serde_json::Value>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(prisp_core::Error::from)
            .with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an input file by name and content hash.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.inputs.insert(label.to_string(), h);
        Ok(())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(prisp_core::Error::from)?;
        }
        fs::write(&p, bytes)
            .map_err(prisp_core::Error::from)
            .with_context(|| format!("writing {}", p.display()))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Registers a file some other writer already produced.
    pub fn record_output(&mut self, name: &str) -> Result<()> {
        let h = file_hash(&self.path(name))?;
        self.outputs.insert(name.to_string(), h);
        Ok(())
    }

    pub fn timing<T: Serialize>(&mut self, key: &str, value: T) {
        self.timings
            .insert(key.to_string(), serde_json::to_value(value).expect("timings serialize"));
    }

    /// Writes the manifest and the timings sidecar.
    pub fn finish(self, cfg: &crate::config::RunConfig) -> Result<()> {
        let hash = cfg.hash();
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash: &hash,
            config: cfg,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.path(RUN_MANIFEST), text).map_err(prisp_core::Error::from)?;
        let mut t = serde_json::to_string_pretty(&self.timings)?;
        t.push('\n');
        fs::write(self.path(TIMINGS), t).map_err(prisp_core::Error::from)?;
        Ok(())
    }
}
