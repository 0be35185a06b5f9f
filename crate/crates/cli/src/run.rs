//! Output directory bookkeeping: run id, config hash and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};

pub const MANIFEST: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Run {
    pub out: PathBuf,
    pub run_id: String,
    command: String,
    config_hash: String,
    seed: u64,
    start: Instant,
    extra: Map<String, Value>,
    outputs: Vec<String>,
}

impl Run {
    /// `config` is the canonical JSON of the resolved configuration and
    /// `args` the command-specific inputs that also shape the outputs.
    pub fn new(out: &Path, command: &str, config: &str, args: &str, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let config_hash = sha256_hex(config.as_bytes());
        let run_id = sha256_hex(format!("{command}\n{config_hash}\n{args}\n{seed}").as_bytes())[..12].to_string();
        log::info!("{command}: run {run_id} -> {}", out.display());
        Ok(Self {
            out: out.to_path_buf(),
            run_id,
            command: command.to_string(),
            config_hash,
            seed,
            start: Instant::now(),
            extra: Map::new(),
            outputs: Vec::new(),
        })
    }

    /// Path for an output file, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.output(name);
        std::fs::write(&path, text).map_err(io_err(path))
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("run_id".into(), json!(self.run_id));
        m.insert("config_hash".into(), json!(self.config_hash));
        m.insert("seed".into(), json!(self.seed));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m.insert("wall_time_s".into(), json!(self.start.elapsed().as_secs_f64()));
        m.insert("outputs".into(), json!(self.outputs));
        m.extend(self.extra);
        let path = self.out.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&Value::Object(m))?).map_err(io_err(path))
    }
}
