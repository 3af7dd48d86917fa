//! Run manifests: everything needed to replay a subcommand.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// SHA-256 over git's blob framing (`blob <len>\0<bytes>`).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    config: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: Vec<(String, f64)>,
    started: f64,
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        RunManifest {
            command,
            argv: std::env::args().collect(),
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            started: unix_now(),
        }
    }

    pub fn config<K: ToString>(&mut self, pairs: impl IntoIterator<Item = (K, String)>) {
        self.config
            .extend(pairs.into_iter().map(|(k, v)| (k.to_string(), v)));
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn timing(&mut self, label: impl Into<String>, seconds: f64) {
        self.timings.push((label.into(), seconds));
    }

    fn render(&self) -> Result<String> {
        let mut s = format!("command = {}\n", self.command);
        s += &format!("argv = {}\n", self.argv.join(" "));
        s += &format!("started = {:.3}\n", self.started);
        s += &format!("finished = {:.3}\n", unix_now());
        s += "\n[config]\n";
        for (k, v) in &self.config {
            s += &format!("{k} = {v}\n");
        }
        s += "\n[inputs]\n";
        for p in &self.inputs {
            s += &format!("{} = {}\n", p.display(), file_hash(p)?);
        }
        s += "\n[outputs]\n";
        for p in &self.outputs {
            s += &format!("{} = {}\n", p.display(), file_hash(p)?);
        }
        if !self.timings.is_empty() {
            s += "\n[seconds]\n";
            for (k, v) in &self.timings {
                s += &format!("{k} = {v:.3}\n");
            }
        }
        Ok(s)
    }

    /// Writes `manifest-<command>.txt` into `dir`.
    pub fn finish(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.txt", self.command));
        dcsat::fsio::write_atomic(&path, self.render()?.as_bytes())?;
        Ok(path)
    }
}
