//! Output files, hashing and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects written files and timings for `manifest.json`.
pub struct Run {
    pub dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub command: String,
    started: Instant,
    timings: Vec<(String, f64)>,
    files: Vec<(String, String)>,
    results: Vec<u8>,
}

impl Run {
    pub fn new(dir: &Path, config_hash: String, seed: u64, workers: usize, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            config_hash,
            seed,
            workers,
            command: command.into(),
            started: Instant::now(),
            timings: Vec::new(),
            files: Vec::new(),
            results: Vec::new(),
        })
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.timings.push((label.into(), t0.elapsed().as_secs_f64()));
        out
    }

    /// Writes `bytes` to `name` in the output directory. Files flagged as
    /// results feed the results hash; it must not depend on timings.
    pub fn write(&mut self, name: &str, bytes: &[u8], result: bool) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push((name.into(), sha256_hex(bytes)));
        if result {
            self.results.extend_from_slice(name.as_bytes());
            self.results.extend_from_slice(bytes);
        }
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &Value, result: bool) -> Result<PathBuf> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(name, &text, result)
    }

    pub fn results_hash(&self) -> String {
        sha256_hex(&self.results)
    }

    pub fn finish(mut self) -> Result<String> {
        let results_hash = self.results_hash();
        let manifest = json!({
            "tool": "margint",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "workers": self.workers,
            "results_hash": results_hash,
            "files": self.files.iter().map(|(n, h)| json!({"name": n, "sha256": h})).collect::<Vec<_>>(),
            "timings_seconds": self.timings.iter().map(|(n, t)| json!({"step": n, "seconds": t})).collect::<Vec<_>>(),
            "total_seconds": self.started.elapsed().as_secs_f64(),
        });
        self.write_json("manifest.json", &manifest, false)?;
        Ok(results_hash)
    }
}

/// CSV with a leading `config_hash` column on every row.
pub fn stamped_csv(hash: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["config_hash"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    for row in rows {
        let mut rec = vec![hash.to_string()];
        rec.extend(row);
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn num(v: f64) -> String {
    format!("{v:?}")
}
