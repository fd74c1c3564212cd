// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-invocation bookkeeping: declared inputs and outputs, hashing, the
//! JSON manifest, and cleanup of partial outputs on failure.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use stitchkit::tensor_store::{self, ActivationShard, DenseMatrix};
use stitchkit::{rng, report, SaeParams, Stitch};

use crate::config::Config;
use crate::error::{CliError, CliResult};

pub struct Run {
    pub cfg: Config,
    pub subcommand: &'static str,
    /// Seed for this stage, derived from the root seed.
    pub seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    pub flops: f64,
    started: Instant,
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    version: &'a str,
    seed: u64,
    stage_seed: u64,
    config: serde_json::Value,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    wall_time_s: f64,
    flops: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn record(path: &Path) -> CliResult<FileRecord> {
    let bytes = fs::metadata(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .len();
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
        bytes,
    })
}

impl Run {
    pub fn new(cfg: Config, subcommand: &'static str, stage: &str) -> Self {
        let seed = rng::substream(cfg.seed, stage);
        Self {
            cfg,
            subcommand,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            flops: 0.0,
            started: Instant::now(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg.out(&format!("{}.manifest.json", self.subcommand))
    }

    fn input(&mut self, key: &str, path: &Path) -> CliResult<()> {
        if !path.is_file() {
            return Err(CliError::config(key, format!("file not found: {}", path.display())));
        }
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
        Ok(())
    }

    /// Register an output path, creating its directory.
    pub fn output(&mut self, path: PathBuf) -> CliResult<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn read_shard(&mut self, key: &str, path: &Path) -> CliResult<ActivationShard> {
        self.input(key, path)?;
        for side in [tensor_store::ids_path(path), tensor_store::mask_path(path)] {
            self.input(key, &side)?;
        }
        tensor_store::read_shard(path).map_err(|e| CliError::from(e).with_key(key))
    }

    pub fn read_shards(&mut self, key: &str, paths: &[PathBuf]) -> CliResult<Vec<ActivationShard>> {
        if paths.is_empty() {
            return Err(CliError::config(key, "at least one path is required"));
        }
        let shards = paths
            .iter()
            .map(|p| self.read_shard(key, p))
            .collect::<CliResult<Vec<_>>>()?;
        if shards.iter().any(|s| s.d_model != shards[0].d_model) {
            return Err(CliError::data("shards disagree on d_model").with_key(key));
        }
        Ok(shards)
    }

    pub fn read_bundle(&mut self, key: &str, path: &Path) -> CliResult<Vec<DenseMatrix>> {
        self.input(key, path)?;
        tensor_store::read_bundle(path).map_err(|e| CliError::from(e).with_key(key))
    }

    pub fn read_sae(&mut self, key: &str, path: &Path) -> CliResult<SaeParams> {
        let mats = self.read_bundle(key, path)?;
        let (p, _) = SaeParams::from_bundle(&mats).map_err(|e| CliError::from(e).with_key(key))?;
        Ok(p)
    }

    pub fn read_stitch(&mut self, key: &str, path: &Path) -> CliResult<Stitch> {
        let mats = self.read_bundle(key, path)?;
        Stitch::from_bundle(&mats).map_err(|e| CliError::from(e).with_key(key))
    }

    pub fn read_csv(&mut self, key: &str, path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
        self.input(key, path)?;
        report::read_csv(path).map_err(|e| CliError::from(e).with_key(key))
    }

    pub fn write_shard(&mut self, shard: &ActivationShard, path: PathBuf) -> CliResult<()> {
        for side in [tensor_store::ids_path(&path), tensor_store::mask_path(&path)] {
            self.output(side)?;
        }
        let path = self.output(path)?;
        tensor_store::write_shard(shard, &path)?;
        Ok(())
    }

    pub fn write_bundle(&mut self, mats: &[DenseMatrix], path: PathBuf) -> CliResult<()> {
        let path = self.output(path)?;
        tensor_store::write_bundle(mats, &path)?;
        Ok(())
    }

    pub fn write_csv(&mut self, path: PathBuf, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.output(path)?;
        report::write_csv(&path, header, rows)?;
        Ok(())
    }

    /// Write the manifest. Called once all outputs exist.
    pub fn finish(&mut self, stage: &str) -> CliResult<PathBuf> {
        let config = serde_json::to_value(self.cfg.table(stage)).unwrap_or(serde_json::Value::Null);
        let inputs = self.inputs.iter().map(|p| record(p)).collect::<CliResult<Vec<_>>>()?;
        let outputs = self.outputs.iter().map(|p| record(p)).collect::<CliResult<Vec<_>>>()?;
        let m = Manifest {
            subcommand: self.subcommand,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            stage_seed: self.seed,
            config,
            inputs,
            outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            flops: self.flops,
        };
        let path = self.output(self.manifest_path())?;
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    /// Remove every output registered so far.
    pub fn cleanup(&self) {
        for p in &self.outputs {
            let _ = fs::remove_file(p);
        }
        let _ = fs::remove_file(self.manifest_path());
    }
}
