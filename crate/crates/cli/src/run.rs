//! Output directory bookkeeping: hashed outputs, CSV files and the run
//! manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<FileHash>,
    pub tool_version: String,
    /// Hash of subcommand, config, seed and input hashes.
    pub run_hash: String,
    pub wall_clock_secs: f64,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    pub fn start(
        subcommand: &str,
        out: &Path,
        cfg: &Config,
        seed: u64,
        threads: usize,
        inputs: &[PathBuf],
    ) -> Result<Self, CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.display().to_string(),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let identity = serde_json::to_vec(&(subcommand, cfg.resolved(), seed, &inputs))?;
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                config: cfg.resolved().clone(),
                seed,
                threads,
                inputs,
                tool_version: VERSION.to_string(),
                run_hash: sha256_hex(&identity),
                wall_clock_secs: 0.0,
                outputs: Vec::new(),
            },
            started: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.out
    }

    pub fn run_hash(&self) -> &str {
        &self.manifest.run_hash
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out.join(rel);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// CSV with a comment line naming the tool version and run hash.
    pub fn csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut buf = format!("# frad {VERSION} run {}\n", self.manifest.run_hash).into_bytes();
        {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        self.write(rel, &buf)
    }

    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.out.join(MANIFEST), &bytes)?;
        Ok(self.manifest)
    }
}

/// Number formatting shared by every CSV: shortest round-trip decimal.
pub fn num(x: f64) -> String {
    format!("{x}")
}
