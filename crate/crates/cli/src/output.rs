//! Artifact writers and the run manifest.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use rhc_core::random_fields::stream;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct SeedStreams {
    field: u64,
    initial_state: u64,
    risk_moments: u64,
    risk_indicators: u64,
    test_vectors: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_path: String,
    config_sha256: &'a str,
    master_seed: u64,
    seed_overridden: bool,
    seed_streams: SeedStreams,
    workers: usize,
    artifacts: Vec<Artifact>,
    status: &'a str,
    error: Option<&'a str>,
    wall_time_s: f64,
}

/// Output directory plus the provenance recorded in the manifest.
pub struct Context {
    command: &'static str,
    config_path: PathBuf,
    config_sha256: String,
    out: PathBuf,
    master_seed: u64,
    seed_overridden: bool,
    workers: usize,
    artifacts: RefCell<Vec<Artifact>>,
}

impl Context {
    pub fn new(
        command: &'static str,
        config_path: &Path,
        config_bytes: &[u8],
        out: &Path,
        master_seed: u64,
        seed_overridden: bool,
        workers: usize,
    ) -> Result<Self, Failure> {
        Ok(Context {
            command,
            config_path: config_path.to_path_buf(),
            config_sha256: sha256_hex(config_bytes),
            out: out.to_path_buf(),
            master_seed,
            seed_overridden,
            workers,
            artifacts: RefCell::new(vec![]),
        })
    }

    pub fn has_artifacts(&self) -> bool {
        !self.artifacts.borrow().is_empty()
    }

    fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, bytes)
            .map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })?;
        self.artifacts.borrow_mut().push(Artifact { file: name.to_string(), sha256: sha256_hex(bytes) });
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_csv<T: Serialize>(
        &self,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(vec![]);
        for row in rows {
            w.serialize(row).map_err(|e| Failure { code: 1, message: format!("{name}: {e}") })?;
        }
        let bytes = w.into_inner().map_err(|e| Failure { code: 1, message: format!("{name}: {e}") })?;
        self.write_bytes(name, &bytes)
    }

    /// Writes a CSV whose columns are only known at run time.
    pub fn write_table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(vec![]);
        let fail = |e: csv::Error| Failure { code: 1, message: format!("{name}: {e}") };
        w.write_record(header).map_err(fail)?;
        for row in rows {
            w.write_record(row).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure { code: 1, message: format!("{name}: {e}") })?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| Failure { code: 1, message: format!("{name}: {e}") })?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    /// Written last; the only artifact that depends on wall time.
    pub fn write_manifest(&self, wall_time_s: f64, failure: Option<&Failure>) -> Result<(), Failure> {
        let manifest = Manifest {
            command: self.command,
            version: rhc_core::VERSION,
            config_path: self.config_path.display().to_string(),
            config_sha256: &self.config_sha256,
            master_seed: self.master_seed,
            seed_overridden: self.seed_overridden,
            seed_streams: SeedStreams {
                field: stream::FIELD,
                initial_state: stream::INITIAL_STATE,
                risk_moments: stream::RISK_MOMENTS,
                risk_indicators: stream::RISK_INDICATORS,
                test_vectors: stream::TEST_VECTORS,
            },
            workers: self.workers,
            artifacts: self.artifacts.borrow().clone(),
            status: if failure.is_some() { "failed" } else { "ok" },
            error: failure.map(|f| f.message.as_str()),
            wall_time_s,
        };
        let mut bytes =
            serde_json::to_vec_pretty(&manifest).map_err(|e| Failure { code: 1, message: e.to_string() })?;
        bytes.push(b'\n');
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("manifest.json"), bytes)?;
        Ok(())
    }
}
