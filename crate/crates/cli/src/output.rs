//! Emitted artifacts and the manifest that pins them.
//!
//! Every command writes its files into one output directory and finishes
//! with `manifest.json`, which lists each file once with its SHA-256 digest.
//! `runs.jsonl` holds one [`RunRecord`] per line with keys in this order:
//!
//! ```text
//! run_id, setting, algorithm, family, protocol, seed, trial, test_modality,
//! hparams, checkpoints[{step, tm_val_auc, loo_val_auc?, oracle_val_auc}],
//! final_test_auc, selected, wall_ms, notes?, failure?
//! ```
//!
//! `wall_ms` is always `null` so that records are reproducible byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use maf_core::algorithms::RunRecord;
use maf_core::analysis::AnalysisReport;
use maf_core::protocols::BenchmarkReport;
use maf_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_FILE: &str = "runs.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const TOOL_NAME: &str = "mafbench";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Fully resolved options of the command.
    pub config: serde_json::Value,
    pub global_seed: Option<u64>,
    pub runs: Vec<String>,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, global_seed: Option<u64>) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            global_seed,
            runs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn file(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Files of one command, written as they are added and sealed by
/// [`Artifacts::finish`].
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    manifest: Manifest,
}

impl Artifacts {
    pub fn create(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn add(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if name == MANIFEST_FILE || self.manifest.file(name).is_some() {
            return Err(Error::Contract(format!("{name} is emitted twice")));
        }
        write_file(&self.dir.join(name), bytes)?;
        self.manifest.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn add_runs(&mut self, records: &[RunRecord]) -> Result<()> {
        self.manifest.runs.extend(records.iter().map(|r| r.run_id.clone()));
        self.add(RUNS_FILE, runs_jsonl(records)?.as_bytes())
    }

    pub fn finish(self) -> Result<Manifest> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_file(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn runs_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Runs, their aggregate report and optionally an analysis, plus the manifest.
pub fn write_outputs(
    records: &[RunRecord],
    report: &BenchmarkReport,
    analysis: Option<&AnalysisReport>,
    dir: &Path,
    manifest: Manifest,
) -> Result<Manifest> {
    let mut out = Artifacts::create(dir, manifest)?;
    out.add_runs(records)?;
    out.add(REPORT_FILE, report.to_csv().as_bytes())?;
    if let Some(a) = analysis {
        out.add(ANALYSIS_FILE, a.to_json().as_bytes())?;
        out.add("kl.csv", a.kl_csv().as_bytes())?;
        out.add("projection.csv", a.projection_csv().as_bytes())?;
    }
    out.finish()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Recomputes every listed digest. Returns one message per file that is
/// missing or whose content changed.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    let mut problems = Vec::new();
    for f in &manifest.files {
        let path = dir.join(&f.path);
        match fs::read(&path) {
            Ok(bytes) => {
                let digest = sha256_hex(&bytes);
                if digest != f.sha256 {
                    problems.push(format!("{}: sha256 {digest} does not match manifest {}", f.path, f.sha256));
                }
            }
            Err(e) => problems.push(format!("{}: {e}", f.path)),
        }
    }
    Ok(problems)
}
