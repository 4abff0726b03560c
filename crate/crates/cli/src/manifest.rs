//! The experiment manifest: stage status, artifact hashes and the declared
//! data-access list, rewritten atomically after every change.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xlrs_core::synthlang::Split;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Pretrain,
    Finetune,
    Diagnose,
    Select,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenCorpus,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Diagnose,
        Stage::Select,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Diagnose => "diagnose",
            Stage::Select => "select",
            Stage::Report => "report",
        }
    }

    /// Stages that must be complete before this one runs.
    pub fn prerequisites(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("listed stage");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum StageStatus {
    #[default]
    Pending,
    Running,
    Done,
    Failed {
        message: String,
    },
}

/// A file produced by a stage, as a path relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub artifacts: Vec<Artifact>,
    /// Units of work finished so far, e.g. fine-tuning run ids.
    pub completed: BTreeSet<String>,
}

/// One declared read of corpus data by a stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAccess {
    pub stage: Stage,
    pub split: Split,
    pub langs: Vec<String>,
    /// Whether task labels (targets) are read, not just raw sentences.
    pub labels: bool,
    pub purpose: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_path: Option<String>,
    /// Hash of the normalized configuration, seed override applied.
    pub config_sha256: String,
    pub seed: u64,
    pub out_dir: String,
    pub code_version: String,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub data_access: Vec<DataAccess>,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("i/o error on {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path} is malformed")]
    Malformed { path: PathBuf, source: serde_json::Error },
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_error(path))?))
}

/// Writes through a sibling temporary file and a rename, so readers see
/// either the old contents or the new ones.
pub fn write_atomic_io(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ManifestError> {
    write_atomic_io(path, bytes).map_err(io_error(path))
}

impl ExperimentManifest {
    pub fn new(config_path: Option<&Path>, config_sha256: String, seed: u64, out: &Path) -> Self {
        Self {
            config_path: config_path.map(|p| p.display().to_string()),
            config_sha256,
            seed,
            out_dir: out.display().to_string(),
            code_version: CODE_VERSION.to_string(),
            stages: Stage::ALL.iter().map(|s| (*s, StageRecord::default())).collect(),
            data_access: Vec::new(),
        }
    }

    pub fn path(out: &Path) -> PathBuf {
        out.join(MANIFEST_FILE)
    }

    pub fn load(out: &Path) -> Result<Option<Self>, ManifestError> {
        let path = Self::path(out);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| ManifestError::Malformed { path, source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_error(&path)(e)),
        }
    }

    pub fn save(&self, out: &Path) -> Result<(), ManifestError> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&Self::path(out), &bytes)
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        &self.stages[&stage]
    }

    pub fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.entry(stage).or_default()
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.record(stage).status == StageStatus::Done
    }

    /// Adds an access declaration unless an identical one exists.
    pub fn declare(&mut self, access: DataAccess) {
        if !self.data_access.contains(&access) {
            self.data_access.push(access);
        }
    }

    /// Hashes `paths` (relative to `out`) and marks `stage` done with them.
    pub fn complete(&mut self, out: &Path, stage: Stage, paths: &[String]) -> Result<(), ManifestError> {
        let artifacts = paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.clone(),
                    sha256: sha256_file(&out.join(p))?,
                })
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        let rec = self.record_mut(stage);
        rec.artifacts = artifacts;
        rec.status = StageStatus::Done;
        self.save(out)
    }

    /// Artifacts of done stages whose file is missing or whose hash differs.
    pub fn verify(&self, out: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for rec in self.stages.values().filter(|r| r.status == StageStatus::Done) {
            for a in &rec.artifacts {
                match sha256_file(&out.join(&a.path)) {
                    Ok(h) if h == a.sha256 => {}
                    Ok(_) => bad.push(format!("{}: hash mismatch", a.path)),
                    Err(_) => bad.push(format!("{}: missing", a.path)),
                }
            }
        }
        bad
    }
}
