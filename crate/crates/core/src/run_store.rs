//! Run directory layout and the manifest that tracks stage completion,
//! artifact digests, and the frozen config snapshot.
//!
//! Layout under the run root:
//! manifest.json, put.prompt, is.txt, rules.json, taskspec.txt,
//! specprompt.prompt, tests.jsonl, results.jsonl, evals.jsonl,
//! metrics.json, report/.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::prompt_store::content_digest;

pub const STAGES: [&str; 6] = ["extract", "generate", "run", "eval", "metrics", "report"];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run directory is locked by another process ({0})")]
    Locked(String),
    #[error("stage {stage} requires {missing}; run `{hint}` first")]
    StageDependencyMissing {
        stage: String,
        missing: String,
        hint: String,
    },
    #[error("manifest is malformed: {0}")]
    MalformedManifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    MalformedRecord {
        path: String,
        line: usize,
        detail: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    /// Artifact file name → content digest at the time the stage completed.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    /// Extra stage facts, e.g. `is_provenance: edited`.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// The reproducibility record for a run: config snapshot, template digests,
/// per-stage artifact digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub prompt_path: String,
    pub prompt_digest: String,
    pub config: serde_json::Value,
    pub template_digests: BTreeMap<String, String>,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(
        run_id: &str,
        prompt_path: &str,
        prompt_text: &str,
        config: serde_json::Value,
    ) -> Self {
        let template_digests = crate::prompt_store::templates::all()
            .into_iter()
            .map(|t| (t.id.clone(), t.digest()))
            .collect();
        RunManifest {
            run_id: run_id.to_string(),
            prompt_path: prompt_path.to_string(),
            prompt_digest: content_digest(prompt_text),
            config,
            template_digests,
            stages: BTreeMap::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }

    pub fn stage_completed(&self, name: &str) -> bool {
        self.stage(name).is_some_and(|s| s.completed)
    }

    /// Record a completed stage and invalidate everything downstream: once
    /// an upstream stage re-runs, later stages' digests no longer describe
    /// artifacts derived from the current inputs.
    pub fn complete_stage(&mut self, name: &str, record: StageRecord) {
        let position = STAGES.iter().position(|s| *s == name);
        self.stages.insert(name.to_string(), record);
        if let Some(pos) = position {
            for later in &STAGES[pos + 1..] {
                if let Some(stage) = self.stages.get_mut(*later) {
                    stage.completed = false;
                }
            }
        }
    }
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(StoreError::Io {
                path: root.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such run directory"),
            });
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The run id is the directory name unless the manifest overrides it.
    pub fn default_run_id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "run".to_string())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn put_prompt_path(&self) -> PathBuf {
        self.root.join("put.prompt")
    }
    pub fn is_path(&self) -> PathBuf {
        self.root.join("is.txt")
    }
    pub fn rules_path(&self) -> PathBuf {
        self.root.join("rules.json")
    }
    pub fn taskspec_path(&self) -> PathBuf {
        self.root.join("taskspec.txt")
    }
    pub fn specprompt_path(&self) -> PathBuf {
        self.root.join("specprompt.prompt")
    }
    pub fn tests_path(&self) -> PathBuf {
        self.root.join("tests.jsonl")
    }
    pub fn results_path(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
    pub fn evals_path(&self) -> PathBuf {
        self.root.join("evals.jsonl")
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn default_cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    /// Take the run-directory lock; released when the guard drops.
    pub fn lock(&self) -> Result<LockGuard, StoreError> {
        let path = self.root.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(StoreError::Locked(format!(
                    "{} (pid {})",
                    path.display(),
                    holder.trim()
                )))
            }
            Err(e) => Err(io_err(&path, e)),
        }
    }

    pub fn read_manifest(&self) -> Result<RunManifest, StoreError> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::MalformedManifest(e.to_string()))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        json.push('\n');
        self.write_text(&self.manifest_path(), &json)
    }

    pub fn write_text(&self, path: &Path, content: &str) -> Result<(), StoreError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(path, content).map_err(|e| io_err(path, e))
    }

    pub fn read_text(&self, path: &Path) -> Result<String, StoreError> {
        fs::read_to_string(path).map_err(|e| io_err(path, e))
    }

    /// Digest of an artifact file's current content.
    pub fn artifact_digest(&self, path: &Path) -> Result<String, StoreError> {
        Ok(content_digest(&self.read_text(path)?))
    }

    /// Fail unless `stage`'s prerequisite file exists.
    pub fn require_artifact(&self, stage: &str, path: &Path, hint: &str) -> Result<(), StoreError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(StoreError::StageDependencyMissing {
                stage: stage.to_string(),
                missing: path
                    .file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| path.display().to_string()),
                hint: hint.to_string(),
            })
        }
    }
}

/// RAII run-directory lock.
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Write records as JSON-lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Read JSON-lines records, with line numbers on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| StoreError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
