//! File-backed persistence: job records and content-addressed results as
//! JSON documents under the data directory.
//!
//! ```text
//! <data>/jobs/<job_id>.json       job record (rewritten on every transition)
//! <data>/uploads/<job_id>.<ext>   submitted bytes
//! <data>/results/<sha256>.json    immutable analysis results
//! <data>/work/<job_id>/           scratch space, discarded on recovery
//! ```
//! Every write goes to a temporary file first and is renamed into place,
//! so readers never observe a partial document.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::result::AnalysisResult;
use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Preprocessing,
    Segmenting,
    Transcribing,
    Inferring,
    Done,
    Failed,
}

impl JobState {
    pub const ORDER: [JobState; 6] = [
        JobState::Queued,
        JobState::Preprocessing,
        JobState::Segmenting,
        JobState::Transcribing,
        JobState::Inferring,
        JobState::Done,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Preprocessing => "preprocessing",
            JobState::Segmenting => "segmenting",
            JobState::Transcribing => "transcribing",
            JobState::Inferring => "inferring",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }

    /// Forward moves along the declared order, or to `failed` from any
    /// non-terminal state.
    pub fn can_move_to(self, next: JobState) -> bool {
        if self.is_terminal() {
            return false;
        }
        if next == JobState::Failed {
            return true;
        }
        let pos = |s| JobState::ORDER.iter().position(|&o| o == s);
        matches!((pos(self), pos(next)), (Some(a), Some(b)) if b > a)
    }
}

impl std::str::FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ORDER
            .iter()
            .chain([JobState::Failed].iter())
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobFailure {
    /// Stage that was running when the job failed.
    pub stage: JobState,
    /// Machine-readable error kind, e.g. `EmptyTrack`.
    pub kind: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JobOptions {
    pub language_hint: Option<String>,
    /// Lift the three-minute duration limit.
    pub allow_long: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisJob {
    pub job_id: String,
    pub asset_id: String,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub error: Option<JobFailure>,
    pub options: JobOptions,
    /// File name of the stored upload inside `uploads/`.
    pub upload: String,
    /// SHA-256 of the persisted result document, once done.
    pub result_ref: Option<String>,
    /// States entered during the current attempt, in order.
    pub history: Vec<JobState>,
    /// Number of times a worker picked the job up.
    pub attempts: u32,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, ServiceError> {
        for sub in ["jobs", "uploads", "results", "work"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Store { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn job_path(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    pub fn upload_path(&self, name: &str) -> PathBuf {
        self.root.join("uploads").join(name)
    }

    pub fn work_dir(&self, id: &str) -> PathBuf {
        self.root.join("work").join(id)
    }

    pub fn result_path(&self, digest: &str) -> PathBuf {
        self.root.join("results").join(format!("{digest}.json"))
    }

    pub fn save_job(&self, job: &AnalysisJob) -> Result<(), ServiceError> {
        let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
        atomic_write(&self.job_path(&job.job_id), &bytes)?;
        Ok(())
    }

    pub fn load_job(&self, id: &str) -> Result<AnalysisJob, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::UnknownJob(id.to_string()));
        }
        match std::fs::read(self.job_path(id)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt(format!("job {id}: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ServiceError::UnknownJob(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    /// All job records, oldest submission first.
    pub fn list_jobs(&self) -> Result<Vec<AnalysisJob>, ServiceError> {
        let mut jobs = Vec::new();
        for entry in std::fs::read_dir(self.root.join("jobs"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(&path)?;
                match serde_json::from_slice::<AnalysisJob>(&bytes) {
                    Ok(job) => jobs.push(job),
                    Err(e) => log::warn!("skipping unreadable job record {}: {e}", path.display()),
                }
            }
        }
        jobs.sort_by(|a, b| a.submitted_at.cmp(&b.submitted_at).then(a.job_id.cmp(&b.job_id)));
        Ok(jobs)
    }

    pub fn save_upload(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, ServiceError> {
        let path = self.upload_path(name);
        atomic_write(&path, bytes)?;
        Ok(path)
    }

    /// Persists `result` under its content hash and returns the hash.
    pub fn save_result(&self, result: &AnalysisResult) -> Result<String, ServiceError> {
        let bytes = result.to_json_bytes();
        let digest = hex::encode(Sha256::digest(&bytes));
        let path = self.result_path(&digest);
        if !path.exists() {
            atomic_write(&path, &bytes)?;
        }
        Ok(digest)
    }

    pub fn load_result(&self, digest: &str) -> Result<AnalysisResult, ServiceError> {
        let bytes = std::fs::read(self.result_path(digest))?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt(format!("result {digest}: {e}")))
    }

    pub fn clear_work_dir(&self, id: &str) -> Result<(), ServiceError> {
        match std::fs::remove_dir_all(self.work_dir(id)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}
