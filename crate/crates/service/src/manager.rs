//! Job lifecycle: submission, the worker pool, and crash recovery.
//!
//! Exactly one worker owns a job at a time (the queue hands out each id
//! once) and only that worker writes the job record. A job becomes `done`
//! only after its result document is on disk, so the job record is the
//! commit point: a crash at any earlier moment leaves the job non-terminal,
//! and [`Manager::start`] resets it to `queued` and discards its scratch
//! files and any result that no job references.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::Utc;
use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use crate::pipeline::{Engine, StageError};
use crate::result::AnalysisResult;
use crate::store::{AnalysisJob, JobFailure, JobOptions, JobState, Store};
use crate::ServiceError;

/// Called after a job's record has moved to a new stage, before the stage
/// runs. Used for progress reporting and fault injection.
pub type StageHook = Arc<dyn Fn(&AnalysisJob, JobState) + Send + Sync>;

pub struct Manager {
    store: Store,
    engine: Arc<Engine>,
    queue: Sender<String>,
    hook: Option<StageHook>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

fn extension_of(name: &str) -> String {
    Path::new(name)
        .extension()
        .and_then(|e| e.to_str())
        .filter(|e| !e.is_empty() && e.len() <= 8 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_else(|| "bin".into())
}

impl Manager {
    /// Opens the data directory, recovers interrupted jobs and starts
    /// `config.service.workers` worker threads.
    pub fn start(engine: Arc<Engine>, hook: Option<StageHook>) -> Result<Arc<Manager>, ServiceError> {
        let store = Store::open(&engine.config.service.data_dir)?;
        let (tx, rx) = unbounded();
        let manager = Arc::new(Manager {
            store,
            engine,
            queue: tx,
            hook,
            workers: Mutex::new(Vec::new()),
        });
        let pending = manager.recover()?;
        for n in 0..manager.engine.config.service.workers {
            let rx: Receiver<String> = rx.clone();
            let weak = Arc::downgrade(&manager);
            let handle = std::thread::Builder::new()
                .name(format!("mseva-worker-{n}"))
                .spawn(move || {
                    while let Ok(id) = rx.recv() {
                        let Some(m) = weak.upgrade() else { break };
                        m.process(&id);
                    }
                })?;
            manager.workers.lock().push(handle);
        }
        for id in pending {
            manager.queue.send(id).expect("queue receivers are alive");
        }
        Ok(manager)
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Resets non-terminal jobs to `queued` and returns them in submission
    /// order. Unreferenced result documents are removed.
    fn recover(&self) -> Result<Vec<String>, ServiceError> {
        let jobs = self.store.list_jobs()?;
        let mut pending = Vec::new();
        let mut referenced = HashSet::new();
        for mut job in jobs {
            if let Some(r) = &job.result_ref {
                referenced.insert(r.clone());
            }
            if job.state.is_terminal() {
                continue;
            }
            if job.state != JobState::Queued {
                log::warn!("job {} was interrupted during {}; re-queueing", job.job_id, job.state.as_str());
            }
            self.store.clear_work_dir(&job.job_id)?;
            job.state = JobState::Queued;
            job.history = vec![JobState::Queued];
            job.result_ref = None;
            self.store.save_job(&job)?;
            pending.push(job.job_id);
        }
        for entry in std::fs::read_dir(self.store.root().join("results"))? {
            let path = entry?.path();
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let is_result = path.extension().is_some_and(|e| e == "json");
            if !is_result || !referenced.contains(&stem) {
                log::warn!("removing orphaned result file {}", path.display());
                std::fs::remove_file(&path)?;
            }
        }
        Ok(pending)
    }

    /// Stores the upload, probes it, persists a queued job and enqueues it.
    pub fn submit_bytes(&self, file_name: &str, bytes: &[u8], options: JobOptions) -> Result<AnalysisJob, ServiceError> {
        let limit = self.engine.config.service.max_upload_bytes;
        if bytes.len() as u64 > limit {
            return Err(ServiceError::TooLarge {
                size: bytes.len() as u64,
                limit,
            });
        }
        if bytes.is_empty() {
            return Err(ServiceError::UnreadableMedia("empty upload".into()));
        }
        let job_id = uuid::Uuid::new_v4().simple().to_string();
        let upload = format!("{job_id}.{}", extension_of(file_name));
        let path = self.store.save_upload(&upload, bytes)?;
        let probe_dir = self.store.work_dir(&job_id).join("probe");
        let probed = self.engine.probe(&path, &probe_dir);
        self.store.clear_work_dir(&job_id)?;
        let discard = |e: ServiceError| {
            let _ = std::fs::remove_file(&path);
            Err(e)
        };
        let asset = match probed {
            Ok(a) => a,
            Err(e) => return discard(e),
        };
        let limit_ms = self.engine.config.service.max_duration_ms;
        if asset.duration_ms > limit_ms && !options.allow_long {
            return discard(ServiceError::TooLong {
                duration_ms: asset.duration_ms,
                limit_ms,
            });
        }
        let job = AnalysisJob {
            job_id: job_id.clone(),
            asset_id: asset.asset_id,
            state: JobState::Queued,
            submitted_at: Utc::now(),
            finished_at: None,
            error: None,
            options,
            upload,
            result_ref: None,
            history: vec![JobState::Queued],
            attempts: 0,
        };
        self.store.save_job(&job)?;
        self.queue.send(job_id).expect("queue receivers are alive");
        Ok(job)
    }

    pub fn submit_file(&self, path: &Path, options: JobOptions) -> Result<AnalysisJob, ServiceError> {
        let meta = std::fs::metadata(path)?;
        let limit = self.engine.config.service.max_upload_bytes;
        if meta.len() > limit {
            return Err(ServiceError::TooLarge { size: meta.len(), limit });
        }
        let bytes = std::fs::read(path)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("upload");
        self.submit_bytes(name, &bytes, options)
    }

    pub fn job(&self, id: &str) -> Result<AnalysisJob, ServiceError> {
        self.store.load_job(id)
    }

    pub fn jobs(&self) -> Result<Vec<AnalysisJob>, ServiceError> {
        self.store.list_jobs()
    }

    /// The persisted result, or `NotReady` while the job is not done.
    pub fn result(&self, id: &str) -> Result<AnalysisResult, ServiceError> {
        let job = self.store.load_job(id)?;
        match (&job.state, &job.result_ref) {
            (JobState::Done, Some(digest)) => self.store.load_result(digest),
            _ => Err(ServiceError::NotReady {
                job_id: job.job_id,
                state: job.state.as_str().to_string(),
            }),
        }
    }

    /// Polls until the job is terminal or `timeout` elapses.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<AnalysisJob, ServiceError> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.store.load_job(id)?;
            if job.state.is_terminal() || Instant::now() >= deadline {
                return Ok(job);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    fn transition(&self, job: &mut AnalysisJob, next: JobState) -> Result<(), ServiceError> {
        debug_assert!(job.state.can_move_to(next), "{:?} -> {:?}", job.state, next);
        job.state = next;
        job.history.push(next);
        if next.is_terminal() {
            job.finished_at = Some(Utc::now());
        }
        self.store.save_job(job)
    }

    fn process(&self, id: &str) {
        if let Err(e) = self.try_process(id) {
            log::error!("job {id}: {e}");
        }
    }

    fn try_process(&self, id: &str) -> Result<(), ServiceError> {
        let mut job = self.store.load_job(id)?;
        if job.state.is_terminal() {
            // At-most-once: a finished job is never processed again.
            return Ok(());
        }
        job.attempts += 1;
        self.store.save_job(&job)?;
        let work = self.store.work_dir(id);
        self.store.clear_work_dir(id)?;
        let source = self.store.upload_path(&job.upload);
        let options = job.options.clone();

        let mut io_error = None;
        let outcome = {
            let mut on_stage = |stage: JobState| -> Result<(), StageError> {
                if let Err(e) = self.transition(&mut job, stage) {
                    let err = StageError::new(stage, "Io", e.to_string());
                    io_error = Some(e);
                    return Err(err);
                }
                if let Some(hook) = &self.hook {
                    hook(&job, stage);
                }
                Ok(())
            };
            self.engine.run(id, &source, &work, &options, &mut on_stage)
        };
        if let Some(e) = io_error {
            return Err(e);
        }
        match outcome {
            Ok(result) => {
                let digest = self.store.save_result(&result)?;
                job.result_ref = Some(digest);
                self.transition(&mut job, JobState::Done)?;
            }
            Err(StageError { stage, kind, cause }) => {
                log::warn!("job {id} failed during {}: {kind}: {cause}", stage.as_str());
                job.error = Some(JobFailure { stage, kind, cause });
                self.transition(&mut job, JobState::Failed)?;
            }
        }
        self.store.clear_work_dir(id)?;
        Ok(())
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        // Workers hold only weak references; they exit once the queue
        // sender (owned by `self`) is gone.
        let handles = std::mem::take(&mut *self.workers.lock());
        let current = std::thread::current().id();
        let (tx, _) = unbounded();
        drop(std::mem::replace(&mut self.queue, tx));
        for h in handles {
            if h.thread().id() != current {
                let _ = h.join();
            }
        }
    }
}
