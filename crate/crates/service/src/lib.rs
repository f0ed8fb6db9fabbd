//! Job-based analysis service: runs the Fig. 4 pipeline (normalize →
//! segment → transcribe → infer → aggregate) on uploaded videos and
//! persists the results for the HTTP API and the CLI.

pub mod config;
pub mod http;
pub mod manager;
pub mod multipart;
pub mod pipeline;
pub mod result;
pub mod store;

use thiserror::Error;

pub use config::AppConfig;
pub use manager::{Manager, StageHook};
pub use pipeline::{Engine, StageError};
pub use result::{AnalysisResult, ModalitiesView, TrackEntry, TrackPoint};
pub use store::{AnalysisJob, JobFailure, JobOptions, JobState, Store};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("upload of {size} bytes exceeds the {limit}-byte limit")]
    TooLarge { size: u64, limit: u64 },
    #[error("video is {duration_ms} ms long, limit is {limit_ms} ms (set allow_long to override)")]
    TooLong { duration_ms: u64, limit_ms: u64 },
    #[error("unreadable media: {0}")]
    UnreadableMedia(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job_id} is {state}, not done")]
    NotReady { job_id: String, state: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("model: {0}")]
    Model(#[from] mseva_model::ModelError),
    #[error("{0}")]
    Stage(#[from] StageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable name used in API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Config(_) => "Config",
            ServiceError::TooLarge { .. } => "TooLarge",
            ServiceError::TooLong { .. } => "TooLong",
            ServiceError::UnreadableMedia(_) => "UnreadableMedia",
            ServiceError::UnknownJob(_) => "UnknownJob",
            ServiceError::NotReady { .. } => "NotReady",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Corrupt(_) => "Corrupt",
            ServiceError::Model(_) => "Model",
            ServiceError::Stage(_) => "StageFailure",
            ServiceError::Io(_) => "Io",
        }
    }
}
