//! The analysis pipeline proper, independent of job bookkeeping.

use std::path::Path;

use mseva_core::media::{
    build_detector, detect_faces, extract_frames, normalize_container, FaceDetector, FramePolicy, MediaAsset,
    MediaError, Transcoder,
};
use mseva_core::segmenter::{cut_audio, segment_audio};
use mseva_core::transcriber::{transcribe_segments, write_transcript, AsrBackend, AsrTask, CommandAsr, EchoStub};
use mseva_model::{aggregate_video, checkpoint, EmotionModel, HashingTextBackend, SegmentInput, TextBackend};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{AppConfig, AsrBackendKind};
use crate::result::{AnalysisResult, TrackEntry};
use crate::store::{JobOptions, JobState};
use crate::ServiceError;

/// A stage failure: which stage, a machine-readable kind and the cause.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage:?} failed ({kind}): {cause}")]
pub struct StageError {
    pub stage: JobState,
    pub kind: String,
    pub cause: String,
}

impl StageError {
    pub fn new(stage: JobState, kind: impl Into<String>, cause: impl Into<String>) -> Self {
        StageError {
            stage,
            kind: kind.into(),
            cause: cause.into(),
        }
    }

    /// Uses the error's variant name as the kind.
    fn from_err<E: std::fmt::Debug + std::fmt::Display>(stage: JobState, e: E) -> Self {
        let dbg = format!("{e:?}");
        let kind = dbg
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .next()
            .filter(|k| !k.is_empty())
            .unwrap_or("Error")
            .to_string();
        StageError::new(stage, kind, e.to_string())
    }
}

/// Everything needed to run the pipeline; shared read-only by workers.
pub struct Engine {
    pub config: AppConfig,
    pub model: EmotionModel,
    pub text: HashingTextBackend,
    pub asr: Box<dyn AsrBackend>,
    pub detector: Box<dyn FaceDetector>,
    pub transcoder: Transcoder,
}

impl Engine {
    pub fn from_config(config: &AppConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let model = match &config.model.checkpoint {
            Some(path) => checkpoint::load(path)?,
            None => EmotionModel::new(config.model.params.clone())?,
        };
        let asr: Box<dyn AsrBackend> = match config.asr.backend {
            AsrBackendKind::Echo => Box::new(EchoStub),
            AsrBackendKind::Command => {
                let program = config
                    .asr
                    .command
                    .clone()
                    .ok_or_else(|| ServiceError::Config("asr.backend = \"command\" needs asr.command".into()))?;
                Box::new(
                    CommandAsr::new(program, config.asr.model.clone(), config.asr.max_workers)
                        .map_err(|e| ServiceError::Config(e.to_string()))?,
                )
            }
        };
        let detector = build_detector(
            &config.media.detector,
            config.media.detector_command.as_deref(),
            config.media.detector_fallback,
        )
        .map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(Engine {
            text: model.default_text_backend(),
            model,
            asr,
            detector,
            transcoder: Transcoder {
                program: config.media.transcoder.clone(),
            },
            config: config.clone(),
        })
    }

    /// Normalizes `source` into `work_dir`; used to fail fast at submission.
    pub fn probe(&self, source: &Path, work_dir: &Path) -> Result<MediaAsset, ServiceError> {
        normalize_container(source, work_dir, &self.transcoder, None).map_err(|e| match e {
            MediaError::Io(e) => ServiceError::Io(e),
            other => ServiceError::UnreadableMedia(other.to_string()),
        })
    }

    /// Runs every stage on `source`. `on_stage` is called as each stage
    /// begins and may abort the run.
    pub fn run(
        &self,
        job_id: &str,
        source: &Path,
        work_dir: &Path,
        options: &JobOptions,
        on_stage: &mut dyn FnMut(JobState) -> Result<(), StageError>,
    ) -> Result<AnalysisResult, StageError> {
        use JobState::*;

        on_stage(Preprocessing)?;
        let asset = normalize_container(source, work_dir, &self.transcoder, options.language_hint.clone())
            .map_err(|e| StageError::from_err(Preprocessing, e))?;
        let audio = asset.load_audio().map_err(|e| StageError::from_err(Preprocessing, e))?;

        on_stage(Segmenting)?;
        let segments = segment_audio(&audio, &self.config.segmenter).map_err(|e| StageError::from_err(Segmenting, e))?;
        if segments.is_empty() {
            return Err(StageError::new(
                Segmenting,
                "EmptyTrack",
                "no utterance found: the audio track is silent",
            ));
        }

        on_stage(Transcribing)?;
        let clips = cut_audio(&audio, &segments).map_err(|e| StageError::from_err(Transcribing, e))?;
        let hint = asset.language_hint.as_deref();
        let task = self.config.asr.task.unwrap_or_else(|| AsrTask::default_for(hint));
        let transcript = transcribe_segments(
            &asset.asset_id,
            &clips,
            &segments,
            self.asr.as_ref(),
            task,
            hint,
            self.config.asr.max_workers,
        )
        .map_err(|e| StageError::from_err(Transcribing, e))?;
        write_transcript(&transcript, &work_dir.join("transcript.jsonl"))
            .map_err(|e| StageError::from_err(Transcribing, e))?;

        on_stage(Inferring)?;
        let frames = extract_frames(
            &asset,
            FramePolicy::IntervalMs(self.config.media.frame_interval_ms),
            &self.config.media.resolution_rules,
        )
        .map_err(|e| StageError::from_err(Inferring, e))?;
        let faces = detect_faces(&frames, self.detector.as_ref()).map_err(|e| StageError::from_err(Inferring, e))?;
        let mut track = Vec::with_capacity(transcript.segments.len());
        for (segment, clip) in transcript.segments.into_iter().zip(&clips) {
            let crops: Vec<_> = faces
                .iter()
                .filter(|f| (segment.start_ms..segment.end_ms).contains(&f.frame_timestamp_ms))
                .map(|f| f.crop.clone())
                .collect();
            let input = SegmentInput {
                crops,
                audio: clip.to_f32(),
                text: segment.text.clone(),
            };
            let prediction = self
                .model
                .infer_segment(&input, &self.text as &dyn TextBackend)
                .map_err(|e| StageError::from_err(Inferring, e))?;
            track.push(TrackEntry {
                face_count: input.crops.len(),
                segment,
                prediction,
            });
        }
        let preds: Vec<_> = track.iter().map(|e| e.prediction.clone()).collect();
        let durations: Vec<u64> = track.iter().map(|e| e.segment.duration_ms()).collect();
        let verdict = aggregate_video(&preds, &durations, self.model.config())
            .map_err(|e| StageError::from_err(Inferring, e))?;
        Ok(AnalysisResult {
            job_id: job_id.to_string(),
            asset_id: asset.asset_id,
            duration_ms: asset.duration_ms,
            class_names: self.model.config().class_names.clone(),
            fusion_weights: self.model.fusion_weights(),
            per_modality_video: verdict.per_modality.clone(),
            video_verdict: verdict,
            track,
        })
    }
}
