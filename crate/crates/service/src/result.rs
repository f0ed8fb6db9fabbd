//! Analysis result documents and the views derived from them.

use mseva_core::eval::Sentiment;
use mseva_core::segmenter::UtteranceSegment;
use mseva_model::{FusedPrediction, ModalityPrediction};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub segment: UtteranceSegment,
    /// Face crops that fed the visual branch.
    pub face_count: usize,
    pub prediction: FusedPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub job_id: String,
    pub asset_id: String,
    pub duration_ms: u64,
    pub class_names: Vec<String>,
    /// `(w_v, w_a, w_t)` used for fusion.
    pub fusion_weights: [f64; 3],
    pub video_verdict: FusedPrediction,
    /// Ordered by `start_ms`.
    pub track: Vec<TrackEntry>,
    /// Duration-weighted per-modality aggregates (visual, acoustic, textual).
    pub per_modality_video: Vec<ModalityPrediction>,
}

impl AnalysisResult {
    /// Canonical serialization: pretty JSON with a trailing newline.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("result serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn track_points(&self) -> Vec<TrackPoint> {
        self.track
            .iter()
            .map(|e| TrackPoint {
                start_ms: e.segment.start_ms,
                end_ms: e.segment.end_ms,
                text: e.segment.text.clone(),
                logits: e.prediction.logits.clone(),
                probabilities: e.prediction.probabilities.clone(),
                label: e.prediction.emotion_label,
                emotion: e.prediction.emotion.clone(),
                sentiment: e.prediction.sentiment,
                positive_score: e.prediction.positive_score,
            })
            .collect()
    }

    pub fn modalities(&self) -> ModalitiesView {
        ModalitiesView {
            job_id: self.job_id.clone(),
            class_names: self.class_names.clone(),
            fusion_weights: self.fusion_weights,
            per_modality_video: self.per_modality_video.clone(),
            track: self
                .track
                .iter()
                .map(|e| SegmentModalities {
                    start_ms: e.segment.start_ms,
                    end_ms: e.segment.end_ms,
                    per_modality: e.prediction.per_modality.clone(),
                })
                .collect(),
        }
    }
}

/// One point of the emotion fluctuation graph (Fig. 8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub emotion: String,
    pub sentiment: Sentiment,
    pub positive_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentModalities {
    pub start_ms: u64,
    pub end_ms: u64,
    pub per_modality: Vec<ModalityPrediction>,
}

/// Per-modality breakdown (Fig. 9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitiesView {
    pub job_id: String,
    pub class_names: Vec<String>,
    pub fusion_weights: [f64; 3],
    pub per_modality_video: Vec<ModalityPrediction>,
    pub track: Vec<SegmentModalities>,
}
