//! V2EM-style trimodal emotion model at desk scale: visual (face crops),
//! acoustic (log-mel patches) and textual (token embeddings) branches, each
//! with a positional self-attention encoder and a prediction head, combined
//! by linear decision-level fusion.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod fixtures;
pub mod mel;
pub mod network;
pub mod params;
pub mod predict;
pub mod tape;
pub mod text;
pub mod train;

use image::RgbImage;
use mseva_core::eval::{Sentiment, SentimentPredictor};
use thiserror::Error;

pub use config::{FusionMode, ModelConfig};
pub use network::PreparedSegment;
pub use predict::{aggregate_video, argmax, fuse, FusedPrediction, Modality, ModalityFeatures, ModalityPrediction};
pub use text::{HashingTextBackend, TextBackend};
pub use train::{train, Schedule, TrainReport, TrainSample};

use mel::{MelParams, PatchGrid};
use network::{Encoded, Network, CROP_SIDE};
use params::ParamStore;
use tape::{Mat, Tape};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("fusion weights must be finite, non-negative and sum to 1, got {0:?}")]
    WeightSumInvalid([f64; 3]),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("clip of {samples} samples is shorter than one mel window ({needed})")]
    ClipTooShort { samples: usize, needed: usize },
    #[error("text backend failed: {0}")]
    BackendFailure(String),
    #[error("no segment predictions to aggregate")]
    EmptyTrack,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw inputs of one utterance segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    /// 48×48 face crops in time order (possibly none).
    pub crops: Vec<RgbImage>,
    /// Mono 16 kHz samples in `[-1, 1]`.
    pub audio: Vec<f32>,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct EmotionModel {
    cfg: ModelConfig,
    net: Network,
    params: ParamStore,
}

impl EmotionModel {
    /// Freshly initialised model (deterministic in `cfg.seed`).
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (net, params) = Network::build(&cfg);
        Ok(EmotionModel { cfg, net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn default_text_backend(&self) -> HashingTextBackend {
        HashingTextBackend::new(self.cfg.text_embed_dim)
    }

    fn mel_params(&self) -> MelParams {
        MelParams::new(self.cfg.mel_bins, self.cfg.mel_window_ms, self.cfg.mel_hop_ms)
    }

    fn prepare_pixels(&self, crops: &[RgbImage]) -> Result<Option<Mat>, ModelError> {
        if crops.is_empty() {
            return Ok(None);
        }
        // Keep at most `max_positions` crops, evenly spaced.
        let keep = crops.len().min(self.cfg.max_positions);
        let mut data = Vec::with_capacity(keep * CROP_SIDE * CROP_SIDE * 3);
        for i in 0..keep {
            let crop = &crops[i * crops.len() / keep];
            if crop.dimensions() != (CROP_SIDE as u32, CROP_SIDE as u32) {
                return Err(ModelError::ShapeMismatch(format!(
                    "face crop is {:?}, expected 48x48",
                    crop.dimensions()
                )));
            }
            data.extend(crop.pixels().flat_map(|p| p.0.map(|c| c as f64 / 255.0 - 0.5)));
        }
        Ok(Some(Mat::from_vec(keep * CROP_SIDE * CROP_SIDE, 3, data)))
    }

    /// Pooled spectrogram patches, `audio_patches × patch_pool²`.
    pub fn prepare_patches(&self, audio: &[f32]) -> Result<(Mat, (usize, usize)), ModelError> {
        let spec = mel::log_mel(audio, &self.mel_params())?;
        let grid = PatchGrid::new(self.cfg.audio_patches, spec.rows, spec.cols);
        let rows: Vec<Vec<f64>> = mel::tile(&spec, &grid)
            .iter()
            .map(|p| mel::pool_patch(p, self.cfg.patch_pool))
            .collect();
        Ok((Mat::from_rows(&rows), (grid.rows, grid.cols)))
    }

    fn prepare_tokens(&self, text: &str, backend: &dyn TextBackend) -> Result<Option<Mat>, ModelError> {
        if backend.dim() != self.cfg.text_embed_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "text backend {} produces {}-d vectors, model expects {}",
                backend.name(),
                backend.dim(),
                self.cfg.text_embed_dim
            )));
        }
        let mut tokens = backend.embed(text).map_err(ModelError::BackendFailure)?;
        tokens.truncate(self.cfg.max_positions);
        if tokens.iter().any(|v| v.len() != self.cfg.text_embed_dim) {
            return Err(ModelError::BackendFailure("token vector of wrong width".into()));
        }
        Ok((!tokens.is_empty()).then(|| Mat::from_rows(&tokens)))
    }

    /// Converts raw inputs into network matrices. A clip shorter than one
    /// mel window becomes an acoustic null token.
    pub fn prepare(&self, input: &SegmentInput, backend: &dyn TextBackend) -> Result<PreparedSegment, ModelError> {
        let pixels = self.prepare_pixels(&input.crops)?;
        let (patches, grid) = match self.prepare_patches(&input.audio) {
            Ok((p, g)) => (Some(p), g),
            Err(ModelError::ClipTooShort { .. }) => (None, (0, 0)),
            Err(e) => return Err(e),
        };
        Ok(PreparedSegment {
            crops: pixels.as_ref().map_or(0, |p| p.rows / (CROP_SIDE * CROP_SIDE)),
            pixels,
            patches,
            grid,
            tokens: self.prepare_tokens(&input.text, backend)?,
        })
    }

    fn features(&self, t: &Tape, modality: Modality, e: &Encoded) -> ModalityFeatures {
        ModalityFeatures {
            modality,
            sequence: t.value(e.sequence).to_rows(),
            mask: e.mask.clone(),
        }
    }

    fn empty_prepared() -> PreparedSegment {
        PreparedSegment {
            pixels: None,
            crops: 0,
            patches: None,
            grid: (0, 0),
            tokens: None,
        }
    }

    /// One feature vector per crop after temporal encoding; no crops gives
    /// the null token with mask `[false]`.
    pub fn encode_visual(&self, crops: &[RgbImage]) -> Result<ModalityFeatures, ModelError> {
        let x = PreparedSegment {
            pixels: self.prepare_pixels(crops)?,
            crops: crops.len().min(self.cfg.max_positions),
            ..Self::empty_prepared()
        };
        let mut t = Tape::new();
        let e = self.net.encode_visual(&mut t, &self.params, &x);
        Ok(self.features(&t, Modality::Visual, &e))
    }

    /// Sequence of `audio_patches` vectors for a 16 kHz clip.
    pub fn encode_acoustic(&self, clip: &[f32]) -> Result<ModalityFeatures, ModelError> {
        let (patches, grid) = self.prepare_patches(clip)?;
        let x = PreparedSegment {
            patches: Some(patches),
            grid,
            ..Self::empty_prepared()
        };
        let mut t = Tape::new();
        let e = self.net.encode_acoustic(&mut t, &self.params, &x);
        Ok(self.features(&t, Modality::Acoustic, &e))
    }

    pub fn encode_text(&self, text: &str, backend: &dyn TextBackend) -> Result<ModalityFeatures, ModelError> {
        let x = PreparedSegment {
            tokens: self.prepare_tokens(text, backend)?,
            ..Self::empty_prepared()
        };
        let mut t = Tape::new();
        let e = self.net.encode_text(&mut t, &self.params, &x);
        Ok(self.features(&t, Modality::Textual, &e))
    }

    /// Masked mean pooling, feed-forward head, softmax.
    pub fn predict_modality(&self, features: &ModalityFeatures) -> Result<ModalityPrediction, ModelError> {
        features.validate()?;
        let expected = match features.modality {
            Modality::Visual => self.cfg.visual_feature_dim,
            Modality::Acoustic => self.cfg.acoustic_feature_dim,
            Modality::Textual => self.cfg.text_feature_dim,
        };
        if features.dim() != expected {
            return Err(ModelError::ShapeMismatch(format!(
                "{:?} features are {}-d, expected {expected}",
                features.modality,
                features.dim()
            )));
        }
        let mut t = Tape::new();
        let e = Encoded {
            sequence: t.constant(Mat::from_rows(&features.sequence)),
            mask: features.mask.clone(),
        };
        let logits = self.net.head(&mut t, &self.params, features.modality.index(), &e);
        Ok(ModalityPrediction::from_logits(features.modality, t.value(logits).data.clone()))
    }

    /// The fusion weights in effect (learned softmax or fixed).
    pub fn fusion_weights(&self) -> [f64; 3] {
        let mut t = Tape::new();
        let w = self.net.fusion_weights(&mut t, &self.params);
        let d = &t.value(w).data;
        [d[0], d[1], d[2]]
    }

    pub fn infer_prepared(&self, x: &PreparedSegment) -> Result<FusedPrediction, ModelError> {
        let mut t = Tape::new();
        let out = self.net.forward(&mut t, &self.params, x);
        let preds: [ModalityPrediction; 3] = std::array::from_fn(|m| {
            ModalityPrediction::from_logits(Modality::ALL[m], t.value(out.logits[m]).data.clone())
        });
        fuse(&preds, self.fusion_weights(), &self.cfg)
    }

    /// Encoders, heads and fusion for one segment. Missing faces or text
    /// become null tokens, never errors.
    pub fn infer_segment(&self, input: &SegmentInput, backend: &dyn TextBackend) -> Result<FusedPrediction, ModelError> {
        self.infer_prepared(&self.prepare(input, backend)?)
    }

    /// Total loss (fused plus auxiliary) and its parameter gradients.
    pub fn loss_and_grads(&self, x: &PreparedSegment, label: usize) -> (f64, Vec<Mat>, usize) {
        let mut t = Tape::new();
        let (loss, out) = self.net.loss(&mut t, &self.params, x, label);
        let grads = t.backward(loss, &self.params);
        (t.value(loss).data[0], grads, argmax(&t.value(out.fused).data))
    }

    /// Total loss only.
    pub fn loss(&self, x: &PreparedSegment, label: usize) -> f64 {
        let mut t = Tape::new();
        let (loss, _) = self.net.loss(&mut t, &self.params, x, label);
        t.value(loss).data[0]
    }
}

/// Model used by the text-source ablation: visual/acoustic inputs fixed,
/// the text swapped per experiment.
pub struct AblationModel<'a> {
    pub model: &'a EmotionModel,
    pub backend: &'a dyn TextBackend,
}

impl SentimentPredictor<SegmentInput> for AblationModel<'_> {
    fn predict(&self, inputs: &SegmentInput, text: &str) -> Result<(Sentiment, f64), String> {
        let input = SegmentInput {
            text: text.to_string(),
            ..inputs.clone()
        };
        let p = self.model.infer_segment(&input, self.backend).map_err(|e| e.to_string())?;
        Ok((p.sentiment, p.positive_score))
    }
}
