//! The application config file: TOML with `[media]`, `[segmenter]`,
//! `[asr]`, `[model]` and `[service]` sections. Every key is optional.

use std::path::{Path, PathBuf};

use mseva_core::media::{default_resolution_rules, validate_rules, DetectorKind, ResolutionRule, TRANSCODER_ENV};
use mseva_core::segmenter::SilenceProfile;
use mseva_core::transcriber::{AsrTask, ASR_MODEL_ENV};
use mseva_model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const DATA_DIR_ENV: &str = "MSEVA_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MediaSection {
    pub resolution_rules: Vec<ResolutionRule>,
    /// Face sampling interval over the whole video. The paper's "800 frames
    /// per second" is not taken literally.
    pub frame_interval_ms: u64,
    pub detector: DetectorKind,
    pub detector_command: Option<PathBuf>,
    /// Degrade to the center-crop stub when the detector cannot load.
    pub detector_fallback: bool,
    /// Overrides `MSEVA_TRANSCODER`.
    pub transcoder: Option<PathBuf>,
}

impl Default for MediaSection {
    fn default() -> Self {
        MediaSection {
            resolution_rules: default_resolution_rules(),
            frame_interval_ms: 200,
            detector: DetectorKind::Blob,
            detector_command: None,
            detector_fallback: true,
            transcoder: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AsrBackendKind {
    /// Deterministic stub (transcript = clip duration).
    #[default]
    Echo,
    /// External recognizer binary.
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrSection {
    pub backend: AsrBackendKind,
    pub command: Option<PathBuf>,
    /// Weights path; overrides `MSEVA_ASR_MODEL`.
    pub model: Option<PathBuf>,
    /// Fixed task; by default translate unless the language hint is English.
    pub task: Option<AsrTask>,
    pub max_workers: usize,
}

impl Default for AsrSection {
    fn default() -> Self {
        AsrSection {
            backend: AsrBackendKind::Echo,
            command: None,
            model: None,
            task: None,
            max_workers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelSection {
    /// Trained checkpoint; without one the seed-initialised model runs with
    /// the configured fusion weights.
    pub checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    pub params: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    /// Overridden by `MSEVA_DATA_DIR`.
    pub data_dir: PathBuf,
    pub workers: usize,
    pub max_upload_bytes: u64,
    /// §3.1: "the duration is less than three minutes".
    pub max_duration_ms: u64,
    pub host: String,
    pub port: u16,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            data_dir: PathBuf::from("mseva-data"),
            workers: 1,
            max_upload_bytes: 512 * 1024 * 1024,
            max_duration_ms: 180_000,
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub media: MediaSection,
    pub segmenter: SilenceProfile,
    pub asr: AsrSection,
    pub model: ModelSection,
    pub service: ServiceSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                AppConfig::from_toml(&text)?
            }
            None => AppConfig::default(),
        };
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            self.service.data_dir = PathBuf::from(dir);
        }
        if self.media.transcoder.is_none() {
            self.media.transcoder = std::env::var_os(TRANSCODER_ENV).map(PathBuf::from);
        }
        if self.asr.model.is_none() {
            self.asr.model = std::env::var_os(ASR_MODEL_ENV).map(PathBuf::from);
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        validate_rules(&self.media.resolution_rules).map_err(|e| ServiceError::Config(e.to_string()))?;
        self.segmenter.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.model.params.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        if self.media.frame_interval_ms == 0 {
            return Err(ServiceError::Config("media.frame_interval_ms must be > 0".into()));
        }
        if self.service.workers == 0 {
            return Err(ServiceError::Config("service.workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = AppConfig::from_toml(
            r#"
            [media]
            frame_interval_ms = 500
            detector = "center"
            [[media.resolution_rules]]
            src_w = [1000, 2000]
            src_h = [500, 900]
            dst_w = 200
            dst_h = 100

            [segmenter]
            min_silence_ms = 600
            silence_floor_db = -45.0

            [asr]
            task = "recognize"

            [model]
            encoder_layers = 2
            fusion_mode = "fixed"
            fusion_weights = [0.2, 0.3, 0.5]

            [service]
            port = 9000
            max_duration_ms = 600000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.media.resolution_rules.len(), 1);
        assert_eq!(cfg.media.detector, DetectorKind::Center);
        assert_eq!(cfg.segmenter.min_silence_ms, 600);
        assert_eq!(cfg.segmenter.window_ms, 10);
        assert_eq!(cfg.asr.task, Some(AsrTask::Recognize));
        assert_eq!(cfg.model.params.encoder_layers, 2);
        assert_eq!(cfg.model.params.fusion_weights, [0.2, 0.3, 0.5]);
        assert_eq!(cfg.model.params.mel_bins, 64);
        assert_eq!(cfg.service.port, 9000);
    }

    #[test]
    fn invalid_sections_are_rejected() {
        assert!(AppConfig::from_toml("[model]\nfusion_weights = [1.0, 1.0, 1.0]").is_err());
        assert!(AppConfig::from_toml("[segmenter]\nwindow_ms = 0").is_err());
        let overlapping = r#"
            [[media.resolution_rules]]
            src_w = [100, 200]
            src_h = [100, 200]
            dst_w = 50
            dst_h = 50
            [[media.resolution_rules]]
            src_w = [150, 250]
            src_h = [150, 250]
            dst_w = 60
            dst_h = 60
        "#;
        assert!(AppConfig::from_toml(overlapping).is_err());
    }
}
