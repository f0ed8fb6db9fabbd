//! Model hyper-parameters (the `[model]` config section).

use std::collections::BTreeMap;

use mseva_core::eval::Sentiment;
use serde::{Deserialize, Serialize};

use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Softmax over three learned scalars, initialised from `fusion_weights`.
    #[default]
    Learned,
    /// `fusion_weights` used as-is.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub polarity_map: BTreeMap<String, Sentiment>,
    pub visual_feature_dim: usize,
    pub acoustic_feature_dim: usize,
    pub text_feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub mel_bins: usize,
    pub mel_window_ms: u64,
    pub mel_hop_ms: u64,
    pub audio_patches: usize,
    /// Side of the square each spectrogram patch is average-pooled to
    /// before the patch embedding.
    pub patch_pool: usize,
    /// Channel widths of the three stride-2 blocks of the visual CNN.
    pub visual_channels: [usize; 3],
    /// Width of the token vectors produced by the text backend.
    pub text_embed_dim: usize,
    /// Longest sequence the positional embedding covers; longer visual
    /// sequences are subsampled evenly, longer texts truncated.
    pub max_positions: usize,
    pub head_hidden: usize,
    pub fusion_mode: FusionMode,
    /// `(w_v, w_a, w_t)`
    pub fusion_weights: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let class_names: Vec<String> = ["happy", "sad", "angry", "neutral"].iter().map(|s| s.to_string()).collect();
        let polarity_map = [
            ("happy", Sentiment::Positive),
            ("sad", Sentiment::Negative),
            ("angry", Sentiment::Negative),
            ("neutral", Sentiment::Positive),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        ModelConfig {
            num_classes: 4,
            class_names,
            polarity_map,
            visual_feature_dim: 32,
            acoustic_feature_dim: 32,
            text_feature_dim: 32,
            encoder_layers: 1,
            encoder_heads: 2,
            mel_bins: 64,
            mel_window_ms: 25,
            mel_hop_ms: 10,
            audio_patches: 16,
            patch_pool: 4,
            visual_channels: [8, 16, 16],
            text_embed_dim: 32,
            max_positions: 64,
            head_hidden: 32,
            fusion_mode: FusionMode::Learned,
            fusion_weights: [1.0 / 3.0; 3],
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Smallest sensible configuration (all dims ≤ 8, two classes); used by
    /// the gradient check.
    pub fn tiny() -> Self {
        ModelConfig {
            num_classes: 2,
            class_names: vec!["happy".into(), "sad".into()],
            polarity_map: [("happy".to_string(), Sentiment::Positive), ("sad".to_string(), Sentiment::Negative)]
                .into_iter()
                .collect(),
            visual_feature_dim: 4,
            acoustic_feature_dim: 4,
            text_feature_dim: 4,
            encoder_layers: 1,
            encoder_heads: 2,
            mel_bins: 8,
            audio_patches: 4,
            patch_pool: 2,
            visual_channels: [2, 3, 4],
            text_embed_dim: 6,
            max_positions: 8,
            head_hidden: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.class_names.len() != self.num_classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        for c in &self.class_names {
            if !self.polarity_map.contains_key(c) {
                return bad(format!("polarity_map has no entry for class {c:?}"));
            }
        }
        for (name, d) in [
            ("visual_feature_dim", self.visual_feature_dim),
            ("acoustic_feature_dim", self.acoustic_feature_dim),
            ("text_feature_dim", self.text_feature_dim),
        ] {
            if d == 0 || self.encoder_heads == 0 || d % self.encoder_heads != 0 {
                return bad(format!("{name}={d} must be a positive multiple of encoder_heads={}", self.encoder_heads));
            }
        }
        let positive = [
            ("mel_bins", self.mel_bins),
            ("audio_patches", self.audio_patches),
            ("patch_pool", self.patch_pool),
            ("text_embed_dim", self.text_embed_dim),
            ("max_positions", self.max_positions),
            ("head_hidden", self.head_hidden),
            ("mel_window_ms", self.mel_window_ms as usize),
            ("mel_hop_ms", self.mel_hop_ms as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.visual_channels.contains(&0) {
            return bad("visual_channels must be positive".into());
        }
        if self.max_positions < self.audio_patches {
            return bad("max_positions must cover audio_patches".into());
        }
        validate_fusion_weights(&self.fusion_weights)?;
        Ok(())
    }

    pub fn sentiment_of(&self, class: usize) -> Sentiment {
        self.polarity_map[&self.class_names[class]]
    }
}

pub fn validate_fusion_weights(w: &[f64; 3]) -> Result<(), ModelError> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(ModelError::WeightSumInvalid(*w));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            fusion_weights: [0.5, 0.5, 0.5],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::WeightSumInvalid(_))));
        let cfg = ModelConfig {
            text_feature_dim: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }
}
