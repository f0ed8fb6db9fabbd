//! Prediction types, decision-level fusion and video-level aggregation.

use mseva_core::eval::Sentiment;
use serde::{Deserialize, Serialize};

use crate::config::{validate_fusion_weights, ModelConfig};
use crate::tape::softmax;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Textual];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityFeatures {
    pub modality: Modality,
    pub sequence: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl ModalityFeatures {
    pub fn dim(&self) -> usize {
        self.sequence.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dim();
        if self.sequence.is_empty()
            || self.sequence.len() != self.mask.len()
            || self.sequence.iter().any(|v| v.len() != d)
        {
            return Err(ModelError::ShapeMismatch(format!(
                "{:?}: {} vectors, {} mask flags",
                self.modality,
                self.sequence.len(),
                self.mask.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityPrediction {
    pub modality: Modality,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ModalityPrediction {
    pub fn from_logits(modality: Modality, logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        ModalityPrediction {
            modality,
            logits,
            probabilities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub emotion_label: usize,
    pub emotion: String,
    pub sentiment: Sentiment,
    /// Total probability of classes mapped to positive sentiment.
    pub positive_score: f64,
    pub per_modality: Vec<ModalityPrediction>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn finish(logits: Vec<f64>, per_modality: Vec<ModalityPrediction>, cfg: &ModelConfig) -> FusedPrediction {
    let probabilities = softmax(&logits);
    let label = argmax(&logits);
    let positive_score = probabilities
        .iter()
        .enumerate()
        .filter(|(k, _)| cfg.sentiment_of(*k) == Sentiment::Positive)
        .map(|(_, p)| p)
        .sum();
    FusedPrediction {
        emotion_label: label,
        emotion: cfg.class_names[label].clone(),
        sentiment: cfg.sentiment_of(label),
        positive_score,
        logits,
        probabilities,
        per_modality,
    }
}

/// `w_v·logits_v + w_a·logits_a + w_t·logits_t`.
pub fn fuse(preds: &[ModalityPrediction; 3], weights: [f64; 3], cfg: &ModelConfig) -> Result<FusedPrediction, ModelError> {
    validate_fusion_weights(&weights)?;
    let k = cfg.num_classes;
    if preds.iter().any(|p| p.logits.len() != k) {
        return Err(ModelError::ShapeMismatch(format!("expected {k} logits per modality")));
    }
    let logits = (0..k)
        .map(|c| weights[0] * preds[0].logits[c] + weights[1] * preds[1].logits[c] + weights[2] * preds[2].logits[c])
        .collect();
    Ok(finish(logits, preds.to_vec(), cfg))
}

/// Duration-weighted mean of `vectors`, summed in a canonical order so the
/// result does not depend on the order of the inputs.
fn weighted_mean(vectors: &[&[f64]], durations_ms: &[u64]) -> Vec<f64> {
    let total: u64 = durations_ms.iter().sum();
    let weights: Vec<f64> = if total == 0 {
        vec![1.0 / vectors.len() as f64; vectors.len()]
    } else {
        durations_ms.iter().map(|&d| d as f64 / total as f64).collect()
    };
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let key = |i: usize| (durations_ms[i], vectors[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    order.sort_by_key(|&i| key(i));
    let k = vectors[0].len();
    (0..k)
        .map(|c| order.iter().fold(0.0, |acc, &i| acc + weights[i] * vectors[i][c]))
        .collect()
}

/// Video-level verdict: duration-weighted mean of segment logits (fused
/// and per modality).
pub fn aggregate_video(preds: &[FusedPrediction], durations_ms: &[u64], cfg: &ModelConfig) -> Result<FusedPrediction, ModelError> {
    if preds.is_empty() {
        return Err(ModelError::EmptyTrack);
    }
    if preds.len() != durations_ms.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} predictions, {} durations",
            preds.len(),
            durations_ms.len()
        )));
    }
    let fused: Vec<&[f64]> = preds.iter().map(|p| p.logits.as_slice()).collect();
    let logits = weighted_mean(&fused, durations_ms);
    let per_modality = Modality::ALL
        .iter()
        .enumerate()
        .map(|(m, &modality)| {
            let vs: Vec<&[f64]> = preds.iter().map(|p| p.per_modality[m].logits.as_slice()).collect();
            ModalityPrediction::from_logits(modality, weighted_mean(&vs, durations_ms))
        })
        .collect();
    Ok(finish(logits, per_modality, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds(v: [f64; 4], a: [f64; 4], t: [f64; 4]) -> [ModalityPrediction; 3] {
        [
            ModalityPrediction::from_logits(Modality::Visual, v.to_vec()),
            ModalityPrediction::from_logits(Modality::Acoustic, a.to_vec()),
            ModalityPrediction::from_logits(Modality::Textual, t.to_vec()),
        ]
    }

    #[test]
    fn projection_weights_select_one_modality() {
        let cfg = ModelConfig::default();
        let p = preds([0.3, -1.2, 2.5, 0.1], [1.0; 4], [9.0, 0.0, 0.0, 0.0]);
        let f = fuse(&p, [1.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(f.logits, p[0].logits);
        assert_eq!(f.emotion_label, 2);
        assert_eq!(f.emotion, "angry");
        assert_eq!(f.sentiment, Sentiment::Negative);
    }

    #[test]
    fn equal_weights_pick_the_majority_class() {
        let cfg = ModelConfig::default();
        let third = 1.0 / 3.0;
        let p = preds([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]);
        let f = fuse(&p, [third, third, 1.0 - 2.0 * third], &cfg).unwrap();
        assert_eq!(f.emotion_label, 1);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let cfg = ModelConfig::default();
        let p = preds([0.0; 4], [0.0; 4], [0.0; 4]);
        for w in [[0.5, 0.5, 0.5], [f64::NAN, 0.5, 0.5], [1.5, -0.5, 0.0]] {
            assert!(matches!(fuse(&p, w, &cfg), Err(ModelError::WeightSumInvalid(_))));
        }
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn fusion_matches_brute_force_on_random_triples() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let mut r = || -> [f64; 4] { std::array::from_fn(|_| rng.random_range(-10.0..10.0)) };
            let p = preds(r(), r(), r());
            let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let s: f64 = raw.iter().sum();
            let w = [raw[0] / s, raw[1] / s, 1.0 - raw[0] / s - raw[1] / s];
            let Ok(f) = fuse(&p, w, &cfg) else { continue };
            for c in 0..4 {
                let mut brute = 0.0;
                for m in 0..3 {
                    brute += w[m] * p[m].logits[c];
                }
                assert!((f.logits[c] - brute).abs() <= 1e-12);
            }
            assert!((f.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn fused(logits: [f64; 4], cfg: &ModelConfig) -> FusedPrediction {
        let p = preds(logits, logits, logits);
        fuse(&p, [1.0, 0.0, 0.0], cfg).unwrap()
    }

    #[test]
    fn aggregation_cases() {
        let cfg = ModelConfig::default();
        let one = fused([0.1, 0.7, -0.3, 0.2], &cfg);
        assert_eq!(aggregate_video(std::slice::from_ref(&one), &[1500], &cfg).unwrap(), one);
        // Equal durations, opposite dominant classes, asymmetric magnitudes:
        // mean = (1.5, 1.0, 0, 0) → class 0.
        let a = fused([3.0, 0.0, 0.0, 0.0], &cfg);
        let b = fused([0.0, 2.0, 0.0, 0.0], &cfg);
        let v = aggregate_video(&[a.clone(), b.clone()], &[1000, 1000], &cfg).unwrap();
        assert_eq!(v.logits, vec![1.5, 1.0, 0.0, 0.0]);
        assert_eq!(v.emotion_label, 0);
        assert!(matches!(aggregate_video(&[], &[], &cfg), Err(ModelError::EmptyTrack)));
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_constant_shift(
            l in proptest::collection::vec(-5.0f64..5.0, 12), c in -100.0f64..100.0, w0 in 0.0f64..1.0
        ) {
            let cfg = ModelConfig::default();
            let w = [w0 / 2.0, w0 / 2.0, 1.0 - w0];
            let arr = |o: usize| -> [f64; 4] { std::array::from_fn(|i| l[o + i]) };
            let shifted = |o: usize| -> [f64; 4] { std::array::from_fn(|i| l[o + i] + c) };
            let a = fuse(&preds(arr(0), arr(4), arr(8)), w, &cfg).unwrap();
            let b = fuse(&preds(shifted(0), shifted(4), shifted(8)), w, &cfg).unwrap();
            // Shifting changes each fused logit by c (up to rounding); the
            // label survives unless two classes are within rounding.
            let mut sorted = a.logits.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(a.emotion_label, b.emotion_label);
        }

        #[test]
        fn aggregation_is_order_independent(
            segs in proptest::collection::vec((proptest::array::uniform4(-3.0f64..3.0), 1u64..5000), 1..8),
            seed in any::<u64>()
        ) {
            let cfg = ModelConfig::default();
            let preds: Vec<_> = segs.iter().map(|(l, _)| fused(*l, &cfg)).collect();
            let durs: Vec<u64> = segs.iter().map(|s| s.1).collect();
            let base = aggregate_video(&preds, &durs, &cfg).unwrap();
            let mut order: Vec<usize> = (0..preds.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
            let d2: Vec<_> = order.iter().map(|&i| durs[i]).collect();
            prop_assert_eq!(aggregate_video(&p2, &d2, &cfg).unwrap(), base);
        }
    }
}
