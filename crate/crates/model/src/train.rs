//! Training loop: batch size, gradient accumulation and Adam (§4.3).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Adam, AdamConfig};
use crate::tape::Mat;
use crate::{EmotionModel, ModelError, PreparedSegment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    /// Reshuffle the data every epoch (seeded from the model seed).
    pub shuffle: bool,
}

impl Default for Schedule {
    /// The paper's schedule: 30 epochs, batch size 1, accumulation 4.
    fn default() -> Self {
        Schedule {
            epochs: 30,
            batch: 1,
            grad_accum: 4,
            learning_rate: 1e-3,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: PreparedSegment,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fused-prediction accuracy observed during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub updates: usize,
    /// Loss of every step, measured before that step's update.
    pub step_losses: Vec<f64>,
    pub history: Vec<EpochStats>,
}

fn add_scaled(acc: &mut [Mat], grads: &[Mat], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data.iter_mut().zip(&g.data) {
            *x += scale * y;
        }
    }
}

/// Optimizes the model in place. A step is one batch; parameters are
/// updated every `grad_accum` steps with the mean gradient, and a final
/// partial accumulation is flushed, so `updates = ⌈steps / grad_accum⌉`.
pub fn train(model: &mut EmotionModel, data: &[TrainSample], schedule: &Schedule) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let k = model.config().num_classes;
    if let Some(s) = data.iter().find(|s| s.label >= k) {
        return Err(ModelError::LabelOutOfRange { label: s.label, classes: k });
    }
    if schedule.batch == 0 || schedule.grad_accum == 0 {
        return Err(ModelError::InvalidConfig("batch and grad_accum must be >= 1".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: schedule.learning_rate,
            ..Default::default()
        },
        model.params(),
    );
    let zero = |m: &EmotionModel| -> Vec<Mat> { m.params().iter().map(|(_, p)| Mat::zeros(p.rows, p.cols)).collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = zero(model);
    let mut pending = 0usize;
    let mut report = TrainReport {
        steps: 0,
        updates: 0,
        step_losses: Vec::new(),
        history: Vec::new(),
    };
    for epoch in 0..schedule.epochs {
        if schedule.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(schedule.batch) {
            let mut step_loss = 0.0;
            for &i in batch {
                let (loss, grads, pred) = model.loss_and_grads(&data[i].input, data[i].label);
                add_scaled(&mut acc, &grads, 1.0 / batch.len() as f64);
                step_loss += loss / batch.len() as f64;
                correct += usize::from(pred == data[i].label);
                loss_sum += loss;
            }
            report.step_losses.push(step_loss);
            report.steps += 1;
            pending += 1;
            if pending == schedule.grad_accum {
                flush(model, &mut opt, &mut acc, pending);
                report.updates += 1;
                pending = 0;
            }
        }
        report.history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    if pending > 0 {
        flush(model, &mut opt, &mut acc, pending);
        report.updates += 1;
    }
    Ok(report)
}

fn flush(model: &mut EmotionModel, opt: &mut Adam, acc: &mut [Mat], pending: usize) {
    for g in acc.iter_mut() {
        for x in &mut g.data {
            *x /= pending as f64;
        }
    }
    opt.step(model.params_mut(), acc);
    for g in acc.iter_mut() {
        g.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Fused-prediction accuracy of the model on `data`.
pub fn accuracy(model: &EmotionModel, data: &[TrainSample]) -> Result<f64, ModelError> {
    let mut correct = 0;
    for s in data {
        correct += usize::from(model.infer_prepared(&s.input)?.emotion_label == s.label);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
