//! Synthetic trimodal samples whose class is recoverable from every
//! modality: face mood, voice pitch and vocabulary.

use image::RgbImage;
use mseva_core::media::BBox;
use mseva_core::synth::{face_frame, voiced};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::SegmentInput;

const CLASS_WORDS: [[&str; 3]; 4] = [
    ["joy", "great", "smile"],
    ["tears", "loss", "grief"],
    ["rage", "furious", "shout"],
    ["report", "today", "weather"],
];
const FILLER: [&str; 5] = ["the", "we", "and", "news", "said"];

fn class_word(class: usize, j: usize) -> String {
    match CLASS_WORDS.get(class) {
        Some(words) => words[j % 3].to_string(),
        None => format!("word{class}x{j}"),
    }
}

/// One sample of `class` out of `num_classes`.
pub fn synthetic_sample(class: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> SegmentInput {
    let mood = 1.0 - 2.0 * class as f64 / (num_classes - 1).max(1) as f64;
    let crops: Vec<RgbImage> = (0..2)
        .map(|_| {
            let face = BBox {
                x: rng.random_range(4..9),
                y: rng.random_range(3..7),
                w: 34,
                h: 38,
            };
            face_frame(48, 48, face, mood)
        })
        .collect();
    let f0 = 110.0 + 70.0 * class as f64 + rng.random_range(-5.0..5.0);
    let audio = voiced(16_000, 1000, f0, rng.random_range(0.2..0.4));
    let mut words: Vec<String> = (0..3).map(|j| class_word(class, j + rng.random_range(0..3))).collect();
    words.insert(rng.random_range(0..=words.len()), FILLER[rng.random_range(0..FILLER.len())].to_string());
    SegmentInput {
        crops,
        audio,
        text: words.join(" "),
    }
}

/// `n` samples with labels cycling through the classes.
pub fn synthetic_trimodal_set(n: usize, num_classes: usize, seed: u64) -> Vec<(SegmentInput, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % num_classes;
            (synthetic_sample(class, num_classes, &mut rng), class)
        })
        .collect()
}
