//! Deterministic synthetic media used by fixtures, demos and tests.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationRecord, SentimentVote, VideoMetadata};
use crate::audio::PcmAudio;
use crate::avi::{write_avi, AviError};
use crate::media::BBox;

const BACKGROUND: Rgb<u8> = Rgb([18, 22, 30]);
const SKIN: Rgb<u8> = Rgb([226, 196, 172]);
const FEATURE: Rgb<u8> = Rgb([60, 40, 40]);

/// A dark frame with one bright elliptical face filling `face`. `mood` in
/// `[-1, 1]` bends the mouth (negative frowns, positive smiles).
pub fn face_frame(width: u32, height: u32, face: BBox, mood: f64) -> RgbImage {
    let cx = face.x as f64 + face.w as f64 / 2.0;
    let cy = face.y as f64 + face.h as f64 / 2.0;
    let rx = face.w as f64 / 2.0;
    let ry = face.h as f64 / 2.0;
    RgbImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5 - cx) / rx;
        let v = (y as f64 + 0.5 - cy) / ry;
        if u * u + v * v > 1.0 {
            return BACKGROUND;
        }
        let eye = |ex: f64| ((u - ex) / 0.16).powi(2) + ((v + 0.3) / 0.1).powi(2) <= 1.0;
        let mouth_v = 0.45 - mood * 0.15 * (1.0 - (u / 0.4).powi(2));
        let mouth = u.abs() <= 0.4 && (v - mouth_v).abs() <= 0.06;
        if eye(-0.35) || eye(0.35) || mouth {
            FEATURE
        } else {
            SKIN
        }
    })
}

/// Voiced, speech-like signal: a harmonic series with syllable-rate
/// amplitude modulation. The envelope never drops below 40 % of `amplitude`,
/// so every 10 ms window stays well above a -40 dBFS floor for amplitudes
/// of 0.05 and up.
pub fn voiced(sample_rate: u32, duration_ms: u64, f0: f64, amplitude: f64) -> Vec<f32> {
    let n = (duration_ms * sample_rate as u64 / 1000) as usize;
    let harmonics = [1.0, 0.5, 0.33, 0.25];
    let norm: f64 = harmonics.iter().sum();
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let env = 0.7 + 0.3 * (2.0 * PI * 4.0 * t).sin();
            let wave: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(k, a)| a * (2.0 * PI * f0 * (k + 1) as f64 * t).sin())
                .sum::<f64>()
                / norm;
            (amplitude * env * wave / 0.62) as f32
        })
        .collect()
}

/// Layout of a synthetic spoken track, in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechLayout {
    /// `(start_ms, end_ms)` of every voiced span.
    pub utterances: Vec<(u64, u64)>,
    pub duration_ms: u64,
}

impl SpeechLayout {
    /// Silent gaps between consecutive utterances.
    pub fn gaps(&self) -> Vec<(u64, u64)> {
        self.utterances.windows(2).map(|w| (w[0].1, w[1].0)).collect()
    }
}

/// Renders voiced spans into an otherwise silent track (optionally with a
/// faint noise floor).
pub fn render_speech(layout: &SpeechLayout, sample_rate: u32, noise_dbfs: Option<f64>, seed: u64) -> Vec<f32> {
    let n = (layout.duration_ms * sample_rate as u64 / 1000) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0f32; n];
    if let Some(db) = noise_dbfs {
        let amp = 10f64.powf(db / 20.0) * 3f64.sqrt();
        for s in &mut out {
            *s = (rng.random_range(-1.0..1.0) * amp) as f32;
        }
    }
    for (k, &(start, end)) in layout.utterances.iter().enumerate() {
        let f0 = 110.0 + 25.0 * (k % 5) as f64 + rng.random_range(0.0..20.0);
        let amp = rng.random_range(0.15..0.6);
        let v = voiced(sample_rate, end - start, f0, amp);
        let off = (start * sample_rate as u64 / 1000) as usize;
        for (i, s) in v.into_iter().enumerate() {
            if let Some(o) = out.get_mut(off + i) {
                *o += s;
            }
        }
    }
    out
}

/// What the bundled sample video contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVideo {
    pub layout: SpeechLayout,
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub face: BBox,
}

/// Layout of the bundled sample: three utterances separated by 1.2 s pauses.
pub fn sample_video_spec() -> SampleVideo {
    SampleVideo {
        layout: SpeechLayout {
            utterances: vec![(300, 1800), (3000, 4200), (5400, 7000)],
            duration_ms: 7500,
        },
        width: 64,
        height: 48,
        fps: 5,
        face: BBox { x: 18, y: 6, w: 28, h: 36 },
    }
}

/// Writes the sample video: stereo 11.025 kHz audio (to exercise
/// down-mixing and resampling) and a face whose mood drifts over time.
pub fn write_sample_video(path: &Path) -> Result<SampleVideo, AviError> {
    let spec = sample_video_spec();
    let rate = 11_025;
    let mono = render_speech(&spec.layout, rate, None, 7);
    let samples = mono
        .iter()
        .flat_map(|&s| {
            let v = (s * 32767.0).round() as i16;
            [v, v]
        })
        .collect();
    let audio = PcmAudio {
        sample_rate: rate,
        channels: 2,
        samples,
    };
    let n_frames = (spec.layout.duration_ms * spec.fps as u64 / 1000) as usize;
    let frames: Vec<RgbImage> = (0..n_frames)
        .map(|i| {
            let mood = ((i as f64) / n_frames as f64) * 2.0 - 1.0;
            face_frame(spec.width, spec.height, spec.face, mood)
        })
        .collect();
    write_avi(path, spec.fps, 1, &frames, Some(&audio))?;
    Ok(spec)
}


/// Synthetic ratings shaped like the reference labelling study: 165 videos,
/// 147 of which end up valid (85 positive, 62 negative) with 236/185/20
/// positive/negative/uncertain votes among them.
///
/// Vote patterns among valid videos: 64 PPP, 3 PPN, 18 PPU, 58 NNN, 2 NNP,
/// 2 NNU. Dropped videos: 10 PNU, 4 UUP, 4 UUN.
pub fn protocol_ratings() -> Vec<AnnotationRecord> {
    use SentimentVote::{Negative as N, Positive as P, Uncertain as U};
    let patterns: [(usize, [SentimentVote; 3]); 9] = [
        (64, [P, P, P]),
        (3, [P, N, P]),
        (18, [U, P, P]),
        (58, [N, N, N]),
        (2, [N, P, N]),
        (2, [N, N, U]),
        (10, [P, N, U]),
        (4, [U, P, U]),
        (4, [N, U, U]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(165);
    let mut ids: Vec<usize> = (0..165).collect();
    // Interleave patterns across ids so the file is not sorted by outcome.
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let mut records = Vec::with_capacity(165 * 3);
    let mut next = ids.into_iter();
    for (count, votes) in patterns {
        for _ in 0..count {
            let video = next.next().expect("165 ids");
            // Three of twelve judges, chosen per video.
            let first = rng.random_range(0..12usize);
            for (k, label) in votes.iter().enumerate() {
                records.push(AnnotationRecord {
                    video_id: format!("bv{video:03}"),
                    rater_id: format!("judge{:02}", (first + k * 4) % 12),
                    label: *label,
                });
            }
        }
    }
    records.sort_by(|a, b| a.video_id.cmp(&b.video_id).then(a.rater_id.cmp(&b.rater_id)));
    records
}

/// Metadata for the videos of [`protocol_ratings`] that resolve as valid:
/// duration bins 40/58/37/7/5, 115 Chinese and 32 English, 94/7/6 from the
/// three largest posters and the rest spread over 25 smaller accounts.
pub fn protocol_metadata(valid_ids: &[String]) -> Vec<VideoMetadata> {
    let mut durations = Vec::new();
    for (count, lo, hi) in [(40, 20.0, 59.0), (58, 60.0, 89.0), (37, 90.0, 119.0), (7, 120.0, 149.0), (5, 150.0, 179.0)] {
        for i in 0..count {
            durations.push(lo + (hi - lo) * i as f64 / count as f64);
        }
    }
    let mut posters = Vec::new();
    posters.extend(std::iter::repeat_n("CCTV News".to_string(), 94));
    posters.extend(std::iter::repeat_n("Phoenix Satellite TV".to_string(), 7));
    posters.extend(std::iter::repeat_n("CGTN".to_string(), 6));
    for i in 0..40 {
        posters.push(format!("account{:02}", i % 25));
    }
    valid_ids
        .iter()
        .enumerate()
        .map(|(i, id)| VideoMetadata {
            video_id: id.clone(),
            duration_s: durations[(i * 37) % 147],
            language: if (i * 11) % 147 < 115 { "zh" } else { "en" }.to_string(),
            poster: posters[(i * 53) % 147].clone(),
        })
        .collect()
}

/// Original labels and a re-annotation agreeing on 96 of 100 items, over
/// two balanced classes.
pub fn reannotation_pair() -> (Vec<SentimentVote>, Vec<SentimentVote>) {
    let original: Vec<_> = (0..100)
        .map(|i| if i % 2 == 0 { SentimentVote::Positive } else { SentimentVote::Negative })
        .collect();
    let mut again = original.clone();
    for i in [3usize, 10, 41, 88] {
        again[i] = match again[i] {
            SentimentVote::Positive => SentimentVote::Negative,
            _ => SentimentVote::Positive,
        };
    }
    (original, again)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voiced_level_stays_above_floor() {
        let v = voiced(16_000, 1000, 150.0, 0.05);
        for w in v.chunks(160) {
            let rms = (w.iter().map(|s| (*s as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
            assert!(20.0 * rms.log10() > -40.0);
        }
    }

    #[test]
    fn sample_video_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.avi");
        let b = dir.path().join("b.avi");
        write_sample_video(&a).unwrap();
        write_sample_video(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
