//! Silence-based utterance segmentation.
//!
//! The track is reduced to a windowed RMS envelope; runs of windows below
//! the silence floor that last at least `min_silence_ms` delimit utterances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{MonoAudio, SAMPLES_PER_MS, TARGET_SAMPLE_RATE};

/// dBFS value reported for digital silence.
pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("audio buffer is empty")]
    EmptyAudio,
    #[error("segment {index} ({start_ms}-{end_ms} ms) is outside the {duration_ms} ms track")]
    SegmentOutOfRange {
        index: usize,
        start_ms: u64,
        end_ms: u64,
        duration_ms: u64,
    },
    #[error("audio must be {TARGET_SAMPLE_RATE} Hz, got {0}")]
    WrongSampleRate(u32),
    #[error("invalid silence profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SilenceProfile {
    pub min_silence_ms: u64,
    pub silence_floor_db: f64,
    pub window_ms: u64,
    pub min_segment_ms: u64,
    pub max_segment_ms: u64,
}

impl Default for SilenceProfile {
    fn default() -> Self {
        SilenceProfile {
            min_silence_ms: 800,
            silence_floor_db: -40.0,
            window_ms: 10,
            min_segment_ms: 300,
            max_segment_ms: 30_000,
        }
    }
}

impl SilenceProfile {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.min_silence_ms == 0 {
            return Err(SegmentError::InvalidProfile("min_silence_ms must be > 0".into()));
        }
        if self.window_ms == 0 {
            return Err(SegmentError::InvalidProfile("window_ms must be > 0".into()));
        }
        if self.min_segment_ms >= self.max_segment_ms {
            return Err(SegmentError::InvalidProfile(
                "min_segment_ms must be below max_segment_ms".into(),
            ));
        }
        if !self.silence_floor_db.is_finite() {
            return Err(SegmentError::InvalidProfile("silence_floor_db must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub t_ms: u64,
    pub rms_db: f64,
}

/// One sentence-level span. `text` stays empty until transcription.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceSegment {
    pub index: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    #[serde(default)]
    pub text: String,
}

impl UtteranceSegment {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilenceRun {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl SilenceRun {
    pub fn len_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

fn to_db(rms: f64) -> f64 {
    if rms <= 0.0 {
        DB_FLOOR
    } else {
        (20.0 * rms.log10()).max(DB_FLOOR)
    }
}

/// One RMS value (dBFS) per non-overlapping window. A trailing partial
/// window is measured over the samples it has.
pub fn energy_envelope(
    samples: &[f32],
    sample_rate: u32,
    window_ms: u64,
) -> Result<Vec<EnvelopePoint>, SegmentError> {
    if samples.is_empty() {
        return Err(SegmentError::EmptyAudio);
    }
    if window_ms == 0 {
        return Err(SegmentError::InvalidProfile("window_ms must be > 0".into()));
    }
    let win = ((window_ms * sample_rate as u64) / 1000).max(1) as usize;
    Ok(samples
        .chunks(win)
        .enumerate()
        .map(|(i, w)| {
            let ms = w.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / w.len() as f64;
            EnvelopePoint {
                t_ms: i as u64 * window_ms,
                rms_db: to_db(ms.sqrt()),
            }
        })
        .collect())
}

/// Maximal runs of sub-floor windows lasting at least `min_silence_ms`.
/// The envelope is assumed to end at `t_last + window_ms`.
pub fn detect_silence_runs(envelope: &[EnvelopePoint], profile: &SilenceProfile) -> Vec<SilenceRun> {
    let mut runs = Vec::new();
    let mut current: Option<u64> = None;
    let end_of = |p: &EnvelopePoint| p.t_ms + profile.window_ms;
    for (i, p) in envelope.iter().enumerate() {
        let quiet = p.rms_db < profile.silence_floor_db;
        match (quiet, current) {
            (true, None) => current = Some(p.t_ms),
            (false, Some(start)) => {
                let end = end_of(&envelope[i - 1]);
                if end - start >= profile.min_silence_ms {
                    runs.push(SilenceRun { start_ms: start, end_ms: end });
                }
                current = None;
            }
            _ => {}
        }
    }
    if let (Some(start), Some(last)) = (current, envelope.last()) {
        let end = end_of(last);
        if end - start >= profile.min_silence_ms {
            runs.push(SilenceRun { start_ms: start, end_ms: end });
        }
    }
    runs
}

/// Complement of the silence runs inside `[0, duration_ms]`, with short
/// segments merged into their predecessor and over-long ones split at
/// their quietest interior window.
pub fn plan_segments(
    duration_ms: u64,
    silence_runs: &[SilenceRun],
    envelope: &[EnvelopePoint],
    profile: &SilenceProfile,
) -> Vec<UtteranceSegment> {
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut cursor = 0u64;
    for run in silence_runs {
        let start = run.start_ms.min(duration_ms);
        if start > cursor {
            spans.push((cursor, start));
        }
        cursor = cursor.max(run.end_ms.min(duration_ms));
    }
    if cursor < duration_ms {
        spans.push((cursor, duration_ms));
    }

    let mut merged: Vec<(u64, u64)> = Vec::with_capacity(spans.len());
    for (start, end) in spans {
        if end - start < profile.min_segment_ms {
            if let Some(prev) = merged.last_mut() {
                prev.1 = end;
            }
            continue;
        }
        merged.push((start, end));
    }

    let mut out = Vec::with_capacity(merged.len());
    for (start, end) in merged {
        split_long(start, end, envelope, profile, &mut out);
    }
    out.into_iter()
        .enumerate()
        .map(|(index, (start_ms, end_ms))| UtteranceSegment {
            index,
            start_ms,
            end_ms,
            text: String::new(),
        })
        .collect()
}

fn split_long(
    start: u64,
    end: u64,
    envelope: &[EnvelopePoint],
    profile: &SilenceProfile,
    out: &mut Vec<(u64, u64)>,
) {
    if end - start <= profile.max_segment_ms {
        out.push((start, end));
        return;
    }
    // Candidate cut points keep both halves at least min_segment_ms long.
    let lo = start + profile.min_segment_ms.max(profile.window_ms);
    let hi = end.saturating_sub(profile.min_segment_ms.max(profile.window_ms));
    let cut = envelope
        .iter()
        .filter(|p| p.t_ms > lo && p.t_ms < hi)
        .min_by(|a, b| a.rms_db.total_cmp(&b.rms_db).then(a.t_ms.cmp(&b.t_ms)))
        .map(|p| p.t_ms)
        .unwrap_or(start + (end - start) / 2);
    split_long(start, cut, envelope, profile, out);
    split_long(cut, end, envelope, profile, out);
}

/// Full envelope -> runs -> plan chain for a mono 16 kHz track.
pub fn segment_audio(audio: &MonoAudio, profile: &SilenceProfile) -> Result<Vec<UtteranceSegment>, SegmentError> {
    profile.validate()?;
    if audio.sample_rate != TARGET_SAMPLE_RATE {
        return Err(SegmentError::WrongSampleRate(audio.sample_rate));
    }
    let env = energy_envelope(&audio.to_f32(), audio.sample_rate, profile.window_ms)?;
    let runs = detect_silence_runs(&env, profile);
    Ok(plan_segments(audio.duration_ms(), &runs, &env, profile))
}

/// Cuts one clip per segment; clip length is exactly `16 * (end - start)` samples.
pub fn cut_audio(audio: &MonoAudio, segments: &[UtteranceSegment]) -> Result<Vec<MonoAudio>, SegmentError> {
    if audio.sample_rate != TARGET_SAMPLE_RATE {
        return Err(SegmentError::WrongSampleRate(audio.sample_rate));
    }
    let duration_ms = audio.samples.len() as u64 / SAMPLES_PER_MS as u64;
    segments
        .iter()
        .map(|s| {
            if s.start_ms >= s.end_ms || s.end_ms > duration_ms {
                return Err(SegmentError::SegmentOutOfRange {
                    index: s.index,
                    start_ms: s.start_ms,
                    end_ms: s.end_ms,
                    duration_ms,
                });
            }
            let a = s.start_ms as usize * SAMPLES_PER_MS;
            let b = s.end_ms as usize * SAMPLES_PER_MS;
            Ok(MonoAudio {
                sample_rate: audio.sample_rate,
                samples: audio.samples[a..b].to_vec(),
            })
        })
        .collect()
}
