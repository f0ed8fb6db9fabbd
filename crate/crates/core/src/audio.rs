//! PCM audio buffers, WAV I/O, down-mixing and resampling.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::riff::{self, ChunkIter};

/// Canonical sample rate of every normalized audio track.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;
/// Samples per millisecond at [`TARGET_SAMPLE_RATE`].
pub const SAMPLES_PER_MS: usize = 16;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("malformed wav: {0}")]
    Malformed(String),
    #[error("unsupported wav encoding: format tag {format}, {bits} bits")]
    Unsupported { format: u16, bits: u16 },
}

/// Interleaved signed 16-bit PCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<i16>,
}

/// Single-channel signed 16-bit PCM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonoAudio {
    pub sample_rate: u32,
    pub samples: Vec<i16>,
}

impl PcmAudio {
    pub fn frames(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.samples.len() / self.channels as usize
        }
    }

    /// Averages all channels into one.
    pub fn downmix(&self) -> MonoAudio {
        let ch = self.channels.max(1) as usize;
        if ch == 1 {
            return MonoAudio {
                sample_rate: self.sample_rate,
                samples: self.samples.clone(),
            };
        }
        let samples = self
            .samples
            .chunks_exact(ch)
            .map(|f| {
                let sum: i32 = f.iter().map(|&s| s as i32).sum();
                (sum as f64 / ch as f64).round() as i16
            })
            .collect();
        MonoAudio {
            sample_rate: self.sample_rate,
            samples,
        }
    }
}

impl MonoAudio {
    pub fn duration_ms(&self) -> u64 {
        if self.sample_rate == 0 {
            return 0;
        }
        (self.samples.len() as u64 * 1000) / self.sample_rate as u64
    }

    /// Samples scaled to `[-1, 1)`.
    pub fn to_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&s| s as f32 / 32768.0).collect()
    }

    pub fn from_f32(sample_rate: u32, samples: &[f32]) -> Self {
        MonoAudio {
            sample_rate,
            samples: samples.iter().map(|&s| f32_to_i16(s)).collect(),
        }
    }

    /// Converts to [`TARGET_SAMPLE_RATE`]; identity when already there.
    pub fn to_target_rate(&self) -> MonoAudio {
        if self.sample_rate == TARGET_SAMPLE_RATE {
            return self.clone();
        }
        MonoAudio {
            sample_rate: TARGET_SAMPLE_RATE,
            samples: resample(&self.samples, self.sample_rate, TARGET_SAMPLE_RATE),
        }
    }
}

pub fn f32_to_i16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

const SINC_HALF_TAPS: isize = 16;

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(input: &[i16], from_rate: u32, to_rate: u32) -> Vec<i16> {
    if from_rate == to_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = ((input.len() as u128 * to_rate as u128 + from_rate as u128 / 2) / from_rate as u128) as usize;
    // Cut-off at the lower of the two Nyquist frequencies.
    let cutoff = ratio.min(1.0);
    let half = (SINC_HALF_TAPS as f64 / cutoff).ceil() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let c = center.floor() as isize;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for k in (c - half + 1)..=(c + half) {
            let x = center - k as f64;
            let w_arg = x / (half as f64);
            if w_arg.abs() >= 1.0 {
                continue;
            }
            let window = 0.5 * (1.0 + (PI * w_arg).cos());
            let t = x * cutoff;
            let sinc = if t.abs() < 1e-12 {
                1.0
            } else {
                (PI * t).sin() / (PI * t)
            };
            let weight = cutoff * sinc * window;
            norm += weight;
            if k >= 0 && (k as usize) < input.len() {
                acc += weight * input[k as usize] as f64;
            }
        }
        let v = if norm.abs() > 1e-12 { acc / norm } else { 0.0 };
        out.push(v.round().clamp(-32768.0, 32767.0) as i16);
    }
    out
}

pub fn parse_wav(bytes: &[u8]) -> Result<PcmAudio, WavError> {
    if !bytes.starts_with(b"RIFF") {
        return Err(WavError::NotWave);
    }
    let top = ChunkIter::new(bytes)
        .next()
        .ok_or(WavError::NotWave)?
        .map_err(WavError::Malformed)?;
    if !top.is_list(b"WAVE") {
        return Err(WavError::NotWave);
    }
    let mut fmt = None;
    let mut data = None;
    for c in top.children() {
        let c = c.map_err(WavError::Malformed)?;
        match &c.id {
            b"fmt " => fmt = Some(c.data),
            b"data" => data = Some(c.data),
            _ => {}
        }
    }
    let fmt = fmt.ok_or_else(|| WavError::Malformed("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| WavError::Malformed("missing data chunk".into()))?;
    let format = parse_wave_format(fmt).map_err(WavError::Malformed)?;
    Ok(PcmAudio {
        sample_rate: format.sample_rate,
        channels: format.channels,
        samples: decode_pcm16(&format, data).map_err(|_| WavError::Unsupported {
            format: format.format_tag,
            bits: format.bits_per_sample,
        })?,
    })
}

pub fn read_wav(path: &Path) -> Result<PcmAudio, WavError> {
    parse_wav(&std::fs::read(path)?)
}

pub fn wav_bytes(audio: &PcmAudio) -> Vec<u8> {
    let fmt = wave_format_bytes(audio.sample_rate, audio.channels);
    let mut data = Vec::with_capacity(audio.samples.len() * 2);
    for s in &audio.samples {
        data.extend_from_slice(&s.to_le_bytes());
    }
    let mut body = riff::chunk_bytes(b"fmt ", &fmt);
    body.extend(riff::chunk_bytes(b"data", &data));
    riff::list_bytes(b"RIFF", b"WAVE", &body)
}

pub fn write_wav(path: &Path, audio: &PcmAudio) -> std::io::Result<()> {
    std::fs::write(path, wav_bytes(audio))
}

pub fn write_mono_wav(path: &Path, audio: &MonoAudio) -> std::io::Result<()> {
    write_wav(
        path,
        &PcmAudio {
            sample_rate: audio.sample_rate,
            channels: 1,
            samples: audio.samples.clone(),
        },
    )
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct WaveFormat {
    pub format_tag: u16,
    pub channels: u16,
    pub sample_rate: u32,
    pub bits_per_sample: u16,
}

pub(crate) fn parse_wave_format(fmt: &[u8]) -> Result<WaveFormat, String> {
    if fmt.len() < 16 {
        return Err("fmt chunk shorter than 16 bytes".into());
    }
    let mut format_tag = riff::le_u16(&fmt[0..]);
    // WAVE_FORMAT_EXTENSIBLE carries the real tag in the sub-format GUID.
    if format_tag == 0xFFFE && fmt.len() >= 26 {
        format_tag = riff::le_u16(&fmt[24..]);
    }
    let f = WaveFormat {
        format_tag,
        channels: riff::le_u16(&fmt[2..]),
        sample_rate: riff::le_u32(&fmt[4..]),
        bits_per_sample: riff::le_u16(&fmt[14..]),
    };
    if f.channels == 0 || f.sample_rate == 0 {
        return Err("zero channels or sample rate".into());
    }
    Ok(f)
}

pub(crate) fn decode_pcm16(format: &WaveFormat, data: &[u8]) -> Result<Vec<i16>, ()> {
    if format.format_tag != 1 || format.bits_per_sample != 16 {
        return Err(());
    }
    Ok(data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect())
}

pub(crate) fn wave_format_bytes(sample_rate: u32, channels: u16) -> Vec<u8> {
    let block_align = channels * 2;
    let mut fmt = Vec::with_capacity(16);
    fmt.extend_from_slice(&1u16.to_le_bytes());
    fmt.extend_from_slice(&channels.to_le_bytes());
    fmt.extend_from_slice(&sample_rate.to_le_bytes());
    fmt.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    fmt.extend_from_slice(&block_align.to_le_bytes());
    fmt.extend_from_slice(&16u16.to_le_bytes());
    fmt
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(rate: u32, freq: f64, secs: f64, amp: f64) -> Vec<i16> {
        (0..(rate as f64 * secs) as usize)
            .map(|n| (amp * 32767.0 * (2.0 * PI * freq * n as f64 / rate as f64).sin()) as i16)
            .collect()
    }

    #[test]
    fn wav_round_trip() {
        let a = PcmAudio {
            sample_rate: 44_100,
            channels: 2,
            samples: vec![1, -2, 3, -4, i16::MAX, i16::MIN],
        };
        assert_eq!(parse_wav(&wav_bytes(&a)).unwrap(), a);
    }

    #[test]
    fn rejects_non_wave() {
        assert!(matches!(parse_wav(b"hello world, not a wav"), Err(WavError::NotWave)));
        assert!(matches!(parse_wav(b""), Err(WavError::NotWave)));
    }

    #[test]
    fn rejects_float_wav() {
        let mut fmt = wave_format_bytes(16_000, 1);
        fmt[0] = 3;
        fmt[14] = 32;
        let mut body = riff::chunk_bytes(b"fmt ", &fmt);
        body.extend(riff::chunk_bytes(b"data", &[0; 8]));
        let bytes = riff::list_bytes(b"RIFF", b"WAVE", &body);
        assert!(matches!(parse_wav(&bytes), Err(WavError::Unsupported { .. })));
    }

    #[test]
    fn downmix_averages_channels() {
        let a = PcmAudio {
            sample_rate: 8000,
            channels: 2,
            samples: vec![100, 300, -50, -150],
        };
        assert_eq!(a.downmix().samples, vec![200, -100]);
    }

    #[test]
    fn resample_identity_and_length() {
        let s = sine(16_000, 440.0, 0.5, 0.5);
        assert_eq!(resample(&s, 16_000, 16_000), s);
        let up = resample(&sine(11_025, 440.0, 1.0, 0.5), 11_025, 16_000);
        assert_eq!(up.len(), 16_000);
        let down = resample(&sine(44_100, 440.0, 1.0, 0.5), 44_100, 16_000);
        assert_eq!(down.len(), 16_000);
    }

    #[test]
    fn resample_preserves_in_band_tone() {
        let src = sine(44_100, 440.0, 1.0, 0.5);
        let out = resample(&src, 44_100, 16_000);
        let expected = sine(16_000, 440.0, 1.0, 0.5);
        // Skip kernel edge effects.
        let max_err = out[200..15_800]
            .iter()
            .zip(&expected[200..15_800])
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .max()
            .unwrap();
        assert!(max_err < 200, "max err {max_err}");
    }

    #[test]
    fn resample_attenuates_above_target_nyquist() {
        let src = sine(44_100, 12_000.0, 1.0, 0.5);
        let out = resample(&src, 44_100, 16_000);
        let rms = (out[200..15_800].iter().map(|&s| (s as f64).powi(2)).sum::<f64>()
            / 15_600.0)
            .sqrt();
        assert!(rms < 0.05 * 0.5 * 32767.0 / 2f64.sqrt(), "rms {rms}");
    }
}
