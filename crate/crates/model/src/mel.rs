//! Log-mel spectrogram and its tiling into a grid of sub-graphs (§3.2:
//! "divide the feature graph into 16 sub-graph sequences").

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tape::Mat;
use crate::ModelError;

pub const SAMPLE_RATE: u32 = 16_000;
/// Power values are clamped here before the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Fixed affine map applied after the log so features sit roughly in [-2, 2].
pub const LOG_OFFSET: f64 = 6.0;
pub const LOG_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MelParams {
    pub bins: usize,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl MelParams {
    pub fn new(bins: usize, window_ms: u64, hop_ms: u64) -> Self {
        let window = (window_ms * SAMPLE_RATE as u64 / 1000) as usize;
        let hop = (hop_ms * SAMPLE_RATE as u64 / 1000) as usize;
        MelParams {
            bins,
            window,
            hop,
            n_fft: window.next_power_of_two(),
        }
    }

    /// Frames for a clip of `n` samples (no centering / edge padding).
    pub fn frames_for(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            1 + (n - self.window) / self.hop
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filters over `0..=nyquist`, shape `bins × (n_fft/2+1)`.
pub fn mel_filterbank(bins: usize, n_fft: usize, sample_rate: u32) -> Mat {
    let n_freqs = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..bins + 2).map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64)).collect();
    let mut fb = Mat::zeros(bins, n_freqs);
    for b in 0..bins {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.data[b * n_freqs + k] = w;
        }
    }
    fb
}

/// Normalized log-mel spectrogram, shape `bins × frames`.
pub fn log_mel(samples: &[f32], p: &MelParams) -> Result<Mat, ModelError> {
    let frames = p.frames_for(samples.len());
    if frames == 0 {
        return Err(ModelError::ClipTooShort {
            samples: samples.len(),
            needed: p.window,
        });
    }
    let hann: Vec<f64> = (0..p.window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / p.window as f64).cos())
        .collect();
    let fb = mel_filterbank(p.bins, p.n_fft, SAMPLE_RATE);
    let n_freqs = p.n_fft / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.n_fft);
    let mut out = Mat::zeros(p.bins, frames);
    let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
    let mut power = vec![0.0; n_freqs];
    for t in 0..frames {
        let start = t * p.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = if i < p.window { samples[start + i] as f64 * hann[i] } else { 0.0 };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (pw, c) in power.iter_mut().zip(&buf) {
            *pw = c.norm_sqr();
        }
        for b in 0..p.bins {
            let e: f64 = fb.row(b).iter().zip(&power).map(|(w, pw)| w * pw).sum();
            out.data[b * frames + t] = (e.max(LOG_FLOOR).ln() + LOG_OFFSET) / LOG_SCALE;
        }
    }
    Ok(out)
}

/// How a spectrogram is cut into `rows × cols` equally sized patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// `rows` is the largest divisor of `patches` not above its square
    /// root; the spectrogram is zero-padded right/bottom to tile exactly.
    pub fn new(patches: usize, bins: usize, frames: usize) -> Self {
        let rows = (1..=patches).filter(|r| patches.is_multiple_of(*r) && r * r <= patches).max().unwrap_or(1);
        let cols = patches / rows;
        PatchGrid {
            rows,
            cols,
            patch_h: bins.div_ceil(rows),
            patch_w: frames.div_ceil(cols),
        }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.rows * self.patch_h, self.cols * self.patch_w)
    }
}

/// Patches in row-major grid order (frequency band, then time).
pub fn tile(spec: &Mat, grid: &PatchGrid) -> Vec<Mat> {
    let mut out = Vec::with_capacity(grid.count());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let mut p = Mat::zeros(grid.patch_h, grid.patch_w);
            for i in 0..grid.patch_h {
                for j in 0..grid.patch_w {
                    let (r, c) = (gr * grid.patch_h + i, gc * grid.patch_w + j);
                    if r < spec.rows && c < spec.cols {
                        p.data[i * grid.patch_w + j] = spec.get(r, c);
                    }
                }
            }
            out.push(p);
        }
    }
    out
}

/// Inverse of [`tile`]: the zero-padded spectrogram.
pub fn untile(patches: &[Mat], grid: &PatchGrid) -> Mat {
    let (h, w) = grid.padded_shape();
    let mut out = Mat::zeros(h, w);
    for (k, p) in patches.iter().enumerate() {
        let (gr, gc) = (k / grid.cols, k % grid.cols);
        for i in 0..grid.patch_h {
            for j in 0..grid.patch_w {
                out.data[(gr * grid.patch_h + i) * w + gc * grid.patch_w + j] = p.get(i, j);
            }
        }
    }
    out
}

/// Adaptive average pooling of a patch to `side × side`, flattened.
pub fn pool_patch(p: &Mat, side: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| (i * n / side, ((i + 1) * n).div_ceil(side).max(i * n / side + 1));
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        let (r0, r1) = span(i, p.rows);
        for j in 0..side {
            let (c0, c1) = span(j, p.cols);
            let mut sum = 0.0;
            for r in r0..r1.min(p.rows) {
                for c in c0..c1.min(p.cols) {
                    sum += p.get(r, c);
                }
            }
            out.push(sum / ((r1.min(p.rows) - r0) * (c1.min(p.cols) - c0)) as f64);
        }
    }
    out
}
