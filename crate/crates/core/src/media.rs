//! Media preparation: container normalization, resolution rules, frame
//! sampling and face localisation.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{imageops, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, MonoAudio, TARGET_SAMPLE_RATE};
use crate::avi::{AviError, AviReader};

/// Side length of every face crop fed to the visual branch.
pub const FACE_CROP_SIZE: u32 = 48;
/// Longest side of the fallback target resolution.
pub const FALLBACK_LONG_SIDE: u32 = 224;
/// Environment variable naming the external transcoder binary.
pub const TRANSCODER_ENV: &str = "MSEVA_TRANSCODER";

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("unreadable media: {0}")]
    UnreadableMedia(String),
    #[error("input has no audio stream")]
    NoAudioStream,
    #[error("input has no video stream")]
    NoVideoStream,
    #[error("resolution rules {first} and {second} both match {width}x{height}")]
    AmbiguousRules {
        first: usize,
        second: usize,
        width: u32,
        height: u32,
    },
    #[error("invalid resolution rule {index}: {reason}")]
    InvalidRule { index: usize, reason: String },
    #[error("invalid frame policy: {0}")]
    InvalidPolicy(String),
    #[error("frame decode failed at {timestamp_ms} ms: {cause}")]
    FrameDecodeFailure { timestamp_ms: u64, cause: String },
    #[error("face detector unavailable: {0}")]
    DetectorUnavailable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MediaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den.max(1) as f64
    }
}

/// A registered short video together with its normalized derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaAsset {
    pub asset_id: String,
    pub source_path: PathBuf,
    /// Mono 16 kHz signed 16-bit WAV.
    pub audio_path: PathBuf,
    /// Uncompressed AVI at source resolution.
    pub video_path: PathBuf,
    pub duration_ms: u64,
    pub width_px: u32,
    pub height_px: u32,
    pub fps: Fps,
    pub language_hint: Option<String>,
}

impl MediaAsset {
    pub fn load_audio(&self) -> Result<MonoAudio> {
        let pcm = audio::read_wav(&self.audio_path)
            .map_err(|e| MediaError::UnreadableMedia(format!("normalized audio: {e}")))?;
        Ok(pcm.downmix())
    }
}

/// Hex SHA-256 prefix of a file's bytes.
pub fn content_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(content_id_bytes(&bytes))
}

pub fn content_id_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// External media transcoder.
///
/// Invoked as `<program> <input> <audio_out.wav> <video_out.avi>`. On success
/// it exits 0 having written 16-bit PCM mono 16 kHz audio and an uncompressed
/// `bgr24` AVI at the source resolution. Exit status 3 means the input has no
/// audio stream, 4 means no video stream; anything else is a decode failure.
#[derive(Debug, Clone, Default)]
pub struct Transcoder {
    pub program: Option<PathBuf>,
}

impl Transcoder {
    pub fn from_env() -> Self {
        Transcoder {
            program: std::env::var_os(TRANSCODER_ENV).map(PathBuf::from),
        }
    }

    pub fn none() -> Self {
        Transcoder { program: None }
    }

    fn run(&self, input: &Path, wav: &Path, avi: &Path) -> Result<()> {
        let Some(program) = &self.program else {
            return Err(MediaError::UnreadableMedia(format!(
                "{} is not an uncompressed AVI and no transcoder is configured ({TRANSCODER_ENV})",
                input.display()
            )));
        };
        let out = Command::new(program)
            .arg(input)
            .arg(wav)
            .arg(avi)
            .output()
            .map_err(|e| MediaError::UnreadableMedia(format!("cannot run transcoder: {e}")))?;
        match out.status.code() {
            Some(0) => Ok(()),
            Some(3) => Err(MediaError::NoAudioStream),
            Some(4) => Err(MediaError::NoVideoStream),
            _ => Err(MediaError::UnreadableMedia(format!(
                "transcoder failed ({}): {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ))),
        }
    }
}

/// Demuxes `source_path` into a mono 16 kHz WAV and a frame-addressable AVI
/// inside `work_dir`.
pub fn normalize_container(
    source_path: &Path,
    work_dir: &Path,
    transcoder: &Transcoder,
    language_hint: Option<String>,
) -> Result<MediaAsset> {
    if !source_path.is_file() {
        return Err(MediaError::UnreadableMedia(format!(
            "{} does not exist",
            source_path.display()
        )));
    }
    std::fs::create_dir_all(work_dir)?;
    let asset_id = content_id(source_path)?;
    let audio_path = work_dir.join("audio.wav");

    let (reader, video_path, pcm) = match AviReader::open(source_path) {
        Ok(r) => {
            if !r.has_video() {
                return Err(MediaError::NoVideoStream);
            }
            let pcm = r.read_audio().map_err(avi_unreadable)?.ok_or(MediaError::NoAudioStream)?;
            (r, source_path.to_path_buf(), pcm)
        }
        Err(AviError::Io(e)) => return Err(MediaError::Io(e)),
        Err(native_err) => {
            if transcoder.program.is_none() {
                return Err(MediaError::UnreadableMedia(format!(
                    "{}: {native_err}; no transcoder configured ({TRANSCODER_ENV})",
                    source_path.display()
                )));
            }
            let wav = work_dir.join("transcoded.wav");
            let avi = work_dir.join("transcoded.avi");
            transcoder.run(source_path, &wav, &avi)?;
            let r = AviReader::open(&avi).map_err(avi_unreadable)?;
            if !r.has_video() {
                return Err(MediaError::NoVideoStream);
            }
            let pcm = audio::read_wav(&wav).map_err(|e| MediaError::UnreadableMedia(e.to_string()))?;
            (r, avi, pcm)
        }
    };

    let mono = pcm.downmix().to_target_rate();
    if mono.samples.is_empty() {
        return Err(MediaError::NoAudioStream);
    }
    audio::write_mono_wav(&audio_path, &mono)?;
    let fmt = reader.video_format().ok_or(MediaError::NoVideoStream)?;
    if reader.frame_count() == 0 {
        return Err(MediaError::UnreadableMedia("video stream has no frames".into()));
    }
    let duration_ms = mono.duration_ms();
    if duration_ms == 0 {
        return Err(MediaError::UnreadableMedia("zero-length audio".into()));
    }
    debug_assert_eq!(mono.sample_rate, TARGET_SAMPLE_RATE);
    Ok(MediaAsset {
        asset_id,
        source_path: source_path.to_path_buf(),
        audio_path,
        video_path,
        duration_ms,
        width_px: fmt.width,
        height_px: fmt.height,
        fps: Fps {
            num: reader.fps_num,
            den: reader.fps_den,
        },
        language_hint,
    })
}

fn avi_unreadable(e: AviError) -> MediaError {
    match e {
        AviError::Io(e) => MediaError::Io(e),
        other => MediaError::UnreadableMedia(other.to_string()),
    }
}

/// Maps a band of source resolutions onto one target resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRule {
    pub src_w: [u32; 2],
    pub src_h: [u32; 2],
    pub dst_w: u32,
    pub dst_h: u32,
}

impl ResolutionRule {
    pub const fn new(src_w: [u32; 2], src_h: [u32; 2], dst_w: u32, dst_h: u32) -> Self {
        ResolutionRule {
            src_w,
            src_h,
            dst_w,
            dst_h,
        }
    }

    pub fn contains(&self, width: u32, height: u32) -> bool {
        (self.src_w[0]..=self.src_w[1]).contains(&width)
            && (self.src_h[0]..=self.src_h[1]).contains(&height)
    }

    /// Every resolution in the source band is portrait (width < height).
    pub fn src_is_portrait(&self) -> bool {
        self.src_w[1] < self.src_h[0]
    }

    pub fn dst_is_portrait(&self) -> bool {
        self.dst_w < self.dst_h
    }

    fn overlaps(&self, other: &ResolutionRule) -> bool {
        self.src_w[0] <= other.src_w[1]
            && other.src_w[0] <= self.src_w[1]
            && self.src_h[0] <= other.src_h[1]
            && other.src_h[0] <= self.src_h[1]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.src_w[0] > self.src_w[1] || self.src_h[0] > self.src_h[1] {
            return Err("empty source range".into());
        }
        if self.dst_w == 0 || self.dst_h == 0 {
            return Err("target dimensions must be positive".into());
        }
        if self.src_is_portrait() != self.dst_is_portrait() {
            return Err(format!(
                "orientation not preserved: source {:?}x{:?} -> target {}x{}",
                self.src_w, self.src_h, self.dst_w, self.dst_h
            ));
        }
        Ok(())
    }
}

/// The four compression rules for the resolutions found in the reference
/// short-video corpus (width x height).
pub fn default_resolution_rules() -> Vec<ResolutionRule> {
    vec![
        ResolutionRule::new([470, 490], [550, 570], 180, 224),
        ResolutionRule::new([845, 865], [470, 490], 214, 120),
        ResolutionRule::new([470, 490], [840, 860], 120, 214),
        ResolutionRule::new([1070, 1090], [1910, 1930], 144, 216),
    ]
}

/// Checks every rule and rejects pairs whose source bands intersect.
pub fn validate_rules(rules: &[ResolutionRule]) -> Result<()> {
    for (i, r) in rules.iter().enumerate() {
        r.validate()
            .map_err(|reason| MediaError::InvalidRule { index: i, reason })?;
    }
    for i in 0..rules.len() {
        for j in i + 1..rules.len() {
            if rules[i].overlaps(&rules[j]) {
                return Err(MediaError::AmbiguousRules {
                    first: i,
                    second: j,
                    width: rules[i].src_w[0].max(rules[j].src_w[0]),
                    height: rules[i].src_h[0].max(rules[j].src_h[0]),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedRule {
    pub rule: ResolutionRule,
    pub fallback: bool,
}

impl SelectedRule {
    pub fn target(&self) -> (u32, u32) {
        (self.rule.dst_w, self.rule.dst_h)
    }
}

pub fn select_resolution_rule(
    width: u32,
    height: u32,
    rules: &[ResolutionRule],
) -> Result<SelectedRule> {
    let mut hits = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.contains(width, height));
    match (hits.next(), hits.next()) {
        (Some((_, r)), None) => Ok(SelectedRule {
            rule: *r,
            fallback: false,
        }),
        (Some((i, _)), Some((j, _))) => Err(MediaError::AmbiguousRules {
            first: i,
            second: j,
            width,
            height,
        }),
        (None, _) => Ok(SelectedRule {
            rule: fallback_rule(width, height),
            fallback: true,
        }),
    }
}

/// Scales the longer side to [`FALLBACK_LONG_SIDE`], preserving aspect ratio.
pub fn fallback_rule(width: u32, height: u32) -> ResolutionRule {
    let long = width.max(height).max(1) as u64;
    let scale = |v: u32| ((v as u64 * FALLBACK_LONG_SIDE as u64 + long / 2) / long).max(1) as u32;
    ResolutionRule::new([width, width], [height, height], scale(width), scale(height))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramePolicy {
    FixedCount(u32),
    IntervalMs(u64),
}

impl FramePolicy {
    /// Sampling instants for a clip of `duration_ms`.
    pub fn timestamps(&self, duration_ms: u64) -> Result<Vec<u64>> {
        match *self {
            FramePolicy::FixedCount(0) => Err(MediaError::InvalidPolicy("fixed_count must be >= 1".into())),
            FramePolicy::FixedCount(n) => {
                if n as u64 > duration_ms {
                    return Err(MediaError::InvalidPolicy(format!(
                        "{n} frames do not fit in {duration_ms} ms"
                    )));
                }
                Ok((0..n as u64).map(|i| i * duration_ms / n as u64).collect())
            }
            FramePolicy::IntervalMs(0) => Err(MediaError::InvalidPolicy("interval_ms must be > 0".into())),
            FramePolicy::IntervalMs(t) => Ok((0..=duration_ms / t).map(|k| k * t).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub asset_id: String,
    pub timestamps_ms: Vec<u64>,
    pub frames: Vec<RgbImage>,
}

pub fn extract_frames(
    asset: &MediaAsset,
    policy: FramePolicy,
    rules: &[ResolutionRule],
) -> Result<FrameBatch> {
    let timestamps_ms = policy.timestamps(asset.duration_ms)?;
    let target = select_resolution_rule(asset.width_px, asset.height_px, rules)?;
    let (dst_w, dst_h) = target.target();
    let reader = AviReader::open(&asset.video_path).map_err(|e| MediaError::FrameDecodeFailure {
        timestamp_ms: timestamps_ms.first().copied().unwrap_or(0),
        cause: e.to_string(),
    })?;
    let n = reader.frame_count();
    let mut frames = Vec::with_capacity(timestamps_ms.len());
    for &t in &timestamps_ms {
        if n == 0 {
            return Err(MediaError::FrameDecodeFailure {
                timestamp_ms: t,
                cause: "video has no frames".into(),
            });
        }
        let idx = (t as u128 * reader.fps_num as u128 / (1000 * reader.fps_den.max(1) as u128)) as usize;
        let frame = reader
            .read_frame(idx.min(n - 1))
            .map_err(|e| MediaError::FrameDecodeFailure {
                timestamp_ms: t,
                cause: e.to_string(),
            })?;
        frames.push(if frame.dimensions() == (dst_w, dst_h) {
            frame
        } else {
            imageops::resize(&frame, dst_w, dst_h, imageops::FilterType::Triangle)
        });
    }
    Ok(FrameBatch {
        asset_id: asset.asset_id.clone(),
        timestamps_ms,
        frames,
    })
}

/// Axis-aligned box in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (x1 - x0) as f64 * (y1 - y0) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    fn clamp_to(self, width: u32, height: u32) -> Option<BBox> {
        let x = self.x.min(width);
        let y = self.y.min(height);
        let w = self.w.min(width - x);
        let h = self.h.min(height - y);
        (w > 0 && h > 0).then_some(BBox { x, y, w, h })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCrop {
    pub frame_timestamp_ms: u64,
    pub bbox: BBox,
    /// Always `FACE_CROP_SIZE` x `FACE_CROP_SIZE`.
    pub crop: RgbImage,
}

pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, frame: &RgbImage) -> Result<Vec<BBox>>;
}

/// Deterministic stand-in: the centered square of side `min(w, h)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterCropDetector;

impl FaceDetector for CenterCropDetector {
    fn name(&self) -> &str {
        "center"
    }

    fn detect(&self, frame: &RgbImage) -> Result<Vec<BBox>> {
        let (w, h) = frame.dimensions();
        let side = w.min(h);
        if side == 0 {
            return Ok(Vec::new());
        }
        Ok(vec![BBox {
            x: (w - side) / 2,
            y: (h - side) / 2,
            w: side,
            h: side,
        }])
    }
}

/// Classical detector for high-contrast faces on plain backgrounds: Otsu
/// threshold on luma, then the bounding box of the largest bright
/// 4-connected component.
#[derive(Debug, Clone, Copy)]
pub struct BlobFaceDetector {
    /// Components smaller than this fraction of the frame are ignored.
    pub min_area_frac: f64,
    /// Frames whose luma range is below this are treated as featureless.
    pub min_contrast: u8,
}

impl Default for BlobFaceDetector {
    fn default() -> Self {
        BlobFaceDetector {
            min_area_frac: 0.005,
            min_contrast: 24,
        }
    }
}

fn otsu_threshold(gray: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for p in gray.pixels() {
        hist[p.0[0] as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_b, mut sum_b, mut best, mut best_t) = (0u64, 0.0, -1.0, 0u8);
    for (t, &c) in hist.iter().enumerate() {
        w_b += c;
        if w_b == 0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0 {
            break;
        }
        sum_b += t as f64 * c as f64;
        let m_b = sum_b / w_b as f64;
        let m_f = (sum_all - sum_b) / w_f as f64;
        let between = w_b as f64 * w_f as f64 * (m_b - m_f).powi(2);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

impl FaceDetector for BlobFaceDetector {
    fn name(&self) -> &str {
        "blob"
    }

    fn detect(&self, frame: &RgbImage) -> Result<Vec<BBox>> {
        let gray = imageops::grayscale(frame);
        let (w, h) = gray.dimensions();
        let (lo, hi) = gray
            .pixels()
            .fold((255u8, 0u8), |(lo, hi), p| (lo.min(p.0[0]), hi.max(p.0[0])));
        if hi.saturating_sub(lo) < self.min_contrast {
            return Ok(Vec::new());
        }
        let t = otsu_threshold(&gray);
        let fg: Vec<bool> = gray.pixels().map(|p| p.0[0] > t).collect();
        let mut label = vec![u32::MAX; fg.len()];
        let mut boxes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..fg.len() {
            if !fg[start] || label[start] != u32::MAX {
                continue;
            }
            let id = boxes.len() as u32;
            let (mut x0, mut y0, mut x1, mut y1, mut area) = (u32::MAX, u32::MAX, 0, 0, 0u64);
            label[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i as u32) % w, (i as u32) / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                area += 1;
                let mut visit = |j: usize| {
                    if fg[j] && label[j] == u32::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w as usize);
                }
                if y + 1 < h {
                    visit(i + w as usize);
                }
            }
            boxes.push((
                area,
                BBox {
                    x: x0,
                    y: y0,
                    w: x1 - x0 + 1,
                    h: y1 - y0 + 1,
                },
            ));
        }
        let min_area = (self.min_area_frac * (w as f64) * (h as f64)).ceil() as u64;
        boxes.retain(|(a, _)| *a >= min_area.max(1));
        boxes.sort_by_key(|b| std::cmp::Reverse(b.0));
        Ok(boxes.into_iter().map(|(_, b)| b).collect())
    }
}

/// Runs `<program> <frame.png>`; the program prints a JSON array of
/// `[x, y, w, h]` boxes on stdout.
#[derive(Debug, Clone)]
pub struct CommandFaceDetector {
    program: PathBuf,
}

impl CommandFaceDetector {
    pub fn new(program: PathBuf) -> Result<Self> {
        if !program.is_file() {
            return Err(MediaError::DetectorUnavailable(format!(
                "{} not found",
                program.display()
            )));
        }
        Ok(CommandFaceDetector { program })
    }
}

impl FaceDetector for CommandFaceDetector {
    fn name(&self) -> &str {
        "command"
    }

    fn detect(&self, frame: &RgbImage) -> Result<Vec<BBox>> {
        let dir = std::env::temp_dir().join(format!("mseva-face-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let png = dir.join(format!("{:?}.png", std::thread::current().id()).replace(['(', ')'], ""));
        frame
            .save(&png)
            .map_err(|e| MediaError::DetectorUnavailable(format!("cannot write frame: {e}")))?;
        let out = Command::new(&self.program)
            .arg(&png)
            .output()
            .map_err(|e| MediaError::DetectorUnavailable(e.to_string()))?;
        let _ = std::fs::remove_file(&png);
        if !out.status.success() {
            return Err(MediaError::DetectorUnavailable(format!(
                "detector exited with {}",
                out.status
            )));
        }
        let boxes: Vec<[u32; 4]> = serde_json::from_slice(&out.stdout)
            .map_err(|e| MediaError::DetectorUnavailable(format!("bad detector output: {e}")))?;
        Ok(boxes
            .into_iter()
            .map(|[x, y, w, h]| BBox { x, y, w, h })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    Center,
    Blob,
    Command,
}

/// Builds the configured detector, optionally degrading to the center-crop
/// stub when the configured one cannot be loaded.
pub fn build_detector(
    kind: &DetectorKind,
    command: Option<&Path>,
    fallback_to_center: bool,
) -> Result<Box<dyn FaceDetector>> {
    let built: Result<Box<dyn FaceDetector>> = match kind {
        DetectorKind::Center => Ok(Box::new(CenterCropDetector)),
        DetectorKind::Blob => Ok(Box::new(BlobFaceDetector::default())),
        DetectorKind::Command => match command {
            Some(p) => CommandFaceDetector::new(p.to_path_buf()).map(|d| Box::new(d) as Box<dyn FaceDetector>),
            None => Err(MediaError::DetectorUnavailable("no detector command configured".into())),
        },
    };
    match built {
        Err(MediaError::DetectorUnavailable(reason)) if fallback_to_center => {
            log::warn!("face detector unavailable ({reason}); using center crop");
            Ok(Box::new(CenterCropDetector))
        }
        other => other,
    }
}

/// At most one crop per frame: the largest detected box, resampled to 48x48.
pub fn detect_faces(batch: &FrameBatch, detector: &dyn FaceDetector) -> Result<Vec<FaceCrop>> {
    let mut crops = Vec::new();
    for (frame, &t) in batch.frames.iter().zip(&batch.timestamps_ms) {
        let (w, h) = frame.dimensions();
        let best = detector
            .detect(frame)?
            .into_iter()
            .filter_map(|b| b.clamp_to(w, h))
            .max_by(|a, b| a.area().cmp(&b.area()).then(b.y.cmp(&a.y)).then(b.x.cmp(&a.x)));
        if let Some(bbox) = best {
            let region = imageops::crop_imm(frame, bbox.x, bbox.y, bbox.w, bbox.h).to_image();
            let crop = imageops::resize(
                &region,
                FACE_CROP_SIZE,
                FACE_CROP_SIZE,
                imageops::FilterType::Triangle,
            );
            crops.push(FaceCrop {
                frame_timestamp_ms: t,
                bbox,
                crop,
            });
        }
    }
    Ok(crops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avi::write_avi;
    use crate::synth;

    #[test]
    fn table_rules_hit_reported_targets() {
        let rules = default_resolution_rules();
        validate_rules(&rules).unwrap();
        let t = |w, h| select_resolution_rule(w, h, &rules).unwrap();
        assert_eq!(t(480, 560).target(), (180, 224));
        assert_eq!(t(855, 480).target(), (214, 120));
        assert_eq!(t(1080, 1920).target(), (144, 216));
        assert_eq!(t(480, 850).target(), (120, 214));
        assert!(!t(480, 560).fallback);
    }

    #[test]
    fn square_input_falls_back() {
        let s = select_resolution_rule(640, 640, &default_resolution_rules()).unwrap();
        assert!(s.fallback);
        assert_eq!(s.target(), (224, 224));
        assert_eq!(fallback_rule(1280, 720).dst_w, 224);
        assert_eq!(fallback_rule(1280, 720).dst_h, 126);
        assert_eq!(fallback_rule(720, 1280).dst_h, 224);
    }

    #[test]
    fn overlapping_rules_are_ambiguous() {
        let mut rules = default_resolution_rules();
        rules.push(ResolutionRule::new([480, 500], [560, 600], 100, 200));
        assert!(matches!(validate_rules(&rules), Err(MediaError::AmbiguousRules { .. })));
        assert!(matches!(
            select_resolution_rule(485, 565, &rules),
            Err(MediaError::AmbiguousRules { first: 0, second: 4, .. })
        ));
    }

    #[test]
    fn orientation_flip_rejected() {
        let r = ResolutionRule::new([470, 490], [550, 570], 224, 180);
        assert!(matches!(
            validate_rules(&[r]),
            Err(MediaError::InvalidRule { index: 0, .. })
        ));
        assert!(ResolutionRule::new([10, 5], [1, 2], 1, 1).validate().is_err());
        assert!(ResolutionRule::new([1, 2], [1, 2], 0, 1).validate().is_err());
    }

    #[test]
    fn frame_timestamps() {
        assert_eq!(
            FramePolicy::FixedCount(10).timestamps(60_000).unwrap(),
            (0..10).map(|i| i * 6000).collect::<Vec<_>>()
        );
        assert_eq!(FramePolicy::IntervalMs(400).timestamps(1000).unwrap(), vec![0, 400, 800]);
        assert!(FramePolicy::FixedCount(0).timestamps(10).is_err());
        assert!(FramePolicy::IntervalMs(0).timestamps(10).is_err());
        assert!(FramePolicy::FixedCount(11).timestamps(10).is_err());
    }

    #[test]
    fn center_crop_stub_definition() {
        let frame = RgbImage::new(120, 80);
        let b = CenterCropDetector.detect(&frame).unwrap();
        assert_eq!(b, vec![BBox { x: 20, y: 0, w: 80, h: 80 }]);
    }

    #[test]
    fn blob_detector_ignores_uniform_frames() {
        let black = RgbImage::new(64, 64);
        assert!(BlobFaceDetector::default().detect(&black).unwrap().is_empty());
        let batch = FrameBatch {
            asset_id: "a".into(),
            timestamps_ms: vec![0],
            frames: vec![black],
        };
        assert!(detect_faces(&batch, &BlobFaceDetector::default()).unwrap().is_empty());
    }

    #[test]
    fn blob_detector_finds_synthetic_face() {
        let truth = BBox { x: 50, y: 30, w: 44, h: 56 };
        let frame = synth::face_frame(160, 120, truth, 0.0);
        let batch = FrameBatch {
            asset_id: "a".into(),
            timestamps_ms: vec![0],
            frames: vec![frame],
        };
        let crops = detect_faces(&batch, &BlobFaceDetector::default()).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].crop.dimensions(), (48, 48));
        let iou = crops[0].bbox.iou(&truth);
        assert!(iou >= 0.5, "iou {iou}");
    }

    #[test]
    fn crops_are_48_square_for_any_frame_size() {
        for (w, h) in [(31, 97), (224, 224), (640, 360), (1, 1)] {
            let batch = FrameBatch {
                asset_id: "a".into(),
                timestamps_ms: vec![0],
                frames: vec![RgbImage::new(w, h)],
            };
            let crops = detect_faces(&batch, &CenterCropDetector).unwrap();
            assert_eq!(crops.len(), 1);
            assert_eq!(crops[0].crop.dimensions(), (48, 48));
        }
    }

    #[test]
    fn missing_command_detector_is_unavailable_unless_fallback() {
        let p = Path::new("/nonexistent/detector");
        assert!(matches!(
            build_detector(&DetectorKind::Command, Some(p), false),
            Err(MediaError::DetectorUnavailable(_))
        ));
        let d = build_detector(&DetectorKind::Command, Some(p), true).unwrap();
        assert_eq!(d.name(), "center");
    }

    fn write_clip(dir: &Path, w: u32, h: u32, secs: u32, rate: u32, channels: u16) -> PathBuf {
        let fps = 5;
        let frames: Vec<_> = (0..secs * fps)
            .map(|i| RgbImage::from_pixel(w, h, image::Rgb([i as u8, 0, 0])))
            .collect();
        let n = (secs * rate) as usize;
        let samples: Vec<i16> = (0..n * channels as usize).map(|i| ((i * 37) % 2000) as i16 - 1000).collect();
        let audio = crate::audio::PcmAudio {
            sample_rate: rate,
            channels,
            samples,
        };
        let path = dir.join(format!("clip_{w}x{h}_{rate}_{channels}.avi"));
        write_avi(&path, fps, 1, &frames, Some(&audio)).unwrap();
        path
    }

    #[test]
    fn normalize_resamples_and_downmixes() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_clip(dir.path(), 48, 56, 2, 44_100, 2);
        let asset = normalize_container(&src, &dir.path().join("w"), &Transcoder::none(), None).unwrap();
        assert_eq!((asset.width_px, asset.height_px), (48, 56));
        assert_eq!(asset.duration_ms, 2000);
        let pcm = crate::audio::read_wav(&asset.audio_path).unwrap();
        assert_eq!((pcm.sample_rate, pcm.channels), (16_000, 1));
        assert_eq!(pcm.samples.len(), 32_000);
    }

    #[test]
    fn normalize_passes_through_mono_16k() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_clip(dir.path(), 32, 24, 2, 16_000, 1);
        let original = AviReader::open(&src).unwrap().read_audio().unwrap().unwrap();
        let asset = normalize_container(&src, &dir.path().join("w"), &Transcoder::none(), None).unwrap();
        let pcm = crate::audio::read_wav(&asset.audio_path).unwrap();
        assert_eq!(pcm.samples, original.samples);
    }

    #[test]
    fn normalize_error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let fake = dir.path().join("fake.mp4");
        std::fs::write(&fake, "this is text").unwrap();
        assert!(matches!(
            normalize_container(&fake, &dir.path().join("w1"), &Transcoder::none(), None),
            Err(MediaError::UnreadableMedia(_))
        ));
        let silent = dir.path().join("noaudio.avi");
        write_avi(&silent, 5, 1, &[RgbImage::new(8, 8)], None).unwrap();
        assert!(matches!(
            normalize_container(&silent, &dir.path().join("w2"), &Transcoder::none(), None),
            Err(MediaError::NoAudioStream)
        ));
    }

    #[test]
    fn extract_frames_rescales_to_rule() {
        let dir = tempfile::tempdir().unwrap();
        let src = write_clip(dir.path(), 48, 64, 3, 16_000, 1);
        let asset = normalize_container(&src, &dir.path().join("w"), &Transcoder::none(), None).unwrap();
        let batch = extract_frames(&asset, FramePolicy::FixedCount(3), &default_resolution_rules()).unwrap();
        assert_eq!(batch.timestamps_ms, vec![0, 1000, 2000]);
        // 48x64 has no configured rule: longer side scaled to 224.
        for f in &batch.frames {
            assert_eq!(f.dimensions(), (168, 224));
        }
        // Deterministic.
        let again = extract_frames(&asset, FramePolicy::FixedCount(3), &default_resolution_rules()).unwrap();
        assert_eq!(batch, again);
    }
}
