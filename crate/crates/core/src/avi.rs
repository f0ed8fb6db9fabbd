//! Reader and writer for uncompressed RIFF/AVI files: `BI_RGB` 24/32-bit
//! video plus optional 16-bit PCM audio. This is the normalized video form the
//! pipeline consumes; anything else goes through the external transcoder.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use thiserror::Error;

use crate::audio::{self, PcmAudio};
use crate::riff;

#[derive(Debug, Error)]
pub enum AviError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a RIFF/AVI file")]
    NotAvi,
    #[error("malformed avi: {0}")]
    Malformed(String),
    #[error("unsupported video encoding: compression {compression:#x}, {bits} bits")]
    UnsupportedVideo { compression: u32, bits: u16 },
    #[error("frame {0} out of range")]
    FrameOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoFormat {
    pub width: u32,
    pub height: u32,
    pub bits_per_pixel: u16,
    pub top_down: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ChunkRef {
    offset: u64,
    len: u32,
}

#[derive(Debug, Clone, Copy)]
struct AudioFormat {
    channels: u16,
    sample_rate: u32,
    format_tag: u16,
    bits: u16,
}

/// An opened AVI file. Frame and audio payloads are read lazily.
#[derive(Debug)]
pub struct AviReader {
    path: PathBuf,
    video: Option<(u32, VideoFormat)>,
    /// Frame rate as `rate / scale`.
    pub fps_num: u32,
    pub fps_den: u32,
    audio: Option<(u32, AudioFormat)>,
    frames: Vec<ChunkRef>,
    audio_chunks: Vec<ChunkRef>,
}

struct StreamHeader {
    kind: [u8; 4],
    scale: u32,
    rate: u32,
}

impl AviReader {
    pub fn open(path: &Path) -> Result<Self, AviError> {
        let mut f = File::open(path)?;
        let file_len = f.metadata()?.len();
        let mut head = [0u8; 12];
        if f.read_exact(&mut head).is_err() || &head[0..4] != b"RIFF" || &head[8..12] != b"AVI " {
            return Err(AviError::NotAvi);
        }
        let riff_end = (8 + riff::le_u32(&head[4..]) as u64).min(file_len);

        let mut reader = AviReader {
            path: path.to_path_buf(),
            video: None,
            fps_num: 0,
            fps_den: 1,
            audio: None,
            frames: Vec::new(),
            audio_chunks: Vec::new(),
        };
        let mut pos = 12u64;
        while pos + 8 <= riff_end {
            let (id, len) = read_header(&mut f, pos)?;
            let body = pos + 8;
            if body + len as u64 > file_len {
                return Err(AviError::Malformed(format!(
                    "chunk {} overruns file",
                    String::from_utf8_lossy(&id)
                )));
            }
            if &id == b"LIST" {
                let mut form = [0u8; 4];
                f.read_exact(&mut form)?;
                match &form {
                    b"hdrl" => {
                        let mut buf = vec![0u8; len as usize];
                        f.seek(SeekFrom::Start(body))?;
                        f.read_exact(&mut buf)?;
                        reader.parse_hdrl(&buf)?;
                    }
                    b"movi" => reader.index_movi(&mut f, body + 4, body + len as u64)?,
                    _ => {}
                }
            }
            pos = body + len as u64 + (len as u64 & 1);
        }
        if reader.video.is_none() && reader.audio.is_none() {
            return Err(AviError::Malformed("no streams declared".into()));
        }
        Ok(reader)
    }

    fn parse_hdrl(&mut self, hdrl: &[u8]) -> Result<(), AviError> {
        let list = riff::Chunk {
            id: *b"LIST",
            data: hdrl,
            offset: 0,
        };
        let mut stream_index = 0u32;
        for c in list.children() {
            let c = c.map_err(AviError::Malformed)?;
            if !c.is_list(b"strl") {
                continue;
            }
            let mut strh = None;
            let mut strf = None;
            for s in c.children() {
                let s = s.map_err(AviError::Malformed)?;
                match &s.id {
                    b"strh" if s.data.len() >= 28 => {
                        strh = Some(StreamHeader {
                            kind: [s.data[0], s.data[1], s.data[2], s.data[3]],
                            scale: riff::le_u32(&s.data[20..]),
                            rate: riff::le_u32(&s.data[24..]),
                        })
                    }
                    b"strf" => strf = Some(s.data),
                    _ => {}
                }
            }
            let (Some(h), Some(fmt)) = (strh, strf) else {
                return Err(AviError::Malformed("stream without strh/strf".into()));
            };
            match &h.kind {
                b"vids" if self.video.is_none() => {
                    if fmt.len() < 40 {
                        return Err(AviError::Malformed("short BITMAPINFOHEADER".into()));
                    }
                    let width = riff::le_i32(&fmt[4..]);
                    let height = riff::le_i32(&fmt[8..]);
                    let bits = riff::le_u16(&fmt[14..]);
                    let compression = riff::le_u32(&fmt[16..]);
                    if compression != 0 || !(bits == 24 || bits == 32) {
                        return Err(AviError::UnsupportedVideo { compression, bits });
                    }
                    if width <= 0 || height == 0 {
                        return Err(AviError::Malformed("non-positive frame size".into()));
                    }
                    if h.rate == 0 || h.scale == 0 {
                        return Err(AviError::Malformed("zero frame rate".into()));
                    }
                    self.fps_num = h.rate;
                    self.fps_den = h.scale;
                    self.video = Some((
                        stream_index,
                        VideoFormat {
                            width: width as u32,
                            height: height.unsigned_abs(),
                            bits_per_pixel: bits,
                            top_down: height < 0,
                        },
                    ));
                }
                b"auds" if self.audio.is_none() => {
                    let wf = audio::parse_wave_format(fmt).map_err(AviError::Malformed)?;
                    self.audio = Some((
                        stream_index,
                        AudioFormat {
                            channels: wf.channels,
                            sample_rate: wf.sample_rate,
                            format_tag: wf.format_tag,
                            bits: wf.bits_per_sample,
                        },
                    ));
                }
                _ => {}
            }
            stream_index += 1;
        }
        Ok(())
    }

    fn index_movi(&mut self, f: &mut File, start: u64, end: u64) -> Result<(), AviError> {
        let mut pos = start;
        while pos + 8 <= end {
            let (id, len) = read_header(f, pos)?;
            let body = pos + 8;
            if body + len as u64 > end {
                return Err(AviError::Malformed("movi chunk overruns list".into()));
            }
            if &id == b"LIST" {
                // `rec ` groupings: descend.
                self.index_movi(f, body + 4, body + len as u64)?;
            } else if let Some(stream) = stream_number(&id) {
                let r = ChunkRef { offset: body, len };
                if self.video.map(|(i, _)| i) == Some(stream) && (id[2..] == *b"db" || id[2..] == *b"dc") {
                    self.frames.push(r);
                } else if self.audio.map(|(i, _)| i) == Some(stream) && id[2..] == *b"wb" {
                    self.audio_chunks.push(r);
                }
            }
            pos = body + len as u64 + (len as u64 & 1);
        }
        Ok(())
    }

    pub fn has_video(&self) -> bool {
        self.video.is_some()
    }

    pub fn has_audio(&self) -> bool {
        self.audio.is_some()
    }

    pub fn video_format(&self) -> Option<VideoFormat> {
        self.video.map(|(_, v)| v)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Video duration in milliseconds (frames / fps).
    pub fn video_duration_ms(&self) -> u64 {
        if self.fps_num == 0 {
            return 0;
        }
        self.frames.len() as u64 * self.fps_den as u64 * 1000 / self.fps_num as u64
    }

    pub fn read_frame(&self, index: usize) -> Result<RgbImage, AviError> {
        let fmt = self.video_format().ok_or(AviError::FrameOutOfRange(index))?;
        let r = *self.frames.get(index).ok_or(AviError::FrameOutOfRange(index))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(r.offset))?;
        let mut buf = vec![0u8; r.len as usize];
        f.read_exact(&mut buf)?;
        decode_dib(&fmt, &buf)
    }

    /// Whole audio stream as interleaved PCM.
    pub fn read_audio(&self) -> Result<Option<PcmAudio>, AviError> {
        let Some((_, fmt)) = self.audio else {
            return Ok(None);
        };
        let mut f = File::open(&self.path)?;
        let mut data = Vec::new();
        for r in &self.audio_chunks {
            f.seek(SeekFrom::Start(r.offset))?;
            let start = data.len();
            data.resize(start + r.len as usize, 0);
            f.read_exact(&mut data[start..])?;
        }
        let wf = audio::WaveFormat {
            format_tag: fmt.format_tag,
            channels: fmt.channels,
            sample_rate: fmt.sample_rate,
            bits_per_sample: fmt.bits,
        };
        let samples = audio::decode_pcm16(&wf, &data).map_err(|_| {
            AviError::Malformed(format!(
                "audio stream is not 16-bit PCM (tag {}, {} bits)",
                fmt.format_tag, fmt.bits
            ))
        })?;
        Ok(Some(PcmAudio {
            sample_rate: fmt.sample_rate,
            channels: fmt.channels,
            samples,
        }))
    }
}

fn read_header(f: &mut File, pos: u64) -> Result<([u8; 4], u32), AviError> {
    let mut h = [0u8; 8];
    f.seek(SeekFrom::Start(pos))?;
    f.read_exact(&mut h)
        .map_err(|_| AviError::Malformed("truncated chunk header".into()))?;
    Ok(([h[0], h[1], h[2], h[3]], riff::le_u32(&h[4..])))
}

fn stream_number(id: &[u8; 4]) -> Option<u32> {
    let d0 = (id[0] as char).to_digit(10)?;
    let d1 = (id[1] as char).to_digit(10)?;
    Some(d0 * 10 + d1)
}

fn row_stride(width: u32, bits: u16) -> usize {
    (width as usize * bits as usize).div_ceil(32) * 4
}

fn decode_dib(fmt: &VideoFormat, buf: &[u8]) -> Result<RgbImage, AviError> {
    let stride = row_stride(fmt.width, fmt.bits_per_pixel);
    let bpp = fmt.bits_per_pixel as usize / 8;
    if buf.len() < stride * fmt.height as usize {
        return Err(AviError::Malformed(format!(
            "frame payload {} bytes, expected {}",
            buf.len(),
            stride * fmt.height as usize
        )));
    }
    let mut img = RgbImage::new(fmt.width, fmt.height);
    for y in 0..fmt.height {
        let src_row = if fmt.top_down { y } else { fmt.height - 1 - y } as usize;
        let row = &buf[src_row * stride..];
        for x in 0..fmt.width {
            let p = &row[x as usize * bpp..];
            img.put_pixel(x, y, image::Rgb([p[2], p[1], p[0]]));
        }
    }
    Ok(img)
}

fn encode_dib(img: &RgbImage) -> Vec<u8> {
    let stride = row_stride(img.width(), 24);
    let mut out = vec![0u8; stride * img.height() as usize];
    for y in 0..img.height() {
        let row = &mut out[(img.height() - 1 - y) as usize * stride..];
        for x in 0..img.width() {
            let p = img.get_pixel(x, y).0;
            let o = x as usize * 3;
            row[o] = p[2];
            row[o + 1] = p[1];
            row[o + 2] = p[0];
        }
    }
    out
}

/// Writes frames (all the same size) and optional PCM audio as an uncompressed AVI.
pub fn write_avi(
    path: &Path,
    fps_num: u32,
    fps_den: u32,
    frames: &[RgbImage],
    audio: Option<&PcmAudio>,
) -> Result<(), AviError> {
    let (width, height) = frames
        .first()
        .map(|f| f.dimensions())
        .ok_or_else(|| AviError::Malformed("no frames to write".into()))?;
    if frames.iter().any(|f| f.dimensions() != (width, height)) {
        return Err(AviError::Malformed("frames differ in size".into()));
    }
    let frame_bytes = row_stride(width, 24) * height as usize;
    let n_streams = if audio.is_some() { 2 } else { 1 };
    let usec_per_frame = (1_000_000u64 * fps_den as u64 / fps_num.max(1) as u64) as u32;

    let mut avih = Vec::with_capacity(56);
    for v in [
        usec_per_frame,
        (frame_bytes as u64 * fps_num as u64 / fps_den.max(1) as u64) as u32,
        0,
        0x10, // AVIF_HASINDEX
        frames.len() as u32,
        0,
        n_streams,
        frame_bytes as u32,
        width,
        height,
        0,
        0,
        0,
        0,
    ] {
        avih.extend_from_slice(&v.to_le_bytes());
    }

    let mut vstrh = Vec::with_capacity(56);
    vstrh.extend_from_slice(b"vids");
    vstrh.extend_from_slice(b"\0\0\0\0");
    for v in [0u32, 0, 0, fps_den, fps_num, 0, frames.len() as u32, frame_bytes as u32, u32::MAX, 0] {
        vstrh.extend_from_slice(&v.to_le_bytes());
    }
    vstrh.extend_from_slice(&[0u8; 8]);
    let mut vstrf = Vec::with_capacity(40);
    vstrf.extend_from_slice(&40u32.to_le_bytes());
    vstrf.extend_from_slice(&(width as i32).to_le_bytes());
    vstrf.extend_from_slice(&(height as i32).to_le_bytes());
    vstrf.extend_from_slice(&1u16.to_le_bytes());
    vstrf.extend_from_slice(&24u16.to_le_bytes());
    vstrf.extend_from_slice(&0u32.to_le_bytes());
    vstrf.extend_from_slice(&(frame_bytes as u32).to_le_bytes());
    vstrf.extend_from_slice(&[0u8; 16]);
    let mut vstrl = riff::chunk_bytes(b"strh", &vstrh);
    vstrl.extend(riff::chunk_bytes(b"strf", &vstrf));
    let mut hdrl_body = riff::chunk_bytes(b"avih", &avih);
    hdrl_body.extend(riff::list_bytes(b"LIST", b"strl", &vstrl));

    // Audio is spread evenly across frames so the file is interleaved.
    let mut audio_split: Vec<&[i16]> = Vec::new();
    if let Some(a) = audio {
        let ch = a.channels.max(1) as usize;
        let total_frames = a.frames();
        let mut prev = 0usize;
        for i in 0..frames.len() {
            let next = total_frames * (i + 1) / frames.len();
            audio_split.push(&a.samples[prev * ch..next * ch]);
            prev = next;
        }
        let block_align = a.channels as u32 * 2;
        let mut astrh = Vec::with_capacity(56);
        astrh.extend_from_slice(b"auds");
        astrh.extend_from_slice(b"\0\0\0\0");
        for v in [
            0u32,
            0,
            0,
            1,
            a.sample_rate,
            0,
            total_frames as u32,
            block_align * a.sample_rate / 10,
            u32::MAX,
            block_align,
        ] {
            astrh.extend_from_slice(&v.to_le_bytes());
        }
        astrh.extend_from_slice(&[0u8; 8]);
        let mut astrl = riff::chunk_bytes(b"strh", &astrh);
        astrl.extend(riff::chunk_bytes(
            b"strf",
            &audio::wave_format_bytes(a.sample_rate, a.channels),
        ));
        hdrl_body.extend(riff::list_bytes(b"LIST", b"strl", &astrl));
    }

    let mut movi = Vec::new();
    let mut idx1 = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let offset = movi.len() as u32 + 4;
        let dib = encode_dib(frame);
        idx1.extend_from_slice(b"00db");
        idx1.extend_from_slice(&0x10u32.to_le_bytes());
        idx1.extend_from_slice(&offset.to_le_bytes());
        idx1.extend_from_slice(&(dib.len() as u32).to_le_bytes());
        movi.extend(riff::chunk_bytes(b"00db", &dib));
        if let Some(samples) = audio_split.get(i) {
            let offset = movi.len() as u32 + 4;
            let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
            idx1.extend_from_slice(b"01wb");
            idx1.extend_from_slice(&0x10u32.to_le_bytes());
            idx1.extend_from_slice(&offset.to_le_bytes());
            idx1.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            movi.extend(riff::chunk_bytes(b"01wb", &bytes));
        }
    }

    let mut body = riff::list_bytes(b"LIST", b"hdrl", &hdrl_body);
    body.extend(riff::list_bytes(b"LIST", b"movi", &movi));
    body.extend(riff::chunk_bytes(b"idx1", &idx1));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&riff::list_bytes(b"RIFF", b"AVI ", &body))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32, k: u8) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8 * 3, y as u8 * 5, k]))
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.avi");
        // Odd width exercises row padding.
        let frames: Vec<_> = (0..4).map(|k| gradient(13, 7, k * 10)).collect();
        let audio = PcmAudio {
            sample_rate: 8000,
            channels: 2,
            samples: (0..8000).map(|i| (i % 300) as i16 - 150).collect(),
        };
        write_avi(&path, 4, 1, &frames, Some(&audio)).unwrap();
        let r = AviReader::open(&path).unwrap();
        assert_eq!(r.frame_count(), 4);
        assert_eq!((r.fps_num, r.fps_den), (4, 1));
        assert_eq!(r.video_duration_ms(), 1000);
        let fmt = r.video_format().unwrap();
        assert_eq!((fmt.width, fmt.height), (13, 7));
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(&r.read_frame(i).unwrap(), f);
        }
        assert_eq!(r.read_audio().unwrap().unwrap(), audio);
        assert!(matches!(r.read_frame(4), Err(AviError::FrameOutOfRange(4))));
    }

    #[test]
    fn video_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.avi");
        write_avi(&path, 25, 1, &[gradient(8, 8, 0)], None).unwrap();
        let r = AviReader::open(&path).unwrap();
        assert!(r.has_video());
        assert!(!r.has_audio());
        assert!(r.read_audio().unwrap().is_none());
    }

    #[test]
    fn text_file_is_not_avi() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mp4");
        std::fs::write(&path, "just some text pretending to be a video").unwrap();
        assert!(matches!(AviReader::open(&path), Err(AviError::NotAvi)));
    }
}
