//! Utterance transcription through a pluggable speech-recognition backend,
//! and the timestamped JSON-lines transcript format.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, MonoAudio};
use crate::segmenter::UtteranceSegment;

/// Environment variable pointing at the ASR backend's weights.
pub const ASR_MODEL_ENV: &str = "MSEVA_ASR_MODEL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsrTask {
    Recognize,
    TranslateToEnglish,
}

impl AsrTask {
    /// Translate unless the source is already English.
    pub fn default_for(language_hint: Option<&str>) -> Self {
        match language_hint {
            Some(l) if l == "en" || l.starts_with("en-") => AsrTask::Recognize,
            _ => AsrTask::TranslateToEnglish,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AsrTask::Recognize => "recognize",
            AsrTask::TranslateToEnglish => "translate-to-english",
        }
    }
}

impl std::str::FromStr for AsrTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recognize" | "transcribe" => Ok(AsrTask::Recognize),
            "translate" | "translate-to-english" => Ok(AsrTask::TranslateToEnglish),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("{0} clips but {1} segments")]
    CountMismatch(usize, usize),
    #[error("backend {backend} does not support {task:?}")]
    UnsupportedTask { backend: String, task: AsrTask },
    #[error("backend failed on segment {index}: {cause}")]
    BackendFailure { index: usize, cause: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("io: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("line {0}: malformed transcript line: {1}")]
    MalformedLine(usize, String),
    #[error("transcript invariant violated: {0}")]
    InvariantViolation(String),
}

/// A speech-recognition backend. Implementations must be deterministic for a
/// fixed configuration.
pub trait AsrBackend: Send + Sync {
    fn name(&self) -> &str;
    fn supports(&self, task: AsrTask) -> bool;
    /// How many clips may be in flight at once; `1` for non-reentrant backends.
    fn max_concurrency(&self) -> usize {
        1
    }
    fn transcribe(&self, clip: &MonoAudio, task: AsrTask, language_hint: Option<&str>) -> Result<String, String>;
}

/// Test backend whose "transcript" is the clip duration in milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoStub;

impl AsrBackend for EchoStub {
    fn name(&self) -> &str {
        "echo-stub"
    }

    fn supports(&self, _task: AsrTask) -> bool {
        true
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn transcribe(&self, clip: &MonoAudio, _task: AsrTask, _language_hint: Option<&str>) -> Result<String, String> {
        Ok(clip.duration_ms().to_string())
    }
}

/// Runs an external recognizer once per clip:
/// `<program> --model <weights> --task <recognize|translate> [--language <tag>] <clip.wav>`.
/// The transcript is read from stdout.
#[derive(Debug, Clone)]
pub struct CommandAsr {
    program: PathBuf,
    model: Option<PathBuf>,
    scratch: PathBuf,
    concurrency: usize,
    counter: std::sync::Arc<AtomicUsize>,
}

impl CommandAsr {
    pub fn new(program: PathBuf, model: Option<PathBuf>, concurrency: usize) -> Result<Self, TranscribeError> {
        if !program.is_file() {
            return Err(TranscribeError::BackendUnavailable(format!(
                "{} not found",
                program.display()
            )));
        }
        let scratch = std::env::temp_dir().join(format!("mseva-asr-{}", std::process::id()));
        std::fs::create_dir_all(&scratch)?;
        Ok(CommandAsr {
            program,
            model: model.or_else(|| std::env::var_os(ASR_MODEL_ENV).map(PathBuf::from)),
            scratch,
            concurrency: concurrency.max(1),
            counter: Default::default(),
        })
    }
}

impl AsrBackend for CommandAsr {
    fn name(&self) -> &str {
        "command"
    }

    fn supports(&self, _task: AsrTask) -> bool {
        true
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }

    fn transcribe(&self, clip: &MonoAudio, task: AsrTask, language_hint: Option<&str>) -> Result<String, String> {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let wav = self.scratch.join(format!("clip-{n}.wav"));
        audio::write_mono_wav(&wav, clip).map_err(|e| e.to_string())?;
        let mut cmd = Command::new(&self.program);
        if let Some(m) = &self.model {
            cmd.arg("--model").arg(m);
        }
        cmd.arg("--task").arg(match task {
            AsrTask::Recognize => "recognize",
            AsrTask::TranslateToEnglish => "translate",
        });
        if let Some(l) = language_hint {
            cmd.arg("--language").arg(l);
        }
        let out = cmd.arg(&wav).output().map_err(|e| e.to_string());
        let _ = std::fs::remove_file(&wav);
        let out = out?;
        if !out.status.success() {
            return Err(format!(
                "exit {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        String::from_utf8(out.stdout)
            .map(|s| s.trim().to_string())
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub asset_id: String,
    pub segments: Vec<UtteranceSegment>,
    pub task: AsrTask,
    pub backend_name: String,
}

impl Transcript {
    pub fn validate(&self) -> Result<(), TranscribeError> {
        validate_segments(&self.segments)
    }
}

pub fn validate_segments(segments: &[UtteranceSegment]) -> Result<(), TranscribeError> {
    for (i, s) in segments.iter().enumerate() {
        if s.index != i {
            return Err(TranscribeError::InvariantViolation(format!(
                "segment at position {i} has index {}",
                s.index
            )));
        }
        if s.start_ms >= s.end_ms {
            return Err(TranscribeError::InvariantViolation(format!(
                "segment {i}: start_ms {} >= end_ms {}",
                s.start_ms, s.end_ms
            )));
        }
        if i > 0 && s.start_ms < segments[i - 1].end_ms {
            return Err(TranscribeError::InvariantViolation(format!(
                "segment {i} overlaps segment {}",
                i - 1
            )));
        }
    }
    Ok(())
}

/// Transcribes every clip, preserving order. Any backend failure fails the
/// whole call; the lowest failing index is reported.
pub fn transcribe_segments(
    asset_id: &str,
    clips: &[MonoAudio],
    segments: &[UtteranceSegment],
    backend: &dyn AsrBackend,
    task: AsrTask,
    language_hint: Option<&str>,
    max_workers: usize,
) -> Result<Transcript, TranscribeError> {
    if clips.len() != segments.len() {
        return Err(TranscribeError::CountMismatch(clips.len(), segments.len()));
    }
    if !backend.supports(task) {
        return Err(TranscribeError::UnsupportedTask {
            backend: backend.name().to_string(),
            task,
        });
    }
    let workers = max_workers.max(1).min(backend.max_concurrency().max(1)).min(clips.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<Result<String, String>>> = vec![None; clips.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= clips.len() {
                            break;
                        }
                        local.push((i, backend.transcribe(&clips[i], task, language_hint)));
                    }
                    local
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("transcription worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut out = Vec::with_capacity(segments.len());
    for (i, (seg, r)) in segments.iter().zip(results).enumerate() {
        match r.expect("every clip is visited") {
            Ok(text) => out.push(UtteranceSegment {
                text,
                ..seg.clone()
            }),
            Err(cause) => return Err(TranscribeError::BackendFailure { index: i, cause }),
        }
    }
    Ok(Transcript {
        asset_id: asset_id.to_string(),
        segments: out,
        task,
        backend_name: backend.name().to_string(),
    })
}

/// One transcript line. Field order is alphabetical so the serialization
/// has sorted keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscriptLine {
    end_ms: u64,
    index: usize,
    start_ms: u64,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct TranscriptMeta {
    asset_id: String,
    backend_name: String,
    task: AsrTask,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Serializes segments as JSON lines.
pub fn transcript_lines(segments: &[UtteranceSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        let line = TranscriptLine {
            end_ms: s.end_ms,
            index: s.index,
            start_ms: s.start_ms,
            text: s.text.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

/// Writes the JSON-lines transcript plus a `<path>.meta.json` sidecar
/// carrying asset id, task and backend.
pub fn write_transcript(t: &Transcript, path: &Path) -> Result<(), TranscribeError> {
    t.validate()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(transcript_lines(&t.segments).as_bytes())?;
    f.sync_all()?;
    let meta = TranscriptMeta {
        asset_id: t.asset_id.clone(),
        backend_name: t.backend_name.clone(),
        task: t.task,
    };
    std::fs::write(meta_path(path), serde_json::to_vec(&meta).expect("serializes"))?;
    Ok(())
}

pub fn parse_transcript_lines(text: &str) -> Result<Vec<UtteranceSegment>, TranscribeError> {
    let mut segments = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: TranscriptLine =
            serde_json::from_str(line).map_err(|e| TranscribeError::MalformedLine(n + 1, e.to_string()))?;
        segments.push(UtteranceSegment {
            index: l.index,
            start_ms: l.start_ms,
            end_ms: l.end_ms,
            text: l.text,
        });
    }
    validate_segments(&segments)?;
    Ok(segments)
}

/// Inverse of [`write_transcript`]. Without a sidecar the metadata defaults
/// to an empty asset id, `recognize`, and backend `unknown`.
pub fn read_transcript(path: &Path) -> Result<Transcript, TranscribeError> {
    let text = std::fs::read_to_string(path)?;
    let segments = parse_transcript_lines(&text)?;
    let meta = match std::fs::read(meta_path(path)) {
        Ok(bytes) => serde_json::from_slice::<TranscriptMeta>(&bytes)
            .map_err(|e| TranscribeError::MalformedLine(0, format!("sidecar: {e}")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => TranscriptMeta {
            asset_id: String::new(),
            backend_name: "unknown".into(),
            task: AsrTask::Recognize,
        },
        Err(e) => return Err(e.into()),
    };
    Ok(Transcript {
        asset_id: meta.asset_id,
        segments,
        task: meta.task,
        backend_name: meta.backend_name,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(index: usize, start_ms: u64, end_ms: u64, text: &str) -> UtteranceSegment {
        UtteranceSegment {
            index,
            start_ms,
            end_ms,
            text: text.to_string(),
        }
    }

    fn silent(ms: u64) -> MonoAudio {
        MonoAudio {
            sample_rate: 16_000,
            samples: vec![0; ms as usize * 16],
        }
    }

    #[test]
    fn echo_stub_reports_durations() {
        let segs = vec![seg(0, 0, 2000, ""), seg(1, 3000, 4500, ""), seg(2, 5000, 6800, "")];
        let clips: Vec<_> = segs.iter().map(|s| silent(s.duration_ms())).collect();
        let t = transcribe_segments("a", &clips, &segs, &EchoStub, AsrTask::Recognize, None, 4).unwrap();
        let texts: Vec<_> = t.segments.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["2000", "1500", "1800"]);
        for (a, b) in t.segments.iter().zip(&segs) {
            assert_eq!((a.index, a.start_ms, a.end_ms), (b.index, b.start_ms, b.end_ms));
        }
        assert_eq!(t.backend_name, "echo-stub");
    }

    #[test]
    fn zero_segments() {
        let t = transcribe_segments("a", &[], &[], &EchoStub, AsrTask::TranslateToEnglish, None, 2).unwrap();
        assert!(t.segments.is_empty());
    }

    struct FailOn(usize);
    impl AsrBackend for FailOn {
        fn name(&self) -> &str {
            "fail"
        }
        fn supports(&self, _: AsrTask) -> bool {
            true
        }
        fn max_concurrency(&self) -> usize {
            8
        }
        fn transcribe(&self, clip: &MonoAudio, _: AsrTask, _: Option<&str>) -> Result<String, String> {
            if clip.duration_ms() == self.0 as u64 {
                Err("boom".into())
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn failure_is_atomic() {
        let segs: Vec<_> = (0..6).map(|i| seg(i, i as u64 * 1000, i as u64 * 1000 + 100 + i as u64, "")).collect();
        let clips: Vec<_> = segs.iter().map(|s| silent(s.duration_ms())).collect();
        let err = transcribe_segments("a", &clips, &segs, &FailOn(103), AsrTask::Recognize, None, 3).unwrap_err();
        assert!(matches!(err, TranscribeError::BackendFailure { index: 3, .. }));
    }

    #[test]
    fn count_mismatch() {
        let err = transcribe_segments("a", &[silent(10)], &[], &EchoStub, AsrTask::Recognize, None, 1).unwrap_err();
        assert!(matches!(err, TranscribeError::CountMismatch(1, 0)));
    }

    #[test]
    fn default_task_follows_language() {
        assert_eq!(AsrTask::default_for(Some("en")), AsrTask::Recognize);
        assert_eq!(AsrTask::default_for(Some("en-US")), AsrTask::Recognize);
        assert_eq!(AsrTask::default_for(Some("zh")), AsrTask::TranslateToEnglish);
        assert_eq!(AsrTask::default_for(None), AsrTask::TranslateToEnglish);
    }

    #[test]
    fn line_format_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let t = Transcript {
            asset_id: "x".into(),
            segments: vec![seg(0, 0, 1000, "hi")],
            task: AsrTask::Recognize,
            backend_name: "echo-stub".into(),
        };
        write_transcript(&t, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "{\"end_ms\":1000,\"index\":0,\"start_ms\":0,\"text\":\"hi\"}\n"
        );
        assert_eq!(read_transcript(&p).unwrap(), t);
    }

    #[test]
    fn empty_transcript_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let t = Transcript {
            asset_id: "x".into(),
            segments: vec![],
            task: AsrTask::TranslateToEnglish,
            backend_name: "b".into(),
        };
        write_transcript(&t, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert_eq!(read_transcript(&p).unwrap(), t);
    }

    #[test]
    fn read_rejects_bad_input() {
        let bad = "{\"end_ms\":100,\"index\":0,\"start_ms\":500,\"text\":\"\"}\n";
        assert!(matches!(parse_transcript_lines(bad), Err(TranscribeError::InvariantViolation(_))));
        let overlap = "{\"end_ms\":1000,\"index\":0,\"start_ms\":0,\"text\":\"a\"}\n\
                       {\"end_ms\":2000,\"index\":1,\"start_ms\":900,\"text\":\"b\"}\n";
        assert!(matches!(parse_transcript_lines(overlap), Err(TranscribeError::InvariantViolation(_))));
        let garbage = "{\"end_ms\":1000,\"index\":0,\"start_ms\":0,\"text\":\"a\"}\nnot json\n";
        assert!(matches!(parse_transcript_lines(garbage), Err(TranscribeError::MalformedLine(2, _))));
    }

    #[test]
    fn hand_written_fixture() {
        let text = "{\"end_ms\":1500,\"index\":0,\"start_ms\":200,\"text\":\"one\"}\n\
                    {\"end_ms\":3600,\"index\":1,\"start_ms\":2500,\"text\":\"two\"}\n\
                    {\"end_ms\":6100,\"index\":2,\"start_ms\":4700,\"text\":\"三\"}\n";
        let segs = parse_transcript_lines(text).unwrap();
        assert_eq!(segs, vec![seg(0, 200, 1500, "one"), seg(1, 2500, 3600, "two"), seg(2, 4700, 6100, "三")]);
        assert_eq!(transcript_lines(&segs), text);
    }

    proptest! {
        #[test]
        fn write_read_round_trip(parts in proptest::collection::vec((1u64..5000, 0u64..3000, ".{0,20}"), 0..8)) {
            let mut t = 0;
            let segments: Vec<_> = parts.iter().enumerate().map(|(i, (len, gap, text))| {
                t += gap;
                let s = seg(i, t, t + len, text);
                t += len;
                s
            }).collect();
            let tr = Transcript { asset_id: "a".into(), segments, task: AsrTask::TranslateToEnglish, backend_name: "p".into() };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.jsonl");
            write_transcript(&tr, &p).unwrap();
            prop_assert_eq!(read_transcript(&p).unwrap(), tr);
        }
    }
}
