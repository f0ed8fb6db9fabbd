//! On-disk dataset formats used by `train`, `ablate` and `synth-fixture`.
//!
//! A training directory holds `manifest.jsonl`, one segment per line:
//! `{"id", "label", "audio", "crops", "text"}` where `label` is a class
//! name or index, `audio` a WAV path and `crops` a list of PNG paths, all
//! relative to the directory.
//!
//! An ablation dataset is a JSON-lines file of
//! `{"id", "gold", "texts": {"title": …, "transcript": …}, "audio", "crops"}`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mseva_core::audio::{read_wav, write_mono_wav, MonoAudio};
use mseva_core::eval::{AblationItem, Averaging, Sentiment, TextSource};
use mseva_model::fixtures::synthetic_trimodal_set;
use mseva_model::{ModelConfig, SegmentInput};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Index(usize),
    Name(String),
}

impl LabelRef {
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<usize> {
        match self {
            LabelRef::Index(i) if *i < cfg.num_classes => Ok(*i),
            LabelRef::Index(i) => bail!("label {i} out of range for {} classes", cfg.num_classes),
            LabelRef::Name(n) => cfg
                .class_names
                .iter()
                .position(|c| c.eq_ignore_ascii_case(n))
                .with_context(|| format!("unknown class {n:?} (classes: {:?})", cfg.class_names)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: LabelRef,
    #[serde(default)]
    pub audio: Option<PathBuf>,
    #[serde(default)]
    pub crops: Vec<PathBuf>,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEntry {
    pub id: String,
    pub gold: Sentiment,
    pub texts: BTreeMap<TextSource, String>,
    #[serde(default)]
    pub audio: Option<PathBuf>,
    #[serde(default)]
    pub crops: Vec<PathBuf>,
}

/// `mseva ablate` configuration (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// JSON-lines dataset, relative to the config file.
    pub dataset: PathBuf,
    pub experiments: Vec<TextSource>,
    pub baseline: TextSource,
    #[serde(default)]
    pub averaging: Averaging,
    /// Trained checkpoint; the seed-initialised default model otherwise.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), n + 1)))
        .collect()
}

/// Mono 16 kHz samples of a WAV file of any rate and channel count.
pub fn load_clip(path: &Path) -> Result<Vec<f32>> {
    let pcm = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(pcm.downmix().to_target_rate().to_f32())
}

fn load_input(base: &Path, audio: Option<&Path>, crops: &[PathBuf], text: String) -> Result<SegmentInput> {
    let audio = match audio {
        Some(p) => load_clip(&base.join(p))?,
        None => Vec::new(),
    };
    let crops = crops
        .iter()
        .map(|p| {
            let p = base.join(p);
            Ok(image::open(&p).with_context(|| format!("reading {}", p.display()))?.to_rgb8())
        })
        .collect::<Result<_>>()?;
    Ok(SegmentInput { crops, audio, text })
}

pub fn load_training_dir(dir: &Path, cfg: &ModelConfig) -> Result<Vec<(SegmentInput, usize)>> {
    let entries: Vec<ManifestEntry> = read_lines(&dir.join("manifest.jsonl"))?;
    if entries.is_empty() {
        bail!("{} has no samples", dir.join("manifest.jsonl").display());
    }
    entries
        .into_iter()
        .map(|e| {
            let label = e.label.resolve(cfg).with_context(|| format!("sample {}", e.id))?;
            Ok((load_input(dir, e.audio.as_deref(), &e.crops, e.text)?, label))
        })
        .collect()
}

pub fn load_ablation_dataset(path: &Path) -> Result<Vec<AblationItem<SegmentInput>>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<AblationEntry> = read_lines(path)?;
    entries
        .into_iter()
        .map(|e| {
            Ok(AblationItem {
                inputs: load_input(base, e.audio.as_deref(), &e.crops, String::new())?,
                id: e.id,
                gold: e.gold,
                texts: e.texts,
            })
        })
        .collect()
}

fn write_sample_files(dir: &Path, id: &str, input: &SegmentInput) -> Result<(PathBuf, Vec<PathBuf>)> {
    let audio = PathBuf::from(format!("{id}.wav"));
    write_mono_wav(&dir.join(&audio), &MonoAudio::from_f32(16_000, &input.audio))?;
    let mut crops = Vec::new();
    for (k, c) in input.crops.iter().enumerate() {
        let p = PathBuf::from(format!("{id}_{k}.png"));
        c.save(dir.join(&p))?;
        crops.push(p);
    }
    Ok((audio, crops))
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a synthetic training directory of `n` samples.
pub fn write_training_dir(dir: &Path, n: usize, cfg: &ModelConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (input, label)) in synthetic_trimodal_set(n, cfg.num_classes, seed).into_iter().enumerate() {
        let id = format!("s{i:03}");
        let (audio, crops) = write_sample_files(dir, &id, &input)?;
        entries.push(ManifestEntry {
            id,
            label: LabelRef::Name(cfg.class_names[label].clone()),
            audio: Some(audio),
            crops,
            text: input.text,
        });
    }
    write_lines(&dir.join("manifest.jsonl"), &entries)
}

/// Writes an ablation dataset whose titles are generic and whose
/// transcripts carry the class vocabulary, plus a matching config.
pub fn write_ablation_fixture(dir: &Path, n: usize, cfg: &ModelConfig, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (input, label)) in synthetic_trimodal_set(n, cfg.num_classes, seed).into_iter().enumerate() {
        let id = format!("a{i:03}");
        let (audio, crops) = write_sample_files(dir, &id, &input)?;
        let texts = BTreeMap::from([
            (TextSource::Title, format!("video number {i}")),
            (TextSource::Transcript, input.text.clone()),
        ]);
        entries.push(AblationEntry {
            id,
            gold: cfg.sentiment_of(label),
            texts,
            audio: Some(audio),
            crops,
        });
    }
    write_lines(&dir.join("dataset.jsonl"), &entries)?;
    let config = AblationConfig {
        dataset: "dataset.jsonl".into(),
        experiments: vec![TextSource::Title, TextSource::Transcript],
        baseline: TextSource::Title,
        averaging: Averaging::PositiveClass,
        checkpoint: None,
        out: None,
    };
    let path = dir.join("ablation.toml");
    std::fs::write(&path, toml::to_string(&config)?)?;
    Ok(path)
}
