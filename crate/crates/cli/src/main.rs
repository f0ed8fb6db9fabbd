//! `mseva`: command-line front end for the analysis pipeline.

mod data;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mseva_core::annotation::{cohen_kappa, fleiss_kappa, paired_labels, read_ratings_csv, resolve_labels, RatingMatrix};
use mseva_core::audio::read_wav;
use mseva_core::eval::{evaluate_predictions, read_jsonl, run_ablation_suite, Averaging, GoldRecord, PredictionRecord};
use mseva_core::media::content_id;
use mseva_core::segmenter::{cut_audio, segment_audio, SilenceProfile};
use mseva_core::synth::{protocol_ratings, write_sample_video};
use mseva_core::transcriber::{
    parse_transcript_lines, transcribe_segments, transcript_lines, write_transcript, AsrBackend, AsrTask, CommandAsr,
    EchoStub, ASR_MODEL_ENV,
};
use mseva_model::train::accuracy;
use mseva_model::{checkpoint, train, AblationModel, EmotionModel, Schedule, TrainSample};
use mseva_service::{AppConfig, Engine, JobOptions, JobState, Manager, StageHook};

/// Names the pipeline stage at which `mseva serve` aborts the process
/// (fault injection for recovery testing).
const FAULT_STAGE_ENV: &str = "MSEVA_FAULT_STAGE";

#[derive(Parser)]
#[command(name = "mseva", version, about = "Multimodal short-video emotion analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaMode {
    Fleiss,
    Cohen,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    PositiveClass,
    Macro,
}

#[derive(Subcommand)]
enum Command {
    /// Split a WAV file into utterances at silences.
    Segment {
        wav: PathBuf,
        #[arg(long, default_value_t = 800)]
        min_silence_ms: u64,
        #[arg(long, default_value_t = -40.0, allow_negative_numbers = true)]
        floor_db: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transcribe the segments of a WAV file.
    Transcribe {
        wav: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        /// `echo-stub` or `command`.
        #[arg(long, default_value = "echo-stub")]
        backend: String,
        /// Recognizer program for the `command` backend.
        #[arg(long)]
        command: Option<PathBuf>,
        /// `recognize` or `translate`; defaults by language hint.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        language: Option<String>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the emotion model on a manifest directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        grad_accum: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
    /// Analyze a video with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-rater agreement of a ratings CSV.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value = "fleiss")]
        mode: KappaMode,
        /// Fleiss: only videos whose majority label is valid.
        #[arg(long)]
        valid_only: bool,
        /// Cohen: the two raters to compare (default: the pair with the most co-rated videos).
        #[arg(long, num_args = 2)]
        raters: Option<Vec<String>>,
    },
    /// Majority-vote labels of a ratings CSV.
    Labels {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "positive-class")]
        averaging: AveragingArg,
    },
    /// Run a text-source ablation described by a TOML file.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
    /// Run the whole pipeline inline and write the AnalysisResult.
    Analyze {
        video: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        language: Option<String>,
    },
    /// Write synthetic fixtures: sample video, ratings, training and
    /// ablation sets.
    SynthFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        train_samples: usize,
    },
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializes");
    b.push(b'\n');
    b
}

fn load_mono(path: &Path) -> Result<mseva_core::audio::MonoAudio> {
    let pcm = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(pcm.downmix().to_target_rate())
}

fn cmd_segment(wav: &Path, min_silence_ms: u64, floor_db: f64, out: &Path) -> Result<()> {
    let audio = load_mono(wav)?;
    let profile = SilenceProfile {
        min_silence_ms,
        silence_floor_db: floor_db,
        ..SilenceProfile::default()
    };
    profile.validate()?;
    let segments = segment_audio(&audio, &profile)?;
    std::fs::write(out, transcript_lines(&segments))?;
    eprintln!("{} segments", segments.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_transcribe(
    wav: &Path,
    segments: &Path,
    backend: &str,
    command: Option<PathBuf>,
    task: Option<String>,
    language: Option<String>,
    workers: usize,
    out: &Path,
) -> Result<()> {
    let audio = load_mono(wav)?;
    let segs = parse_transcript_lines(&std::fs::read_to_string(segments)?)?;
    let backend: Box<dyn AsrBackend> = match backend {
        "echo" | "echo-stub" => Box::new(EchoStub),
        "command" => {
            let program = command.context("--backend command needs --command <program>")?;
            let model = std::env::var_os(ASR_MODEL_ENV).map(PathBuf::from);
            Box::new(CommandAsr::new(program, model, workers)?)
        }
        other => bail!("unknown ASR backend {other:?} (echo-stub, command)"),
    };
    let task = match task {
        Some(t) => t.parse::<AsrTask>().map_err(anyhow::Error::msg)?,
        None => AsrTask::default_for(language.as_deref()),
    };
    let clips = cut_audio(&audio, &segs)?;
    let asset_id = content_id(wav).unwrap_or_default();
    let t = transcribe_segments(&asset_id, &clips, &segs, backend.as_ref(), task, language.as_deref(), workers)?;
    write_transcript(&t, out)?;
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, schedule: Schedule) -> Result<()> {
    let cfg = AppConfig::load(config)?;
    let mut model = EmotionModel::new(cfg.model.params.clone())?;
    let backend = model.default_text_backend();
    let raw = data::load_training_dir(data, model.config())?;
    let samples = raw
        .iter()
        .map(|(input, label)| {
            Ok(TrainSample {
                input: model.prepare(input, &backend)?,
                label: *label,
            })
        })
        .collect::<Result<Vec<_>, mseva_model::ModelError>>()?;
    let report = train(&mut model, &samples, &schedule)?;
    for e in &report.history {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.3}", e.epoch, e.mean_loss, e.accuracy);
    }
    let acc = accuracy(&model, &samples)?;
    checkpoint::save(&model, out)?;
    eprintln!(
        "{} samples, {} steps, {} updates, final training accuracy {acc:.3}; wrote {}",
        samples.len(),
        report.steps,
        report.updates,
        out.display()
    );
    Ok(())
}

/// Runs the pipeline outside the job manager, in a scratch directory.
fn analyze_inline(cfg: &AppConfig, video: &Path, language: Option<String>) -> Result<Vec<u8>> {
    let engine = Engine::from_config(cfg)?;
    let job_id = format!("inline-{}", content_id(video).with_context(|| format!("reading {}", video.display()))?);
    let work = std::env::temp_dir().join(format!("mseva-{}-{}", job_id, std::process::id()));
    let options = JobOptions {
        language_hint: language,
        allow_long: true,
    };
    let outcome = engine.run(&job_id, video, &work, &options, &mut |stage| {
        log::info!("{}", stage.as_str());
        Ok(())
    });
    let _ = std::fs::remove_dir_all(&work);
    Ok(outcome?.to_json_bytes())
}

/// The two raters with the most co-rated videos (ties: smallest ids).
fn busiest_pair(records: &[mseva_core::annotation::AnnotationRecord]) -> Option<(String, String)> {
    use std::collections::BTreeMap;
    let mut by_video: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_video.entry(r.video_id.as_str()).or_default().push(r.rater_id.as_str());
    }
    let mut shared: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for raters in by_video.values_mut() {
        raters.sort_unstable();
        for (i, a) in raters.iter().enumerate() {
            for b in &raters[i + 1..] {
                *shared.entry((a, b)).or_default() += 1;
            }
        }
    }
    let best = shared.values().copied().max()?;
    shared
        .into_iter()
        .find(|&(_, n)| n == best)
        .map(|((a, b), _)| (a.to_string(), b.to_string()))
}

fn cmd_kappa(ratings: &Path, mode: KappaMode, valid_only: bool, raters: Option<Vec<String>>) -> Result<()> {
    let records = read_ratings_csv(ratings)?;
    let report = match mode {
        KappaMode::Fleiss => {
            let only = if valid_only {
                Some(
                    resolve_labels(&records)?
                        .into_iter()
                        .filter(|l| l.status == mseva_core::annotation::LabelStatus::Valid)
                        .map(|l| l.video_id)
                        .collect(),
                )
            } else {
                None
            };
            let m = RatingMatrix::from_records(&records, only.as_ref())?;
            serde_json::json!({
                "mode": "fleiss",
                "kappa": fleiss_kappa(&m)?,
                "items": m.items(),
                "raters_per_item": m.raters(),
                "categories": ["positive", "negative", "uncertain"],
                "valid_only": valid_only,
            })
        }
        KappaMode::Cohen => {
            let (a, b) = match raters {
                Some(r) => (r[0].clone(), r[1].clone()),
                None => busiest_pair(&records).context("Cohen's kappa needs two raters sharing a video")?,
            };
            let (la, lb) = paired_labels(&records, &a, &b);
            serde_json::json!({
                "mode": "cohen",
                "kappa": cohen_kappa(&la, &lb)?,
                "items": la.len(),
                "raters": [a, b],
            })
        }
    };
    write_output(None, &pretty(&report))
}

fn cmd_eval(pred: &Path, gold: &Path, out: Option<&Path>, averaging: Averaging) -> Result<()> {
    let preds: Vec<PredictionRecord> = read_jsonl(&std::fs::read_to_string(pred)?)?;
    let gold: Vec<GoldRecord> = read_jsonl(&std::fs::read_to_string(gold)?)?;
    let report = evaluate_predictions(&preds, &gold, averaging)?;
    write_output(out, &pretty(&report))
}

fn cmd_ablate(config: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: data::AblationConfig = toml::from_str(&text)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let dataset = data::load_ablation_dataset(&base.join(&cfg.dataset))?;
    let model = match &cfg.checkpoint {
        Some(p) => checkpoint::load(&base.join(p))?,
        None => EmotionModel::new(Default::default())?,
    };
    let backend = model.default_text_backend();
    let predictor = AblationModel {
        model: &model,
        backend: &backend,
    };
    let reports = run_ablation_suite(&cfg.experiments, cfg.baseline, &dataset, &predictor, cfg.averaging)?;
    let out = cfg.out.as_ref().map(|p| base.join(p));
    write_output(out.as_deref(), &pretty(&reports))
}

fn fault_hook() -> Result<Option<StageHook>> {
    let Some(stage) = std::env::var_os(FAULT_STAGE_ENV) else {
        return Ok(None);
    };
    let stage: JobState = stage
        .to_string_lossy()
        .parse()
        .map_err(|e| anyhow::anyhow!("{FAULT_STAGE_ENV}: {e}"))?;
    log::warn!("fault injection armed: aborting when a job enters {}", stage.as_str());
    Ok(Some(Arc::new(move |job, s| {
        if s == stage {
            eprintln!("{FAULT_STAGE_ENV}: aborting in job {} at {}", job.job_id, s.as_str());
            std::process::abort();
        }
    })))
}

fn cmd_serve(config: Option<&Path>, port: Option<u16>, host: Option<String>) -> Result<()> {
    let mut cfg = AppConfig::load(config)?;
    if let Some(p) = port {
        cfg.service.port = p;
    }
    if let Some(h) = host {
        cfg.service.host = h;
    }
    let engine = Arc::new(Engine::from_config(&cfg)?);
    let manager = Manager::start(engine, fault_hook()?)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.service.host.as_str(), cfg.service.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        mseva_service::http::serve(listener, manager).await?;
        Ok(())
    })
}

fn cmd_synth_fixture(out: &Path, train_samples: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_sample_video(&out.join("sample.avi"))?;
    mseva_core::annotation::write_ratings_csv(&out.join("ratings.csv"), &protocol_ratings())?;
    let cfg = mseva_model::ModelConfig::default();
    data::write_training_dir(&out.join("train"), train_samples, &cfg, 11)?;
    data::write_ablation_fixture(&out.join("ablation"), 20, &cfg, 12)?;
    eprintln!("wrote fixtures to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment {
            wav,
            min_silence_ms,
            floor_db,
            out,
        } => cmd_segment(&wav, min_silence_ms, floor_db, &out),
        Command::Transcribe {
            wav,
            segments,
            backend,
            command,
            task,
            language,
            workers,
            out,
        } => cmd_transcribe(&wav, &segments, &backend, command, task, language, workers, &out),
        Command::Train {
            config,
            data,
            out,
            epochs,
            grad_accum,
            lr,
        } => cmd_train(
            config.as_deref(),
            &data,
            &out,
            Schedule {
                epochs,
                grad_accum,
                learning_rate: lr,
                ..Schedule::default()
            },
        ),
        Command::Infer {
            ckpt,
            video,
            config,
            out,
        } => {
            let mut cfg = AppConfig::load(config.as_deref())?;
            cfg.model.checkpoint = Some(ckpt);
            write_output(out.as_deref(), &analyze_inline(&cfg, &video, None)?)
        }
        Command::Kappa {
            ratings,
            mode,
            valid_only,
            raters,
        } => cmd_kappa(&ratings, mode, valid_only, raters),
        Command::Labels { ratings, out } => {
            let labels = resolve_labels(&read_ratings_csv(&ratings)?)?;
            write_output(Some(&out), &pretty(&labels))
        }
        Command::Eval {
            pred,
            gold,
            out,
            averaging,
        } => {
            let averaging = match averaging {
                AveragingArg::PositiveClass => Averaging::PositiveClass,
                AveragingArg::Macro => Averaging::Macro,
            };
            cmd_eval(&pred, &gold, out.as_deref(), averaging)
        }
        Command::Ablate { config } => cmd_ablate(&config),
        Command::Serve { config, port, host } => cmd_serve(config.as_deref(), port, host),
        Command::Analyze {
            video,
            config,
            out,
            language,
        } => {
            let cfg = AppConfig::load(config.as_deref())?;
            write_output(out.as_deref(), &analyze_inline(&cfg, &video, language)?)
        }
        Command::SynthFixture { out, train_samples } => cmd_synth_fixture(&out, train_samples),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
