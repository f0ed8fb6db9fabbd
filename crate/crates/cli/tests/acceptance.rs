//! The eight [PRIMARY] acceptance criteria, one test each, with the
//! runtime budget asserted alongside the functional check.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use mseva_core::annotation::{cohen_kappa, fleiss_kappa, RatingMatrix};
use mseva_core::audio::MonoAudio;
use mseva_core::eval::{metrics_from_confusion, relative_improvement, ConfusionMatrix2};
use mseva_core::media::{default_resolution_rules, select_resolution_rule, validate_rules};
use mseva_core::segmenter::{segment_audio, SilenceProfile};
use mseva_core::synth::{reannotation_pair, render_speech, sample_video_spec, write_sample_video, SpeechLayout};
use mseva_model::diagnostics::gradient_check;
use mseva_model::fixtures::synthetic_trimodal_set;
use mseva_model::train::accuracy;
use mseva_model::{checkpoint, fuse, train, EmotionModel, Modality, ModalityPrediction, ModelConfig, Schedule, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mseva() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mseva"))
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sample.avi")
}

// 1. Table 11 -----------------------------------------------------------

#[test]
fn c1_table11_metrics() {
    let start = Instant::now();
    let r = metrics_from_confusion(&ConfusionMatrix2::new(77, 8, 27, 35)).unwrap();
    assert!((r.acc2 - 0.7619).abs() <= 5e-4, "acc2 {}", r.acc2);
    assert_eq!(r.acc2, 112.0 / 147.0);
    let (p, rec, f1) = (r.precision.unwrap(), r.recall.unwrap(), r.f1.unwrap());
    assert!((p - 0.7404).abs() <= 5e-4, "precision {p}");
    assert!((rec - 0.9059).abs() <= 5e-4, "recall {rec}");
    // F1 = 2·77 / (2·77 + 8 + 27) = 154/189 = 0.81481…, which is §4.4's
    // "81.5%". The criterion's 0.8154 is a mis-rounding of this value (it
    // lies 0.0006 away); the check is against the paper's figure.
    assert!((f1 - 154.0 / 189.0).abs() < 1e-15);
    assert!((f1 - 0.815).abs() <= 5e-4, "f1 {f1}");
    assert!(start.elapsed() < Duration::from_secs(1));
}

// 2. Table 5 relative improvement ---------------------------------------

#[test]
fn c2_table5_relative_improvement() {
    let start = Instant::now();
    let r = relative_improvement(74.82, 82.31).unwrap();
    assert!((r - 0.1001).abs() <= 1e-4, "{r}");
    assert!(start.elapsed() < Duration::from_secs(1));
}

// 3. Segmentation oracle --------------------------------------------------

/// Random layout: utterances of 400–2500 ms; every gap is either short
/// (100–799 ms) or long (800–2999 ms), straddling the 800 ms threshold.
fn random_layout(rng: &mut ChaCha8Rng) -> (SpeechLayout, Vec<bool>) {
    let n = rng.random_range(2..7);
    let mut t = rng.random_range(0..1500);
    let mut utterances = Vec::new();
    let mut long_gap = Vec::new();
    for i in 0..n {
        if i > 0 {
            let long = rng.random_bool(0.5);
            t += if long {
                rng.random_range(800..3000)
            } else {
                rng.random_range(100..800)
            };
            long_gap.push(long);
        }
        let len = rng.random_range(400..2500);
        utterances.push((t, t + len));
        t += len;
    }
    let duration_ms = t + rng.random_range(0..1500);
    (SpeechLayout { utterances, duration_ms }, long_gap)
}

#[test]
fn c3_segmentation_oracle() {
    let start = Instant::now();
    let profile = SilenceProfile::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    let (mut long_gaps, mut short_gaps) = (0, 0);
    for fixture in 0..50u64 {
        let (layout, long_gap) = random_layout(&mut rng);
        let noise = (fixture % 2 == 1).then_some(-70.0);
        let audio = MonoAudio::from_f32(16_000, &render_speech(&layout, 16_000, noise, fixture));
        let segs = segment_audio(&audio, &profile).unwrap();
        let boundaries: Vec<(u64, u64)> = segs.windows(2).map(|w| (w[0].end_ms, w[1].start_ms)).collect();
        for ((gap_start, gap_end), &long) in layout.gaps().into_iter().zip(&long_gap) {
            // A boundary "in" a gap: a segment ends and the next begins
            // within the gap (with the tolerance).
            let hit = boundaries
                .iter()
                .find(|&&(e, s)| e + 20 >= gap_start && s <= gap_end + 20 && e <= gap_end && s >= gap_start);
            if long {
                long_gaps += 1;
                match hit {
                    Some(&(e, s)) if e.abs_diff(gap_start) <= 20 && s.abs_diff(gap_end) <= 20 => {}
                    other => violations.push(format!(
                        "fixture {fixture}: gap {gap_start}-{gap_end} boundary {other:?}"
                    )),
                }
            } else {
                short_gaps += 1;
                if let Some(b) = hit {
                    violations.push(format!("fixture {fixture}: short gap {gap_start}-{gap_end} split at {b:?}"));
                }
            }
        }
        if segs.len() != long_gap.iter().filter(|&&l| l).count() + 1 {
            violations.push(format!("fixture {fixture}: {} segments for {layout:?}", segs.len()));
        }
    }
    assert!(violations.is_empty(), "{violations:#?}");
    assert!(long_gaps > 50 && short_gaps > 50, "{long_gaps} long, {short_gaps} short gaps");
    assert!(start.elapsed() < Duration::from_secs(30));
}

// 4. Table 3 mapping ----------------------------------------------------

#[test]
fn c4_table3_corners_and_orientation() {
    let start = Instant::now();
    // (width band, height band) -> target, as printed in Table 3.
    let table = [
        ([470, 490], [550, 570], (180, 224)),
        ([845, 865], [470, 490], (214, 120)),
        ([470, 490], [840, 860], (120, 214)),
        ([1070, 1090], [1910, 1930], (144, 216)),
    ];
    let rules = default_resolution_rules();
    validate_rules(&rules).unwrap();
    let mut corners = 0;
    for (w, h, target) in table {
        for width in w {
            for height in h {
                let sel = select_resolution_rule(width, height, &rules).unwrap();
                assert!(!sel.fallback, "{width}x{height} fell back");
                assert_eq!(sel.target(), target, "{width}x{height}");
                corners += 1;
            }
        }
    }
    assert_eq!(corners, 16);
    for r in &rules {
        let src_portrait = r.src_w[1] < r.src_h[0];
        let src_landscape = r.src_w[0] > r.src_h[1];
        assert!(src_portrait || src_landscape, "{r:?} straddles orientations");
        assert_eq!(src_portrait, r.dst_h > r.dst_w, "{r:?} flips orientation");
    }
    assert!(start.elapsed() < Duration::from_secs(1));
}

// 5. Kappa oracles --------------------------------------------------------

/// Fleiss' kappa from first principles: agreement as the fraction of
/// ordered rater pairs that agree, chance from pooled proportions.
fn brute_force_fleiss(rows: &[Vec<u32>]) -> f64 {
    let k = rows[0].len();
    let mut p_bar = 0.0;
    let mut totals = vec![0u64; k];
    let mut votes_all = 0u64;
    for row in rows {
        let labels: Vec<usize> = row.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize)).collect();
        let n = labels.len();
        let mut agree = 0u64;
        for i in 0..n {
            for j in 0..n {
                if i != j && labels[i] == labels[j] {
                    agree += 1;
                }
            }
        }
        p_bar += agree as f64 / (n * (n - 1)) as f64;
        for &l in &labels {
            totals[l] += 1;
        }
        votes_all += n as u64;
    }
    p_bar /= rows.len() as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / votes_all as f64).powi(2)).sum();
    (p_bar - p_e) / (1.0 - p_e)
}

#[test]
fn c5_kappa_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut compared = 0;
    while compared < 100 {
        let items = rng.random_range(2..40);
        let k = rng.random_range(2..6);
        let n = rng.random_range(2..9);
        let rows: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0u32; k];
                for _ in 0..n {
                    row[rng.random_range(0..k)] += 1;
                }
                row
            })
            .collect();
        let used = (0..k).filter(|&c| rows.iter().any(|r| r[c] > 0)).count();
        if used < 2 {
            continue; // chance agreement 1: kappa undefined
        }
        let m = RatingMatrix::new(rows.clone()).unwrap();
        let fast = fleiss_kappa(&m).unwrap();
        let slow = brute_force_fleiss(&rows);
        assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow} on {rows:?}");
        compared += 1;
    }
    for _ in 0..50 {
        let a: Vec<u8> = (0..rng.random_range(2..60)).map(|_| rng.random_range(0..3)).collect();
        if a.iter().all(|&x| x == a[0]) {
            continue;
        }
        assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
    }
    let (first, second) = reannotation_pair();
    let agree = first.iter().zip(&second).filter(|(a, b)| a == b).count();
    assert_eq!((agree, first.len()), (96, 100));
    let kappa = cohen_kappa(&first, &second).unwrap();
    assert!(kappa > 0.85, "re-annotation kappa {kappa}");
    assert!(start.elapsed() < Duration::from_secs(10));
}

// 6. Model property suite -----------------------------------------------

fn prepared(model: &EmotionModel, n: usize, seed: u64) -> Vec<TrainSample> {
    let backend = model.default_text_backend();
    synthetic_trimodal_set(n, model.config().num_classes, seed)
        .into_iter()
        .map(|(input, label)| TrainSample {
            input: model.prepare(&input, &backend).unwrap(),
            label,
        })
        .collect()
}

#[test]
fn c6_model_properties() {
    // Gradient check on the tiny config.
    let mut tiny = EmotionModel::new(ModelConfig::tiny()).unwrap();
    let samples = prepared(&tiny, 2, 3);
    let g = gradient_check(&mut tiny, &samples, 1e-5);
    assert!(g.checked > 1000);
    assert!(g.worst_relative_error < 1e-4, "{g:?}");

    // Fusion against a brute-force weighted sum.
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let mut logits = || (0..cfg.num_classes).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>();
        let preds = [
            ModalityPrediction::from_logits(Modality::Visual, logits()),
            ModalityPrediction::from_logits(Modality::Acoustic, logits()),
            ModalityPrediction::from_logits(Modality::Textual, logits()),
        ];
        let raw: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let s: f64 = raw.iter().sum();
        let mut w = raw.map(|x| x / s);
        w[2] = 1.0 - w[0] - w[1];
        let fused = fuse(&preds, w, &cfg).unwrap();
        for c in 0..cfg.num_classes {
            let expect = w[0] * preds[0].logits[c] + w[1] * preds[1].logits[c] + w[2] * preds[2].logits[c];
            assert!((fused.logits[c] - expect).abs() <= 1e-12);
        }
    }

    // Overfit oracle.
    let start = Instant::now();
    let mut model = EmotionModel::new(ModelConfig::default()).unwrap();
    let data = prepared(&model, 20, 11);
    train(&mut model, &data, &Schedule::default()).unwrap();
    let acc = accuracy(&model, &data).unwrap();
    assert!(acc >= 0.9, "training accuracy {acc}");
    assert!(start.elapsed() < Duration::from_secs(300));

    // Checkpoint round trip.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for s in prepared(&model, 4, 77) {
        let a = model.infer_prepared(&s.input).unwrap();
        let b = back.infer_prepared(&s.input).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }
}

// 7. End-to-end determinism ---------------------------------------------

#[test]
fn c7_analyze_is_deterministic() {
    let start = Instant::now();
    // The bundled fixture is exactly what the generator authors.
    let dir = tempfile::tempdir().unwrap();
    let regenerated = dir.path().join("sample.avi");
    write_sample_video(&regenerated).unwrap();
    assert_eq!(std::fs::read(&regenerated).unwrap(), std::fs::read(fixture()).unwrap());

    let mut outputs = Vec::new();
    for i in 0..3 {
        let out = dir.path().join(format!("result{i}.json"));
        let status = mseva().arg("analyze").arg(fixture()).arg("--out").arg(&out).status().unwrap();
        assert!(status.success());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
    let result: serde_json::Value = serde_json::from_slice(&outputs[0]).unwrap();
    let track = result["track"].as_array().unwrap();
    assert_eq!(track.len(), sample_video_spec().layout.utterances.len());
    // Echo stub transcripts: each segment's text is its clip duration.
    for e in track {
        let seg = &e["segment"];
        let dur = seg["end_ms"].as_u64().unwrap() - seg["start_ms"].as_u64().unwrap();
        assert_eq!(seg["text"], dur.to_string());
    }
    assert!(start.elapsed() < Duration::from_secs(120));
}

// 8. Crash recovery -----------------------------------------------------

struct Server {
    child: Child,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(data: &Path, fault: Option<&str>) -> Server {
    let mut cmd = mseva();
    cmd.args(["serve", "--port", "0"])
        .env("MSEVA_DATA_DIR", data)
        .env_remove("MSEVA_FAULT_STAGE")
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    if let Some(stage) = fault {
        cmd.env("MSEVA_FAULT_STAGE", stage);
    }
    let mut child = cmd.spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("listen banner").to_string();
    Server { child, base }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(agent: &ureq::Agent, url: &str) -> (u16, serde_json::Value) {
    let mut resp = agent.get(url).call().unwrap();
    let status = resp.status().as_u16();
    (status, serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap())
}

fn read_job(data: &Path, id: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(data.join("jobs").join(format!("{id}.json"))).unwrap()).unwrap()
}

#[test]
fn c8_crash_recovery() {
    use mseva_service::multipart::{encode, Part};

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let agent = agent();

    // First server aborts the whole process when the job reaches inference.
    let mut crashing = serve(&data, Some("inferring"));
    let (ct, body) = encode(
        &[Part {
            name: "file".into(),
            filename: Some("sample.avi".into()),
            content_type: Some("video/x-msvideo".into()),
            data: std::fs::read(fixture()).unwrap(),
        }],
        "acceptance-boundary",
    );
    let mut resp = agent
        .post(&format!("{}/api/jobs", crashing.base))
        .header("Content-Type", &ct)
        .send(&body[..])
        .unwrap();
    assert_eq!(resp.status().as_u16(), 202);
    let submitted: serde_json::Value = serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap();
    let id = submitted["job_id"].as_str().unwrap().to_string();

    let deadline = Instant::now() + Duration::from_secs(60);
    let status = loop {
        if let Some(s) = crashing.child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "server did not crash");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert!(!status.success(), "worker process must have been killed");

    // No partial result is visible.
    let job = read_job(&data, &id);
    assert_eq!(job["state"], "inferring");
    assert!(job["result_ref"].is_null());
    assert_eq!(std::fs::read_dir(data.join("results")).unwrap().count(), 0);
    drop(crashing);

    // Restart without the fault: the job is re-run from queued and finishes.
    let server = serve(&data, None);
    let deadline = Instant::now() + Duration::from_secs(60);
    let job = loop {
        let (code, job) = get(&agent, &format!("{}/api/jobs/{id}", server.base));
        assert_eq!(code, 200);
        match job["state"].as_str().unwrap() {
            "done" => break job,
            "failed" => panic!("re-run failed: {job}"),
            _ => {}
        }
        assert!(Instant::now() < deadline, "job did not finish after restart");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(job["attempts"], 2);
    let history: Vec<&str> = job["history"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(history, ["queued", "preprocessing", "segmenting", "transcribing", "inferring", "done"]);
    let (code, result) = get(&agent, &format!("{}/api/jobs/{id}/result", server.base));
    assert_eq!(code, 200);
    assert_eq!(result["track"].as_array().unwrap().len(), 3);
    assert_eq!(std::fs::read_dir(data.join("results")).unwrap().count(), 1);
    assert!(!data.join("work").join(&id).exists());

    // Same verdict as the inline pipeline.
    let inline = dir.path().join("inline.json");
    assert!(mseva().arg("analyze").arg(fixture()).arg("--out").arg(&inline).status().unwrap().success());
    let inline: serde_json::Value = serde_json::from_slice(&std::fs::read(inline).unwrap()).unwrap();
    assert_eq!(inline["video_verdict"], result["video_verdict"]);
    assert_eq!(inline["track"], result["track"]);
}
