//! Cross-module checks: sample video through media-prep, segmentation and
//! transcription, plus the synthetic annotation protocol fixture.

use std::collections::BTreeSet;

use mseva_core::annotation::{
    cohen_kappa, dataset_stats, fleiss_kappa, resolve_labels, LabelStatus, RatingMatrix, SentimentVote,
};
use mseva_core::media::{
    default_resolution_rules, detect_faces, extract_frames, normalize_container, BlobFaceDetector, FramePolicy,
    Transcoder, FACE_CROP_SIZE,
};
use mseva_core::segmenter::{cut_audio, segment_audio, SilenceProfile};
use mseva_core::synth;
use mseva_core::transcriber::{read_transcript, transcribe_segments, write_transcript, AsrTask, EchoStub};

#[test]
fn sample_video_segments_match_authored_layout() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("sample.avi");
    let spec = synth::write_sample_video(&src).unwrap();
    let asset = normalize_container(&src, &dir.path().join("work"), &Transcoder::none(), Some("en".into())).unwrap();
    // 11.025 kHz cannot hold exactly 7.5 s; the source is 0.05 ms short.
    assert!(asset.duration_ms.abs_diff(spec.layout.duration_ms) <= 1);
    assert_eq!((asset.width_px, asset.height_px), (spec.width, spec.height));

    let audio = asset.load_audio().unwrap();
    assert_eq!(audio.sample_rate, 16_000);
    let segments = segment_audio(&audio, &SilenceProfile::default()).unwrap();
    assert_eq!(segments.len(), spec.layout.utterances.len());
    // Every authored pause (1.2 s) falls inside the gap between segments.
    for (seg, next) in segments.iter().zip(segments.iter().skip(1)) {
        assert!(seg.end_ms <= next.start_ms);
    }
    for ((s, e), seg) in spec.layout.utterances.iter().zip(&segments) {
        assert!(seg.start_ms <= *s + 20 && seg.end_ms + 20 >= *e, "{seg:?} vs {s}..{e}");
    }

    let clips = cut_audio(&audio, &segments).unwrap();
    let transcript = transcribe_segments(
        &asset.asset_id,
        &clips,
        &segments,
        &EchoStub,
        AsrTask::default_for(Some("en")),
        Some("en"),
        2,
    )
    .unwrap();
    let path = dir.path().join("transcript.jsonl");
    write_transcript(&transcript, &path).unwrap();
    let back = read_transcript(&path).unwrap();
    assert_eq!(back.segments, transcript.segments);
    assert!(back.segments.iter().all(|s| !s.text.is_empty()));
}

#[test]
fn sample_video_faces_are_found() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("sample.avi");
    synth::write_sample_video(&src).unwrap();
    let asset = normalize_container(&src, &dir.path().join("work"), &Transcoder::none(), None).unwrap();
    let batch = extract_frames(&asset, FramePolicy::FixedCount(6), &default_resolution_rules()).unwrap();
    assert_eq!(batch.frames.len(), 6);
    let crops = detect_faces(&batch, &BlobFaceDetector::default()).unwrap();
    assert_eq!(crops.len(), 6);
    assert!(crops.iter().all(|c| c.crop.dimensions() == (FACE_CROP_SIZE, FACE_CROP_SIZE)));
}

#[test]
fn protocol_fixture_mirrors_labelling_narrative() {
    let records = synth::protocol_ratings();
    assert_eq!(records.len(), 165 * 3);
    let labels = resolve_labels(&records).unwrap();
    let valid: Vec<String> = labels
        .iter()
        .filter(|l| l.status == LabelStatus::Valid)
        .map(|l| l.video_id.clone())
        .collect();
    assert_eq!(labels.len(), 165);
    assert_eq!(valid.len(), 147);

    let stats = dataset_stats(&records, &labels, &synth::protocol_metadata(&valid));
    assert_eq!(stats.annotation_counts[&SentimentVote::Positive], 236);
    assert_eq!(stats.annotation_counts[&SentimentVote::Negative], 185);
    assert_eq!(stats.annotation_counts[&SentimentVote::Uncertain], 20);
    assert_eq!(stats.label_counts[&SentimentVote::Positive], 85);
    assert_eq!(stats.label_counts[&SentimentVote::Negative], 62);
    assert_eq!(stats.duration_bins, [40, 58, 37, 7, 5]);
    assert_eq!(stats.language_counts["zh"], 115);
    assert_eq!(stats.language_counts["en"], 32);
    assert_eq!(stats.poster_counts["CCTV News"], 94);
    assert_eq!(stats.poster_counts["Phoenix Satellite TV"], 7);
    assert_eq!(stats.poster_counts["CGTN"], 6);

    let all = fleiss_kappa(&RatingMatrix::from_records(&records, None).unwrap()).unwrap();
    assert!(all > 0.65, "kappa over all rated videos {all}");
    let only: BTreeSet<String> = valid.into_iter().collect();
    let kept = fleiss_kappa(&RatingMatrix::from_records(&records, Some(&only)).unwrap()).unwrap();
    assert!(kept > 0.65, "kappa over retained videos {kept}");
}

#[test]
fn reannotation_fixture_exceeds_reported_agreement() {
    let (a, b) = synth::reannotation_pair();
    let agree = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    assert_eq!(agree, 96);
    assert!(cohen_kappa(&a, &b).unwrap() > 0.85);
}
