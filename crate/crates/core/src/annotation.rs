//! Three-rater labelling protocol: majority vote with a validity rule,
//! dataset statistics, and chance-corrected agreement (Fleiss', Cohen's).

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RATERS_PER_VIDEO: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("video {video_id} has {found} ratings, expected {expected}")]
    IncompleteRatings {
        video_id: String,
        found: usize,
        expected: usize,
    },
    #[error("rater {rater_id} rated video {video_id} more than once")]
    DuplicateRating { video_id: String, rater_id: String },
    #[error("expected agreement is 1 but observed agreement is not")]
    DegenerateExpectation,
    #[error("invalid rating matrix: {0}")]
    InvalidMatrix(String),
    #[error("label sequences differ in length ({0} vs {1}) or are empty")]
    LengthMismatch(usize, usize),
    #[error("ratings file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentVote {
    Positive,
    Negative,
    Uncertain,
}

impl SentimentVote {
    pub const ALL: [SentimentVote; 3] = [SentimentVote::Positive, SentimentVote::Negative, SentimentVote::Uncertain];

    pub fn index(&self) -> usize {
        match self {
            SentimentVote::Positive => 0,
            SentimentVote::Negative => 1,
            SentimentVote::Uncertain => 2,
        }
    }
}

impl std::str::FromStr for SentimentVote {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(SentimentVote::Positive),
            "negative" | "neg" => Ok(SentimentVote::Negative),
            "uncertain" | "unc" => Ok(SentimentVote::Uncertain),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub rater_id: String,
    pub label: SentimentVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Valid,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLabel {
    pub video_id: String,
    /// Majority label, when one label has at least two votes.
    pub label: Option<SentimentVote>,
    pub status: LabelStatus,
    pub votes: [usize; 3],
}

fn group_by_video(records: &[AnnotationRecord]) -> Result<BTreeMap<&str, Vec<&AnnotationRecord>>, AnnotationError> {
    let mut by_video: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(r.video_id.as_str()).or_default().push(r);
    }
    for (video, rs) in &by_video {
        let mut seen = BTreeSet::new();
        for r in rs {
            if !seen.insert(r.rater_id.as_str()) {
                return Err(AnnotationError::DuplicateRating {
                    video_id: video.to_string(),
                    rater_id: r.rater_id.clone(),
                });
            }
        }
    }
    Ok(by_video)
}

/// Majority vote per video (ordered by video id). A video is valid when some
/// label gets at least two of the three votes and that label is not
/// `uncertain`.
pub fn resolve_labels(records: &[AnnotationRecord]) -> Result<Vec<DatasetLabel>, AnnotationError> {
    let by_video = group_by_video(records)?;
    let mut out = Vec::with_capacity(by_video.len());
    for (video, rs) in by_video {
        if rs.len() != RATERS_PER_VIDEO {
            return Err(AnnotationError::IncompleteRatings {
                video_id: video.to_string(),
                found: rs.len(),
                expected: RATERS_PER_VIDEO,
            });
        }
        let mut votes = [0usize; 3];
        for r in &rs {
            votes[r.label.index()] += 1;
        }
        let majority = SentimentVote::ALL.into_iter().find(|l| votes[l.index()] >= 2);
        let status = match majority {
            Some(SentimentVote::Positive | SentimentVote::Negative) => LabelStatus::Valid,
            _ => LabelStatus::Dropped,
        };
        out.push(DatasetLabel {
            video_id: video.to_string(),
            label: majority,
            status,
            votes,
        });
    }
    Ok(out)
}

/// Items x categories matrix of rater counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self, AnnotationError> {
        let k = counts.first().map(|r| r.len()).unwrap_or(0);
        if counts.is_empty() || k < 1 {
            return Err(AnnotationError::InvalidMatrix("no items or no categories".into()));
        }
        if counts.iter().any(|r| r.len() != k) {
            return Err(AnnotationError::InvalidMatrix("rows differ in category count".into()));
        }
        let n: u32 = counts[0].iter().sum();
        if counts.iter().any(|r| r.iter().sum::<u32>() != n) {
            return Err(AnnotationError::InvalidMatrix("rows have different rater totals".into()));
        }
        if n < 2 {
            return Err(AnnotationError::InvalidMatrix("need at least two raters per item".into()));
        }
        Ok(RatingMatrix { counts, raters: n })
    }

    /// Rows for every video (in id order) over positive/negative/uncertain.
    pub fn from_records(records: &[AnnotationRecord], only: Option<&BTreeSet<String>>) -> Result<Self, AnnotationError> {
        let by_video = group_by_video(records)?;
        let rows = by_video
            .into_iter()
            .filter(|(v, _)| only.is_none_or(|set| set.contains(*v)))
            .map(|(_, rs)| {
                let mut row = vec![0u32; 3];
                for r in rs {
                    row[r.label.index()] += 1;
                }
                row
            })
            .collect();
        RatingMatrix::new(rows)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.counts
    }

    /// Reorders categories; `perm[new] = old`.
    pub fn permute_categories(&self, perm: &[usize]) -> Self {
        RatingMatrix {
            counts: self
                .counts
                .iter()
                .map(|r| perm.iter().map(|&old| r[old]).collect())
                .collect(),
            raters: self.raters,
        }
    }
}

/// Fleiss' kappa, `(P_bar - P_e) / (1 - P_e)`.
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64, AnnotationError> {
    let n = m.raters as f64;
    let items = m.items() as f64;
    let k = m.categories();
    let mut p_j = vec![0.0; k];
    let mut p_bar = 0.0;
    for row in m.rows() {
        let mut agree = 0.0;
        for (j, &c) in row.iter().enumerate() {
            let c = c as f64;
            p_j[j] += c;
            agree += c * (c - 1.0);
        }
        p_bar += agree / (n * (n - 1.0));
    }
    p_bar /= items;
    let p_e: f64 = p_j.iter().map(|&s| (s / (items * n)).powi(2)).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if (1.0 - p_bar).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(AnnotationError::DegenerateExpectation)
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Cohen's kappa between two label sequences over the union of their labels.
pub fn cohen_kappa<L: Eq + Hash + Ord>(a: &[L], b: &[L]) -> Result<f64, AnnotationError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AnnotationError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let mut count_a: BTreeMap<&L, f64> = BTreeMap::new();
    let mut count_b: BTreeMap<&L, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (x, y) in a.iter().zip(b) {
        *count_a.entry(x).or_default() += 1.0;
        *count_b.entry(y).or_default() += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = count_a
        .iter()
        .map(|(l, ca)| ca * count_b.get(l).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return if (1.0 - p_o).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(AnnotationError::DegenerateExpectation)
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetadata {
    pub video_id: String,
    pub duration_s: f64,
    pub language: String,
    pub poster: String,
}

/// Duration histogram bin edges, in seconds.
pub const DURATION_BIN_EDGES: [f64; 4] = [60.0, 90.0, 120.0, 150.0];
pub const DURATION_BIN_LABELS: [&str; 5] = ["<60", "60-90", "90-120", "120-150", ">=150"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StatsReport {
    pub videos: usize,
    /// Raw annotation tallies (all three votes of every retained video).
    pub annotation_counts: BTreeMap<SentimentVote, usize>,
    /// Final labels of retained videos.
    pub label_counts: BTreeMap<SentimentVote, usize>,
    pub duration_bins: [usize; 5],
    pub language_counts: BTreeMap<String, usize>,
    pub poster_counts: BTreeMap<String, usize>,
}

pub fn duration_bin(duration_s: f64) -> usize {
    DURATION_BIN_EDGES.iter().take_while(|&&e| duration_s >= e).count()
}

/// Statistics over the retained (valid) videos.
pub fn dataset_stats(records: &[AnnotationRecord], labels: &[DatasetLabel], metadata: &[VideoMetadata]) -> StatsReport {
    let retained: BTreeSet<&str> = labels
        .iter()
        .filter(|l| l.status == LabelStatus::Valid)
        .map(|l| l.video_id.as_str())
        .collect();
    let mut report = StatsReport {
        videos: retained.len(),
        ..Default::default()
    };
    for r in records.iter().filter(|r| retained.contains(r.video_id.as_str())) {
        *report.annotation_counts.entry(r.label).or_default() += 1;
    }
    for l in labels.iter().filter(|l| l.status == LabelStatus::Valid) {
        if let Some(label) = l.label {
            *report.label_counts.entry(label).or_default() += 1;
        }
    }
    for m in metadata.iter().filter(|m| retained.contains(m.video_id.as_str())) {
        report.duration_bins[duration_bin(m.duration_s)] += 1;
        *report.language_counts.entry(m.language.clone()).or_default() += 1;
        *report.poster_counts.entry(m.poster.clone()).or_default() += 1;
    }
    report
}

/// Reads `video_id,rater_id,label` rows (with header).
pub fn read_ratings_csv(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| AnnotationError::Parse(e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| AnnotationError::Parse(e.to_string()))?;
        if row.len() < 3 {
            return Err(AnnotationError::Parse(format!("row {}: expected 3 columns", i + 2)));
        }
        out.push(AnnotationRecord {
            video_id: row[0].trim().to_string(),
            rater_id: row[1].trim().to_string(),
            label: row[2].parse().map_err(|e| AnnotationError::Parse(format!("row {}: {e}", i + 2)))?,
        });
    }
    Ok(out)
}

pub fn write_ratings_csv(path: &Path, records: &[AnnotationRecord]) -> Result<(), AnnotationError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AnnotationError::Parse(e.to_string()))?;
    let err = |e: csv::Error| AnnotationError::Parse(e.to_string());
    w.write_record(["video_id", "rater_id", "label"]).map_err(err)?;
    for r in records {
        let label = match r.label {
            SentimentVote::Positive => "positive",
            SentimentVote::Negative => "negative",
            SentimentVote::Uncertain => "uncertain",
        };
        w.write_record([r.video_id.as_str(), r.rater_id.as_str(), label]).map_err(err)?;
    }
    w.flush().map_err(|e| AnnotationError::Parse(e.to_string()))
}

/// Pairs up ratings for Cohen's kappa: for each video rated by both `a` and
/// `b`, the two labels (ordered by video id).
pub fn paired_labels(
    records: &[AnnotationRecord],
    rater_a: &str,
    rater_b: &str,
) -> (Vec<SentimentVote>, Vec<SentimentVote>) {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for r in records {
        if r.rater_id == rater_a {
            a.insert(r.video_id.as_str(), r.label);
        } else if r.rater_id == rater_b {
            b.insert(r.video_id.as_str(), r.label);
        }
    }
    a.iter()
        .filter_map(|(v, la)| b.get(v).map(|lb| (*la, *lb)))
        .unzip()
}
