//! Binary sentiment metrics (ACC-2, precision, recall, F1, AUC) and the
//! text-source ablation runner.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("baseline must be positive")]
    ZeroBaseline,
    #[error("item {0} has no {1:?} text")]
    MissingTextVariant(String, TextSource),
    #[error("prediction failed for item {0}: {1}")]
    ModelFailure(String, String),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl std::str::FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" => Ok(Sentiment::Positive),
            "negative" | "neg" | "0" => Ok(Sentiment::Negative),
            other => Err(format!("unknown sentiment {other:?}")),
        }
    }
}

/// Binary confusion counts; "positive" is the positive-sentiment class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix2 {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix2 {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionMatrix2 { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Sentiment, &'a Sentiment)>) -> Self {
        let mut m = ConfusionMatrix2::default();
        for (gold, pred) in pairs {
            match (gold, pred) {
                (Sentiment::Positive, Sentiment::Positive) => m.tp += 1,
                (Sentiment::Positive, Sentiment::Negative) => m.fn_ += 1,
                (Sentiment::Negative, Sentiment::Positive) => m.fp += 1,
                (Sentiment::Negative, Sentiment::Negative) => m.tn += 1,
            }
        }
        m
    }

    /// Same counts with the negative class treated as positive.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix2 {
            tp: self.tn,
            fn_: self.fp,
            fp: self.fn_,
            tn: self.tp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Precision/recall/F1 of the positive class.
    #[default]
    PositiveClass,
    /// Unweighted mean over both classes.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc2: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub support_positive: u64,
    pub support_negative: u64,
    pub total: u64,
    pub averaging: Averaging,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

fn class_prf(m: &ConfusionMatrix2) -> (Option<f64>, Option<f64>, Option<f64>) {
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    (p, r, harmonic(p, r))
}

pub fn metrics_from_confusion(m: &ConfusionMatrix2) -> Result<MetricsReport, EvalError> {
    metrics_with_averaging(m, Averaging::PositiveClass)
}

pub fn metrics_with_averaging(m: &ConfusionMatrix2, averaging: Averaging) -> Result<MetricsReport, EvalError> {
    let total = m.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let (precision, recall, f1) = match averaging {
        Averaging::PositiveClass => class_prf(m),
        Averaging::Macro => {
            let (p1, r1, f1) = class_prf(m);
            let (p0, r0, f0) = class_prf(&m.swapped());
            let mean = |a: Option<f64>, b: Option<f64>| Some((a? + b?) / 2.0);
            (mean(p1, p0), mean(r1, r0), mean(f1, f0))
        }
    };
    Ok(MetricsReport {
        acc2: (m.tp + m.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        auc: None,
        support_positive: m.tp + m.fn_,
        support_negative: m.fp + m.tn,
        total,
        averaging,
    })
}

/// Rank-based (Mann-Whitney) AUC; tied scores share their average rank.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group spans ranks i+1..=j+1.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn relative_improvement(baseline: f64, improved: f64) -> Result<f64, EvalError> {
    if baseline <= 0.0 || !baseline.is_finite() {
        return Err(EvalError::ZeroBaseline);
    }
    Ok((improved - baseline) / baseline)
}

/// What to do with a CMU-MOSEI sentiment score of exactly 0, which §4.2's
/// mapping ("-3~-1 negative, 1~3 positive") leaves unassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroPolicy {
    /// Exclude neutral items from binary evaluation.
    #[default]
    Drop,
    Positive,
    Negative,
}

/// Binarizes a CMU-MOSEI score in `[-3, 3]`: negative below 0, positive
/// above, and 0 per `zero`. `None` means the item is excluded.
pub fn mosei_sentiment(score: f64, zero: ZeroPolicy) -> Option<Sentiment> {
    if !score.is_finite() {
        return None;
    }
    if score < 0.0 {
        Some(Sentiment::Negative)
    } else if score > 0.0 {
        Some(Sentiment::Positive)
    } else {
        match zero {
            ZeroPolicy::Drop => None,
            ZeroPolicy::Positive => Some(Sentiment::Positive),
            ZeroPolicy::Negative => Some(Sentiment::Negative),
        }
    }
}

/// One prediction line: `{"video_id", "sentiment", "score"}` where `score`
/// is the positive-class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub sentiment: Sentiment,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub video_id: String,
    pub sentiment: Sentiment,
}

/// Joins predictions to gold labels by id and computes every metric,
/// including AUC when both classes are present.
pub fn evaluate_predictions(
    preds: &[PredictionRecord],
    gold: &[GoldRecord],
    averaging: Averaging,
) -> Result<MetricsReport, EvalError> {
    let by_id: BTreeMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.video_id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(gold.len());
    let mut scores = Vec::with_capacity(gold.len());
    let mut labels = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id
            .get(g.video_id.as_str())
            .ok_or_else(|| EvalError::Input(format!("no prediction for {}", g.video_id)))?;
        pairs.push((g.sentiment, p.sentiment));
        scores.push(p.score);
        labels.push(g.sentiment == Sentiment::Positive);
    }
    let m = ConfusionMatrix2::from_pairs(pairs.iter().map(|(g, p)| (g, p)));
    let mut report = metrics_with_averaging(&m, averaging)?;
    report.auc = auc_binary(&scores, &labels).ok();
    Ok(report)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| EvalError::Input(format!("line {}: {e}", n + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSource {
    Title,
    Transcript,
    Manual,
    Automatic,
}

/// One evaluation item. Only the textual input varies across experiments.
#[derive(Debug, Clone)]
pub struct AblationItem<I> {
    pub id: String,
    pub gold: Sentiment,
    pub texts: BTreeMap<TextSource, String>,
    /// Visual and acoustic inputs, held fixed.
    pub inputs: I,
}

/// Anything that maps fixed non-text inputs plus a text to a sentiment and
/// a positive-class score.
pub trait SentimentPredictor<I> {
    fn predict(&self, inputs: &I, text: &str) -> Result<(Sentiment, f64), String>;
}

impl<I, F> SentimentPredictor<I> for F
where
    F: Fn(&I, &str) -> Result<(Sentiment, f64), String>,
{
    fn predict(&self, inputs: &I, text: &str) -> Result<(Sentiment, f64), String> {
        self(inputs, text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub text_source: TextSource,
    pub metrics: MetricsReport,
    /// Relative ACC-2 change against the baseline experiment.
    pub improvement_vs_baseline: Option<f64>,
}

pub fn run_ablation<I>(
    text_source: TextSource,
    dataset: &[AblationItem<I>],
    model: &dyn SentimentPredictor<I>,
    averaging: Averaging,
) -> Result<MetricsReport, EvalError> {
    let mut preds = Vec::with_capacity(dataset.len());
    let mut gold = Vec::with_capacity(dataset.len());
    for item in dataset {
        let text = item
            .texts
            .get(&text_source)
            .ok_or_else(|| EvalError::MissingTextVariant(item.id.clone(), text_source))?;
        let (sentiment, score) = model
            .predict(&item.inputs, text)
            .map_err(|e| EvalError::ModelFailure(item.id.clone(), e))?;
        preds.push(PredictionRecord {
            video_id: item.id.clone(),
            sentiment,
            score,
        });
        gold.push(GoldRecord {
            video_id: item.id.clone(),
            sentiment: item.gold,
        });
    }
    evaluate_predictions(&preds, &gold, averaging)
}

/// Runs every experiment and fills in the improvement over `baseline`.
pub fn run_ablation_suite<I>(
    experiments: &[TextSource],
    baseline: TextSource,
    dataset: &[AblationItem<I>],
    model: &dyn SentimentPredictor<I>,
    averaging: Averaging,
) -> Result<Vec<ExperimentReport>, EvalError> {
    let base = run_ablation(baseline, dataset, model, averaging)?;
    experiments
        .iter()
        .map(|&src| {
            let metrics = if src == baseline {
                base.clone()
            } else {
                run_ablation(src, dataset, model, averaging)?
            };
            Ok(ExperimentReport {
                text_source: src,
                improvement_vs_baseline: relative_improvement(base.acc2, metrics.acc2).ok(),
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mosei_zero_follows_the_stated_policy() {
        assert_eq!(mosei_sentiment(-2.4, ZeroPolicy::Drop), Some(Sentiment::Negative));
        assert_eq!(mosei_sentiment(0.4, ZeroPolicy::Drop), Some(Sentiment::Positive));
        assert_eq!(mosei_sentiment(0.0, ZeroPolicy::Drop), None);
        assert_eq!(mosei_sentiment(-0.0, ZeroPolicy::Positive), Some(Sentiment::Positive));
        assert_eq!(mosei_sentiment(0.0, ZeroPolicy::Negative), Some(Sentiment::Negative));
        assert_eq!(mosei_sentiment(f64::NAN, ZeroPolicy::Positive), None);
    }

    #[test]
    fn reported_system_confusion() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(77, 8, 27, 35)).unwrap();
        assert!((r.acc2 - 112.0 / 147.0).abs() < 1e-12);
        assert!((r.precision.unwrap() - 0.7404).abs() < 5e-5);
        assert!((r.recall.unwrap() - 0.9059).abs() < 5e-5);
        // 2·77 / (2·77 + 27 + 8) = 154/189 = 0.81481…, the paper's "81.5%".
        assert!((r.f1.unwrap() - 154.0 / 189.0).abs() < 1e-12);
        assert!((r.f1.unwrap() - 0.815).abs() < 5e-4);
        assert_eq!((r.support_positive, r.support_negative), (85, 62));
    }

    #[test]
    fn perfect_and_undefined() {
        let r = metrics_from_confusion(&ConfusionMatrix2::new(10, 0, 0, 0)).unwrap();
        assert_eq!((r.acc2, r.f1), (1.0, Some(1.0)));
        let r = metrics_from_confusion(&ConfusionMatrix2::new(0, 0, 0, 5)).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.f1, None);
        assert_eq!(metrics_from_confusion(&ConfusionMatrix2::default()), Err(EvalError::EmptyMatrix));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(auc_binary(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass));
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_random_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|_| rng.random()).collect();
        assert!((auc_binary(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn relative_improvement_cases() {
        assert!((relative_improvement(74.82, 82.31).unwrap() - 0.1001).abs() < 1e-4);
        assert_eq!(relative_improvement(3.0, 3.0).unwrap(), 0.0);
        assert!((relative_improvement(0.8023, 0.8372).unwrap() - 0.0435).abs() < 1e-4);
        assert_eq!(relative_improvement(0.0, 1.0), Err(EvalError::ZeroBaseline));
    }

    #[test]
    fn macro_averaging_is_labelled() {
        let m = ConfusionMatrix2::new(77, 8, 27, 35);
        let r = metrics_with_averaging(&m, Averaging::Macro).unwrap();
        assert_eq!(r.averaging, Averaging::Macro);
        let pos = metrics_from_confusion(&m).unwrap().f1.unwrap();
        let neg = metrics_from_confusion(&m.swapped()).unwrap().f1.unwrap();
        assert!((r.f1.unwrap() - (pos + neg) / 2.0).abs() < 1e-12);
    }

    fn item(id: &str, gold: Sentiment, title: &str, transcript: &str) -> AblationItem<()> {
        AblationItem {
            id: id.into(),
            gold,
            texts: [(TextSource::Title, title.to_string()), (TextSource::Transcript, transcript.to_string())]
                .into_iter()
                .collect(),
            inputs: (),
        }
    }

    #[test]
    fn identical_text_variants_give_identical_reports() {
        let data = vec![
            item("a", Sentiment::Positive, "good day", "good day"),
            item("b", Sentiment::Negative, "bad", "bad"),
        ];
        let model = |_: &(), t: &str| -> Result<(Sentiment, f64), String> {
            let s = if t.contains("good") { 0.9 } else { 0.2 };
            Ok((if s > 0.5 { Sentiment::Positive } else { Sentiment::Negative }, s))
        };
        let a = run_ablation(TextSource::Title, &data, &model, Averaging::PositiveClass).unwrap();
        let b = run_ablation(TextSource::Transcript, &data, &model, Averaging::PositiveClass).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_stub_rewards_longer_transcripts() {
        // Stub: positive iff text has more than 3 words. Transcripts for the
        // positive items are long, titles are all short.
        let data: Vec<_> = (0..20)
            .map(|i| {
                let gold = if i % 2 == 0 { Sentiment::Positive } else { Sentiment::Negative };
                let transcript = if gold == Sentiment::Positive { "we are so happy about this" } else { "no" };
                item(&format!("v{i}"), gold, "title", transcript)
            })
            .collect();
        let model = |_: &(), t: &str| -> Result<(Sentiment, f64), String> {
            let n = t.split_whitespace().count();
            Ok((if n > 3 { Sentiment::Positive } else { Sentiment::Negative }, n as f64 / 10.0))
        };
        let reports = run_ablation_suite(
            &[TextSource::Title, TextSource::Transcript],
            TextSource::Title,
            &data,
            &model,
            Averaging::PositiveClass,
        )
        .unwrap();
        assert_eq!(reports[0].metrics.acc2, 0.5);
        assert_eq!(reports[1].metrics.acc2, 1.0);
        assert_eq!(reports[0].improvement_vs_baseline, Some(0.0));
        assert_eq!(reports[1].improvement_vs_baseline, Some(1.0));
    }

    #[test]
    fn missing_variant_is_reported() {
        let data = vec![item("a", Sentiment::Positive, "t", "x")];
        let model = |_: &(), _: &str| -> Result<(Sentiment, f64), String> { Ok((Sentiment::Positive, 1.0)) };
        assert_eq!(
            run_ablation(TextSource::Manual, &data, &model, Averaging::PositiveClass),
            Err(EvalError::MissingTextVariant("a".into(), TextSource::Manual))
        );
    }

    proptest! {
        #[test]
        fn metrics_match_per_element_formulas(tp in 0u64..500, fn_ in 0u64..500, fp in 0u64..500, tn in 0u64..500) {
            prop_assume!(tp + fn_ + fp + tn > 0);
            let r = metrics_from_confusion(&ConfusionMatrix2::new(tp, fn_, fp, tn)).unwrap();
            let (tpf, fnf, fpf, tnf) = (tp as f64, fn_ as f64, fp as f64, tn as f64);
            prop_assert!((r.acc2 - (tpf + tnf) / (tpf + fnf + fpf + tnf)).abs() < 1e-12);
            if tp + fp > 0 { prop_assert!((r.precision.unwrap() - tpf / (tpf + fpf)).abs() < 1e-12); }
            if tp + fn_ > 0 { prop_assert!((r.recall.unwrap() - tpf / (tpf + fnf)).abs() < 1e-12); }
            if tp > 0 {
                prop_assert!((r.f1.unwrap() - 2.0 * tpf / (2.0 * tpf + fpf + fnf)).abs() < 1e-12);
            }
        }

        #[test]
        fn metrics_scale_invariant(tp in 0u64..200, fn_ in 0u64..200, fp in 0u64..200, tn in 0u64..200, c in 2u64..50) {
            prop_assume!(tp + fn_ + fp + tn > 0);
            let a = metrics_from_confusion(&ConfusionMatrix2::new(tp, fn_, fp, tn)).unwrap();
            let b = metrics_from_confusion(&ConfusionMatrix2::new(tp * c, fn_ * c, fp * c, tn * c)).unwrap();
            prop_assert!((a.acc2 - b.acc2).abs() < 1e-12);
            for (x, y) in [(a.precision, b.precision), (a.recall, b.recall), (a.f1, b.f1)] {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }

        #[test]
        fn class_swap_exchanges_roles(tp in 1u64..200, fn_ in 1u64..200, fp in 1u64..200, tn in 1u64..200) {
            let m = ConfusionMatrix2::new(tp, fn_, fp, tn);
            let a = metrics_from_confusion(&m).unwrap();
            let b = metrics_from_confusion(&m.swapped()).unwrap();
            prop_assert_eq!(a.acc2, b.acc2);
            // Precision of the swapped positive class = negative predictive value.
            prop_assert!((b.precision.unwrap() - tn as f64 / (tn + fn_) as f64).abs() < 1e-12);
            prop_assert!((b.recall.unwrap() - tn as f64 / (tn + fp) as f64).abs() < 1e-12);
        }

        #[test]
        fn auc_matches_pairwise_and_is_monotone_invariant(
            pts in proptest::collection::vec((0u32..20, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 20.0).collect();
            let labels: Vec<bool> = pts.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auc_binary(&scores, &labels).unwrap();
            prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((a - auc_binary(&warped, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
