//! Threshold calibration, classification, detection metrics, and the
//! end-to-end deployment pipeline (tokens → features → score → label).
//!
//! The threshold sits k standard deviations above the mean of the validation
//! score distribution (population std, k = 2 by default). Scores strictly
//! above it are anomalous; a score exactly on the boundary is benign.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{ForestError, IsolationForestModel};
use crate::nn::{extractor_forward, ExtractorModel, FeatureVector, NnError};
use crate::quant::{quantized_forward, QuantizedModel};

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("need at least 2 validation scores, got {0}")]
    InsufficientScores(usize),
    #[error("validation scores contain a non-finite value")]
    NonFiniteScore,
    #[error("predicted and truth lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("artifact mismatch: {what} ({left} vs {right})")]
    ArtifactMismatch { what: String, left: usize, right: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Calibrated decision boundary: value = mean + k·std, recomputable from its
/// parts (the artifact loader re-checks the identity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub mean: f64,
    pub std: f64,
    pub k: f64,
    pub value: f64,
}

impl Threshold {
    /// True when value == mean + k·std bit-for-bit.
    pub fn is_consistent(&self) -> bool {
        self.value.to_bits() == (self.mean + self.k * self.std).to_bits()
    }
}

/// Population mean and standard deviation (divide by n) of the validation
/// scores, shifted by k·std.
pub fn calibrate_threshold(val_scores: &[f64], k: f64) -> Result<Threshold, DetectError> {
    if val_scores.len() < 2 {
        return Err(DetectError::InsufficientScores(val_scores.len()));
    }
    if val_scores.iter().any(|s| !s.is_finite()) {
        return Err(DetectError::NonFiniteScore);
    }
    // A constant score list has exactly zero variance; skip the accumulation
    // so the degenerate case stays exact.
    if val_scores.iter().all(|s| *s == val_scores[0]) {
        let mean = val_scores[0];
        return Ok(Threshold { mean, std: 0.0, k, value: mean + k * 0.0 });
    }
    let n = val_scores.len() as f64;
    let mean = val_scores.iter().sum::<f64>() / n;
    let var = val_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(Threshold { mean, std, k, value: mean + k * std })
}

/// Population skewness of the score distribution, reported as a diagnostic
/// for the Gaussian assumption behind the mean + k·std rule. Zero when the
/// variance vanishes.
pub fn score_skewness(scores: &[f64]) -> f64 {
    if scores.len() < 2 {
        return 0.0;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let m2 = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    let m3 = scores.iter().map(|s| (s - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// 1 iff score is strictly above the threshold; the boundary itself is benign.
pub fn classify(score: f64, threshold: &Threshold) -> u8 {
    u8::from(score > threshold.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall, and F1 over binary labels; each term is 0 when its
/// denominator is 0.
pub fn evaluate(predicted: &[u8], truth: &[u8]) -> Result<Metrics, DetectError> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(DetectError::LengthMismatch(predicted.len(), truth.len()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics { precision, recall, f1 })
}

/// Anything that maps a token window to a feature vector: the float model or
/// its quantized counterpart.
pub trait FeatureExtractor {
    fn input_len(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn extract(&self, tokens: &[u32]) -> Result<FeatureVector, NnError>;
}

impl FeatureExtractor for ExtractorModel {
    fn input_len(&self) -> usize {
        self.hyper.input_len
    }

    fn feature_dim(&self) -> usize {
        self.hyper.feature_dim
    }

    fn extract(&self, tokens: &[u32]) -> Result<FeatureVector, NnError> {
        extractor_forward(self, tokens).map(|(f, _)| f)
    }
}

impl FeatureExtractor for QuantizedModel {
    fn input_len(&self) -> usize {
        self.hyper.input_len
    }

    fn feature_dim(&self) -> usize {
        self.hyper.feature_dim
    }

    fn extract(&self, tokens: &[u32]) -> Result<FeatureVector, NnError> {
        quantized_forward(self, tokens)
    }
}

/// One classified window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub score: f64,
    pub label: u8,
    /// Wall-clock seconds around exactly forward + score + classify.
    pub elapsed_seconds: f64,
}

/// Run one window through extractor → forest → threshold. Artifacts must be
/// dimensionally consistent; the offending pair is named otherwise.
pub fn deploy_pipeline(
    tokens: &[u32],
    extractor: &dyn FeatureExtractor,
    forest: &IsolationForestModel,
    threshold: &Threshold,
) -> Result<Detection, DetectError> {
    if tokens.len() != extractor.input_len() {
        return Err(DetectError::ArtifactMismatch {
            what: "window length vs model input length".into(),
            left: tokens.len(),
            right: extractor.input_len(),
        });
    }
    if extractor.feature_dim() != forest.dim() {
        return Err(DetectError::ArtifactMismatch {
            what: "model feature dim vs forest dim".into(),
            left: extractor.feature_dim(),
            right: forest.dim(),
        });
    }
    let started = Instant::now();
    let feature = extractor.extract(tokens)?;
    let score = forest.score(&feature)?;
    let label = classify(score, threshold);
    let elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(Detection { score, label, elapsed_seconds })
}

// ---------------------------------------------------------------------------
// Reporting

/// One row of the tabular export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    /// Source recording name, for per-recording aggregation.
    pub source: String,
    pub score: f64,
    pub predicted: u8,
    pub truth: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub per_sample_seconds: Vec<f64>,
    pub mean: f64,
    pub p95: f64,
}

impl LatencyStats {
    pub fn from_samples(per_sample_seconds: Vec<f64>) -> Self {
        let mean = mean_of(&per_sample_seconds);
        let p95 = percentile(&per_sample_seconds, 0.95);
        LatencyStats { per_sample_seconds, mean, p95 }
    }
}

pub fn mean_of(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile: sorted[⌈q·n⌉ − 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((q * sorted.len() as f64).ceil() as usize).saturating_sub(1).min(sorted.len() - 1);
    sorted[idx]
}

/// Any-window rule: a recording is flagged iff any of its windows is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingSummary {
    pub recording: String,
    pub windows: usize,
    pub flagged: usize,
    pub predicted: u8,
    pub truth: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub model_hash: String,
    pub threshold: Threshold,
}

/// Full detection report: metadata, per-sample rows, aggregates, and
/// (when measured) latency. Window-level metrics are the primary output;
/// recording-level aggregation is a report option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub metadata: ReportMeta,
    pub samples: Vec<SampleRecord>,
    pub aggregates: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recordings: Option<Vec<RecordingSummary>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recording_metrics: Option<Metrics>,
}

impl DetectionReport {
    pub fn new(metadata: ReportMeta, samples: Vec<SampleRecord>) -> Result<Self, DetectError> {
        let predicted: Vec<u8> = samples.iter().map(|s| s.predicted).collect();
        let truth: Vec<u8> = samples.iter().map(|s| s.truth).collect();
        let aggregates = evaluate(&predicted, &truth)?;
        Ok(DetectionReport {
            metadata,
            samples,
            aggregates,
            latency: None,
            recordings: None,
            recording_metrics: None,
        })
    }

    /// Attach the any-window-anomalous recording aggregation.
    pub fn with_recording_aggregation(mut self) -> Result<Self, DetectError> {
        let recordings = aggregate_recordings(&self.samples);
        let predicted: Vec<u8> = recordings.iter().map(|r| r.predicted).collect();
        let truth: Vec<u8> = recordings.iter().map(|r| r.truth).collect();
        self.recording_metrics = Some(evaluate(&predicted, &truth)?);
        self.recordings = Some(recordings);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Flat comma-separated export, one row per sample, with a header line.
    /// A seconds column is appended when latency was measured.
    pub fn to_csv(&self) -> String {
        let timed = self
            .latency
            .as_ref()
            .filter(|l| l.per_sample_seconds.len() == self.samples.len());
        let mut out = String::from(if timed.is_some() {
            "window,source,score,predicted,truth,seconds\n"
        } else {
            "window,source,score,predicted,truth\n"
        });
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}",
                s.index, s.source, s.score, s.predicted, s.truth
            ));
            if let Some(lat) = timed {
                out.push_str(&format!(",{}", lat.per_sample_seconds[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable summary.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("dataset:    {}\n", self.metadata.dataset));
        out.push_str(&format!("model hash: {}\n", self.metadata.model_hash));
        let t = &self.metadata.threshold;
        out.push_str(&format!(
            "threshold:  mean {:.6} + {} x std {:.6} = {:.6}\n",
            t.mean, t.k, t.std, t.value
        ));
        let flagged = self.samples.iter().filter(|s| s.predicted == 1).count();
        let truth = self.samples.iter().filter(|s| s.truth == 1).count();
        out.push_str(&format!(
            "windows:    {} total, {} flagged, {} truly anomalous\n",
            self.samples.len(),
            flagged,
            truth
        ));
        out.push_str(&format!(
            "window metrics:    precision {:.4}  recall {:.4}  f1 {:.4}\n",
            self.aggregates.precision, self.aggregates.recall, self.aggregates.f1
        ));
        if let Some(m) = &self.recording_metrics {
            out.push_str(&format!(
                "recording metrics: precision {:.4}  recall {:.4}  f1 {:.4}\n",
                m.precision, m.recall, m.f1
            ));
        }
        if let Some(l) = &self.latency {
            out.push_str(&format!(
                "latency:    mean {:.6}s  p95 {:.6}s over {} samples\n",
                l.mean,
                l.p95,
                l.per_sample_seconds.len()
            ));
        }
        out
    }
}

/// Group samples by source in first-appearance order.
pub fn aggregate_recordings(samples: &[SampleRecord]) -> Vec<RecordingSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut by_name: std::collections::HashMap<&str, RecordingSummary> =
        std::collections::HashMap::new();
    for s in samples {
        if !by_name.contains_key(s.source.as_str()) {
            order.push(s.source.clone());
            by_name.insert(
                s.source.as_str(),
                RecordingSummary {
                    recording: s.source.clone(),
                    windows: 0,
                    flagged: 0,
                    predicted: 0,
                    truth: 0,
                },
            );
        }
        let entry = by_name.get_mut(s.source.as_str()).expect("just inserted");
        entry.windows += 1;
        entry.flagged += usize::from(s.predicted == 1);
        entry.predicted |= s.predicted;
        entry.truth |= s.truth;
    }
    order.iter().map(|name| by_name[name.as_str()].clone()).collect()
}

/// Parse the tabular export back into sample records. The optional seconds
/// column is ignored.
pub fn parse_csv(text: &str) -> Result<Vec<SampleRecord>, DetectError> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(DetectError::LengthMismatch(fields.len(), 5));
        }
        let parse_err = |_| DetectError::NonFiniteScore;
        rows.push(SampleRecord {
            index: fields[0].parse().map_err(|_| DetectError::NonFiniteScore)?,
            source: fields[1].to_string(),
            score: fields[2].parse().map_err(parse_err)?,
            predicted: fields[3].parse().map_err(|_| DetectError::NonFiniteScore)?,
            truth: fields[4].parse().map_err(|_| DetectError::NonFiniteScore)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn calibrate_zero_variance() {
        let t = calibrate_threshold(&[0.4, 0.4, 0.4], 2.0).unwrap();
        assert_eq!((t.mean, t.std, t.value), (0.4, 0.0, 0.4));
    }

    #[test]
    fn calibrate_hand_arithmetic() {
        // mean 2, population std sqrt(2/3), value 2 + 2*sqrt(2/3).
        let t = calibrate_threshold(&[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_eq!(t.mean, 2.0);
        assert!((t.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((t.value - (2.0 + 2.0 * (2.0f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!(t.is_consistent());
    }

    #[test]
    fn calibrate_k_zero_is_mean() {
        let t = calibrate_threshold(&[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(t.value, 2.0);
    }

    #[test]
    fn calibrate_rejects_degenerate_input() {
        assert_eq!(calibrate_threshold(&[1.0], 2.0), Err(DetectError::InsufficientScores(1)));
        assert_eq!(
            calibrate_threshold(&[1.0, f64::INFINITY], 2.0),
            Err(DetectError::NonFiniteScore)
        );
    }

    #[test]
    fn classify_boundary_is_benign() {
        let t = calibrate_threshold(&[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_eq!(classify(t.value, &t), 0);
        assert_eq!(classify(t.value + 1e-9, &t), 1);
        assert_eq!(classify(t.value - 1.0, &t), 0);
    }

    #[test]
    fn evaluate_perfect() {
        let m = evaluate(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn evaluate_confusion_matrix_by_hand() {
        // TP=2, FP=1, FN=1 -> all three metrics 2/3.
        let m = evaluate(&[1, 1, 1, 0], &[1, 0, 1, 1]).unwrap();
        let two_thirds = 2.0 / 3.0;
        assert!((m.precision - two_thirds).abs() < 1e-15);
        assert!((m.recall - two_thirds).abs() < 1e-15);
        assert!((m.f1 - two_thirds).abs() < 1e-15);
    }

    #[test]
    fn evaluate_degenerate_denominators() {
        let m = evaluate(&[0, 0, 0], &[0, 1, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_rejects_length_mismatch() {
        assert!(matches!(evaluate(&[1], &[1, 0]), Err(DetectError::LengthMismatch(1, 2))));
    }

    #[test]
    fn skewness_symmetric_is_zero() {
        assert_eq!(score_skewness(&[0.5, 0.5, 0.5]), 0.0);
        let s = score_skewness(&[1.0, 2.0, 3.0]);
        assert!(s.abs() < 1e-12);
    }

    fn report_fixture() -> DetectionReport {
        let meta = ReportMeta {
            dataset: "unit".into(),
            model_hash: "abc".into(),
            threshold: calibrate_threshold(&[0.3, 0.4, 0.5], 2.0).unwrap(),
        };
        let samples = vec![
            SampleRecord { index: 0, source: "n0".into(), score: 0.3, predicted: 0, truth: 0 },
            SampleRecord { index: 1, source: "n0".into(), score: 0.8, predicted: 1, truth: 0 },
            SampleRecord { index: 2, source: "a0".into(), score: 0.9, predicted: 1, truth: 1 },
            SampleRecord { index: 3, source: "a0".into(), score: 0.2, predicted: 0, truth: 1 },
        ];
        DetectionReport::new(meta, samples).unwrap()
    }

    #[test]
    fn report_csv_roundtrip() {
        let report = report_fixture();
        let csv = report.to_csv();
        assert!(csv.starts_with("window,source,score,predicted,truth\n"));
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows, report.samples);
    }

    #[test]
    fn report_json_roundtrip() {
        let report = report_fixture().with_recording_aggregation().unwrap();
        let json = report.to_json();
        let back = DetectionReport::from_json(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn recording_aggregation_any_window_rule() {
        let report = report_fixture().with_recording_aggregation().unwrap();
        let recs = report.recordings.unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].recording.as_str(), recs[0].predicted, recs[0].truth), ("n0", 1, 0));
        assert_eq!((recs[1].recording.as_str(), recs[1].predicted, recs[1].truth), ("a0", 1, 1));
    }

    #[test]
    fn latency_aggregates_match_list() {
        let l = LatencyStats::from_samples(vec![0.4, 0.1, 0.3, 0.2]);
        assert!((l.mean - 0.25).abs() < 1e-15);
        assert_eq!(l.p95, 0.4);
    }

    proptest! {
        // precision == recall == f1 whenever FP == FN; construct the
        // confusion matrix directly with equal off-diagonal counts.
        #[test]
        fn metric_identity_when_fp_equals_fn(
            tp in 0usize..20, tn in 0usize..20, fpfn in 0usize..20
        ) {
            prop_assume!(tp + tn + 2 * fpfn > 0);
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for _ in 0..tp { predicted.push(1); truth.push(1); }
            for _ in 0..tn { predicted.push(0); truth.push(0); }
            for _ in 0..fpfn { predicted.push(1); truth.push(0); }
            for _ in 0..fpfn { predicted.push(0); truth.push(1); }
            let m = evaluate(&predicted, &truth).unwrap();
            prop_assert!((m.precision - m.recall).abs() < 1e-12);
            prop_assert!((m.f1 - m.precision).abs() < 1e-12);
        }

        // Scaling all scores by a > 0 and shifting by b maps the threshold
        // value to a*value + b.
        #[test]
        fn threshold_affine_equivariance(
            scores in proptest::collection::vec(-10.0f64..10.0, 2..50),
            a in 0.01f64..100.0,
            b in -100.0f64..100.0,
            k in 0.0f64..5.0,
        ) {
            let base = calibrate_threshold(&scores, k).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            let shifted = calibrate_threshold(&mapped, k).unwrap();
            let expected = a * base.value + b;
            let tol = 1e-9 * (1.0 + expected.abs());
            prop_assert!((shifted.value - expected).abs() < tol,
                "expected {expected}, got {}", shifted.value);
        }
    }
}
