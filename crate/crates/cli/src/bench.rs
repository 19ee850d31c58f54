//! Latency benchmark: per-sample wall time of the deployment pipeline on a
//! single thread, one discarded warm-up pass, plus model payload sizes.

use hids_core::artifact::{load_dataset, load_forest, load_model, load_quantized, load_threshold};
use hids_core::detect::{deploy_pipeline, mean_of, percentile, FeatureExtractor, Threshold};
use hids_core::forest::IsolationForestModel;
use hids_core::ingest::TokenSequence;
use hids_core::quant::float_payload_bytes;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::Paths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub per_sample_seconds: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl BenchTiming {
    pub fn from_samples(per_sample_seconds: Vec<f64>) -> Self {
        let mean = mean_of(&per_sample_seconds);
        let median = percentile(&per_sample_seconds, 0.5);
        let p95 = percentile(&per_sample_seconds, 0.95);
        BenchTiming { per_sample_seconds, mean, median, p95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub float: BenchTiming,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quantized: Option<BenchTiming>,
    pub float_payload_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quantized_payload_bytes: Option<usize>,
    pub environment: String,
}

/// One warm-up pass over the windows (discarded), then `repetitions` timed
/// passes; every per-window measurement lands in the list.
pub fn time_pipeline(
    extractor: &dyn FeatureExtractor,
    forest: &IsolationForestModel,
    threshold: &Threshold,
    windows: &[TokenSequence],
    repetitions: usize,
) -> Result<Vec<f64>, CliError> {
    for seq in windows {
        deploy_pipeline(&seq.tokens, extractor, forest, threshold)?;
    }
    let mut seconds = Vec::with_capacity(windows.len() * repetitions);
    for _ in 0..repetitions {
        for seq in windows {
            let d = deploy_pipeline(&seq.tokens, extractor, forest, threshold)?;
            seconds.push(d.elapsed_seconds);
        }
    }
    Ok(seconds)
}

pub fn cmd_bench(config: &PipelineConfig, paths: &Paths) -> Result<BenchReport, CliError> {
    let dataset = load_dataset(&paths.dataset())?;
    let forest = load_forest(&paths.forest())?;
    let (model, _) = load_model(&paths.model())?;
    let threshold = load_threshold(&paths.threshold(false))?;
    let windows = &dataset.split.test;
    if windows.is_empty() {
        return Err(CliError::Data("bench: dataset has no test windows".into()));
    }
    let reps = config.bench.repetitions;

    let float = BenchTiming::from_samples(time_pipeline(&model, &forest, &threshold, windows, reps)?);

    let (quantized, quantized_payload_bytes) = if paths.model_q().exists() {
        let (qm, _) = load_quantized(&paths.model_q())?;
        let qthreshold = if paths.threshold(true).exists() {
            load_threshold(&paths.threshold(true))?
        } else {
            threshold
        };
        let timing =
            BenchTiming::from_samples(time_pipeline(&qm, &forest, &qthreshold, windows, reps)?);
        (Some(timing), Some(qm.payload_bytes()))
    } else {
        (None, None)
    };

    let report = BenchReport {
        float,
        quantized,
        float_payload_bytes: float_payload_bytes(&model),
        quantized_payload_bytes,
        environment: format!(
            "{} {}, single-threaded timing over {} windows x {} repetitions",
            std::env::consts::OS,
            std::env::consts::ARCH,
            windows.len(),
            reps
        ),
    };

    std::fs::write(
        paths.bench(),
        serde_json::to_string_pretty(&report).expect("bench report serializes"),
    )
    .map_err(|e| CliError::Data(format!("cannot write bench report: {e}")))?;

    eprintln!(
        "bench: float mean {:.6}s p95 {:.6}s | payload {} B{}",
        report.float.mean,
        report.float.p95,
        report.float_payload_bytes,
        match (&report.quantized, report.quantized_payload_bytes) {
            (Some(q), Some(b)) => format!(
                " | quantized mean {:.6}s p95 {:.6}s payload {b} B (ratio {:.4})",
                q.mean,
                q.p95,
                b as f64 / report.float_payload_bytes as f64
            ),
            _ => String::new(),
        }
    );
    Ok(report)
}
