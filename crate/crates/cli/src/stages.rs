//! Pipeline stages. One stage = one artifact in, one artifact out, all under
//! the chosen output directory, so any stage can be re-run in isolation and
//! reproduce identical bytes from the same config and seed.
//!
//! Persisted artifacts never contain wall-clock measurements; latency is
//! reported by the bench stage (and printed, not stored, by detect), which
//! keeps full-pipeline reruns byte-identical.

use std::path::{Path, PathBuf};

use hids_core::artifact::{
    load_dataset, load_forest, load_model, load_quantized, load_threshold, save_dataset,
    save_forest, save_model, save_quantized, save_threshold, save_vocabulary, StoredDataset,
};
use hids_core::detect::{
    deploy_pipeline, parse_csv, score_skewness, DetectionReport, FeatureExtractor, LatencyStats,
    ReportMeta, SampleRecord,
};
use hids_core::forest::fit_with_workers;
use hids_core::ingest::{
    build_vocabulary, parse_trace, split_dataset, tokenize, window, Label, TokenSequence,
};
use hids_core::nn::ExtractorModel;
use hids_core::quant::{quantize_model, QuantizedModel};
use hids_core::svdd::{extract_features, train, SvddState};
use hids_core::synth::generate_corpus;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliError;

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Paths { out: out.into() }
    }

    pub fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", self.out.display())))
    }

    pub fn traces_dir(&self, config: &PipelineConfig) -> PathBuf {
        if config.ingest.traces_dir.is_empty() {
            self.out.join("traces")
        } else {
            PathBuf::from(&config.ingest.traces_dir)
        }
    }

    pub fn manifest(&self, config: &PipelineConfig) -> PathBuf {
        self.traces_dir(config).join("manifest.txt")
    }

    pub fn vocab(&self) -> PathBuf {
        self.out.join("vocab.txt")
    }

    pub fn dataset(&self) -> PathBuf {
        self.out.join("dataset.bin")
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.bin")
    }

    pub fn model_q(&self) -> PathBuf {
        self.out.join("model_q.bin")
    }

    pub fn forest(&self) -> PathBuf {
        self.out.join("forest.bin")
    }

    pub fn threshold(&self, quantized: bool) -> PathBuf {
        self.out.join(if quantized { "threshold_q.bin" } else { "threshold.bin" })
    }

    pub fn detections(&self, quantized: bool) -> PathBuf {
        self.out.join(if quantized { "detections_q.csv" } else { "detections.csv" })
    }

    pub fn report_json(&self, quantized: bool) -> PathBuf {
        self.out.join(if quantized { "report_q.json" } else { "report.json" })
    }

    pub fn report_txt(&self, quantized: bool) -> PathBuf {
        self.out.join(if quantized { "report_q.txt" } else { "report.txt" })
    }

    pub fn bench(&self) -> PathBuf {
        self.out.join("bench.json")
    }
}

/// Worker cap for parallel stages: LIGHT_HIDS_THREADS bounds the default of
/// min(available cores, 8). Determinism does not depend on the count.
pub fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut workers = available.min(8);
    if let Some(cap) = std::env::var("LIGHT_HIDS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
    {
        workers = workers.min(cap);
    }
    workers.min(jobs.max(1))
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Normal => "normal",
        Label::Anomalous => "anomalous",
        Label::Unlabeled => "unlabeled",
    }
}

fn name_label(name: &str) -> Result<Label, CliError> {
    match name {
        "normal" => Ok(Label::Normal),
        "anomalous" => Ok(Label::Anomalous),
        "unlabeled" => Ok(Label::Unlabeled),
        other => Err(CliError::Data(format!("manifest: unknown label {other:?}"))),
    }
}

/// Write the synthetic corpus as plain_names trace files plus a manifest
/// mapping file name to label.
pub fn cmd_synth(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let corpus = generate_corpus(&config.corpus_config())?;
    let dir = paths.traces_dir(config);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;

    let mut manifest = String::new();
    for trace in &corpus {
        let file = format!("{}.txt", trace.name);
        let mut body = String::with_capacity(trace.calls.len() * 8);
        for call in &trace.calls {
            body.push_str(call);
            body.push('\n');
        }
        std::fs::write(dir.join(&file), body)
            .map_err(|e| CliError::Data(format!("cannot write trace {file}: {e}")))?;
        manifest.push_str(&format!("{file} {}\n", label_name(trace.label)));
    }
    std::fs::write(paths.manifest(config), manifest)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    eprintln!("synth: wrote {} traces to {}", corpus.len(), dir.display());
    Ok(())
}

/// Parse every trace in the manifest, build the vocabulary from normal
/// traces, window (train stride for the normal pool, detect stride for
/// anomalous recordings), and split.
pub fn cmd_ingest(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let dir = paths.traces_dir(config);
    let manifest_path = paths.manifest(config);
    let manifest = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let format = config.trace_format()?;
    let pad = config.pad_mode()?;

    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut events = Vec::new();
    let mut skipped_total = 0usize;
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line
            .split_once(' ')
            .ok_or_else(|| CliError::Data(format!("manifest: bad line {line:?}")))?;
        let label = name_label(label.trim())?;
        let raw = std::fs::read(dir.join(file))
            .map_err(|e| CliError::Data(format!("cannot read trace {file}: {e}")))?;
        let (evs, skipped) = parse_trace(&raw, format)?;
        skipped_total += skipped;
        names.push(file.trim_end_matches(".txt").to_string());
        labels.push(label);
        events.push(evs);
    }
    if names.is_empty() {
        return Err(CliError::Data("manifest lists no traces".into()));
    }
    if skipped_total > 0 {
        eprintln!("ingest: skipped {skipped_total} malformed lines");
    }

    let normal_events: Vec<_> = events
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l == Label::Normal)
        .map(|(e, _)| e.clone())
        .collect();
    let vocab = build_vocabulary(&normal_events)?;

    let mut normal_windows = Vec::new();
    let mut anomalous_windows = Vec::new();
    for (idx, (evs, label)) in events.iter().zip(&labels).enumerate() {
        let tokens = tokenize(evs, &vocab);
        let stride = match label {
            Label::Normal => config.ingest.train_stride,
            _ => config.ingest.detect_stride,
        };
        let ws = window(&tokens, config.ingest.window_len, stride, pad, *label);
        for w in ws {
            let w = w.with_source(idx as u32);
            match label {
                Label::Normal => normal_windows.push(w),
                _ => anomalous_windows.push(w),
            }
        }
    }

    let split = split_dataset(
        normal_windows,
        anomalous_windows,
        config.ingest.train_frac,
        config.ingest.val_frac,
        config.pipeline.seed,
    )?;
    eprintln!(
        "ingest: V={}, windows train={} validation={} test={}",
        vocab.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    paths.ensure_out()?;
    save_vocabulary(&paths.vocab(), &vocab)?;
    save_dataset(
        &paths.dataset(),
        &StoredDataset {
            split,
            sources: names,
            vocab_size: vocab.len(),
            input_len: config.ingest.window_len,
        },
    )?;
    Ok(())
}

/// Train the extractor on the train split and persist it together with the
/// hypersphere state. One structured log record per epoch goes to stdout.
pub fn cmd_train(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let dataset = load_dataset(&paths.dataset())?;
    let arch = config.arch_config(dataset.vocab_size);
    if arch.input_len != dataset.input_len {
        return Err(CliError::Config(format!(
            "train: window_len {} does not match the dataset's window length {}",
            arch.input_len, dataset.input_len
        )));
    }
    let model = ExtractorModel::init(&arch, config.pipeline.seed)?;
    let (model, state, history) = train(model, &dataset.split, &config.train_config()?)?;
    for epoch in &history {
        println!("{}", serde_json::to_string(epoch).expect("epoch record serializes"));
    }
    save_model(&paths.model(), &model, Some(&state))?;
    eprintln!("train: saved {}", paths.model().display());
    Ok(())
}

/// Int8-quantize the trained model; the hypersphere state rides along.
pub fn cmd_quantize(_config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let (model, svdd) = load_model(&paths.model())?;
    let qm = quantize_model(&model)?;
    save_quantized(&paths.model_q(), &qm, svdd.as_ref())?;
    let ratio = qm.payload_bytes() as f64 / hids_core::quant::float_payload_bytes(&model) as f64;
    eprintln!("quantize: saved {} (payload ratio {ratio:.4})", paths.model_q().display());
    Ok(())
}

enum Extractor {
    Float(ExtractorModel),
    Quantized(QuantizedModel),
}

impl Extractor {
    fn as_dyn(&self) -> &dyn FeatureExtractor {
        match self {
            Extractor::Float(m) => m,
            Extractor::Quantized(m) => m,
        }
    }
}

fn load_extractor(paths: &Paths, quantized: bool) -> Result<(Extractor, Option<SvddState>), CliError> {
    if quantized {
        let (m, s) = load_quantized(&paths.model_q())?;
        Ok((Extractor::Quantized(m), s))
    } else {
        let (m, s) = load_model(&paths.model())?;
        Ok((Extractor::Float(m), s))
    }
}

fn features_for(
    extractor: &Extractor,
    windows: &[TokenSequence],
) -> Result<Vec<Vec<f64>>, CliError> {
    match extractor {
        Extractor::Float(m) => Ok(extract_features(m, windows)?),
        Extractor::Quantized(m) => windows
            .iter()
            .map(|w| hids_core::quant::quantized_forward(m, &w.tokens).map_err(CliError::from))
            .collect(),
    }
}

/// Fit the isolation forest on train-split features.
pub fn cmd_fit_forest(
    config: &PipelineConfig,
    paths: &Paths,
    quantized: bool,
) -> Result<(), CliError> {
    let dataset = load_dataset(&paths.dataset())?;
    let (extractor, _) = load_extractor(paths, quantized)?;
    let features = features_for(&extractor, &dataset.split.train)?;
    let forest = fit_with_workers(
        &features,
        config.forest.trees,
        config.forest.psi,
        config.pipeline.seed,
        worker_count(config.forest.trees),
    )?;
    save_forest(&paths.forest(), &forest)?;
    eprintln!(
        "fit-forest: {} trees, psi_eff={}, saved {}",
        config.forest.trees,
        forest.psi_eff(),
        paths.forest().display()
    );
    Ok(())
}

/// Score the validation split through the deployed extractor and set the
/// threshold at mean + k·std. The score skew is printed as a diagnostic of
/// the Gaussian assumption, not acted upon.
pub fn cmd_calibrate(
    config: &PipelineConfig,
    paths: &Paths,
    quantized: bool,
) -> Result<(), CliError> {
    let dataset = load_dataset(&paths.dataset())?;
    let (extractor, _) = load_extractor(paths, quantized)?;
    let forest = load_forest(&paths.forest())?;
    let features = features_for(&extractor, &dataset.split.validation)?;
    let scores = features
        .iter()
        .map(|f| forest.score(f).map_err(CliError::from))
        .collect::<Result<Vec<f64>, _>>()?;
    let threshold = hids_core::detect::calibrate_threshold(&scores, config.calibrate.k)?;
    save_threshold(&paths.threshold(quantized), &threshold)?;
    eprintln!(
        "calibrate: mean {:.6} std {:.6} k {} -> value {:.6} (score skew {:.4})",
        threshold.mean,
        threshold.std,
        threshold.k,
        threshold.value,
        score_skewness(&scores)
    );
    Ok(())
}

/// Classify every test window through the deployment pipeline. The persisted
/// CSV carries no timing; latency is printed here and measured by `bench`.
pub fn cmd_detect(_config: &PipelineConfig, paths: &Paths, quantized: bool) -> Result<(), CliError> {
    let dataset = load_dataset(&paths.dataset())?;
    let (extractor, _) = load_extractor(paths, quantized)?;
    let forest = load_forest(&paths.forest())?;
    let threshold = load_threshold(&paths.threshold(quantized))?;

    let mut samples = Vec::with_capacity(dataset.split.test.len());
    let mut elapsed = Vec::with_capacity(dataset.split.test.len());
    for (index, seq) in dataset.split.test.iter().enumerate() {
        let detection = deploy_pipeline(&seq.tokens, extractor.as_dyn(), &forest, &threshold)?;
        elapsed.push(detection.elapsed_seconds);
        samples.push(SampleRecord {
            index,
            source: dataset
                .sources
                .get(seq.source as usize)
                .cloned()
                .unwrap_or_else(|| format!("trace_{}", seq.source)),
            score: detection.score,
            predicted: detection.label,
            truth: u8::from(seq.label == Label::Anomalous),
        });
    }

    let mut csv = String::from("window,source,score,predicted,truth\n");
    for s in &samples {
        csv.push_str(&format!("{},{},{},{},{}\n", s.index, s.source, s.score, s.predicted, s.truth));
    }
    std::fs::write(paths.detections(quantized), csv)
        .map_err(|e| CliError::Data(format!("cannot write detections: {e}")))?;

    let lat = LatencyStats::from_samples(elapsed);
    let flagged = samples.iter().filter(|s| s.predicted == 1).count();
    eprintln!(
        "detect: {} windows, {} flagged; latency mean {:.6}s p95 {:.6}s (not persisted)",
        samples.len(),
        flagged,
        lat.mean,
        lat.p95
    );
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Compare detections against ground truth and emit the metrics report, both
/// machine-readable (JSON) and human-readable, with per-recording verdicts.
pub fn cmd_eval(config: &PipelineConfig, paths: &Paths, quantized: bool) -> Result<(), CliError> {
    let _ = config;
    let csv = std::fs::read_to_string(paths.detections(quantized))
        .map_err(|e| CliError::Artifact(format!("cannot read detections: {e}")))?;
    let samples = parse_csv(&csv)?;
    let threshold = load_threshold(&paths.threshold(quantized))?;
    let dataset = load_dataset(&paths.dataset())?;
    let model_path = if quantized { paths.model_q() } else { paths.model() };

    let meta = ReportMeta {
        dataset: format!(
            "{} (train={}, validation={}, test={})",
            paths.dataset().file_name().unwrap_or_default().to_string_lossy(),
            dataset.split.train.len(),
            dataset.split.validation.len(),
            dataset.split.test.len()
        ),
        model_hash: sha256_hex(&model_path)?,
        threshold,
    };
    let report = DetectionReport::new(meta, samples)?.with_recording_aggregation()?;
    std::fs::write(paths.report_json(quantized), report.to_json())
        .map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    std::fs::write(paths.report_txt(quantized), report.render_text())
        .map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    print!("{}", report.render_text());
    Ok(())
}

/// The full pipeline, in order. Re-running with the same config and seed
/// reproduces every artifact byte for byte.
pub fn cmd_run(config: &PipelineConfig, paths: &Paths) -> Result<(), CliError> {
    let stage = |name: &str, r: Result<(), CliError>| r.map_err(|e| e.in_stage(name));
    if config.synth.enabled {
        stage("synth", cmd_synth(config, paths))?;
    }
    stage("ingest", cmd_ingest(config, paths))?;
    stage("train", cmd_train(config, paths))?;
    if config.pipeline.quantize {
        stage("quantize", cmd_quantize(config, paths))?;
    }
    stage("fit-forest", cmd_fit_forest(config, paths, false))?;
    stage("calibrate", cmd_calibrate(config, paths, false))?;
    stage("detect", cmd_detect(config, paths, false))?;
    stage("eval", cmd_eval(config, paths, false))?;
    if config.pipeline.quantize {
        stage("calibrate(quantized)", cmd_calibrate(config, paths, true))?;
        stage("detect(quantized)", cmd_detect(config, paths, true))?;
        stage("eval(quantized)", cmd_eval(config, paths, true))?;
    }
    Ok(())
}
