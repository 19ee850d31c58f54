//! Pipeline configuration: flat `key = value` text with one section per
//! stage. Every module-level default is reproduced here and overridable;
//! unknown keys are rejected at parse time.

use std::path::Path;

use hids_core::ingest::{PadMode, TraceFormat};
use hids_core::nn::{ArchConfig, ConvSpec};
use hids_core::svdd::{Objective, TrainConfig};
use hids_core::synth::CorpusConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub synth: SynthSection,
    pub ingest: IngestSection,
    pub train: TrainSection,
    pub forest: ForestSection,
    pub calibrate: CalibrateSection,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub seed: u64,
    /// Also produce the quantized model and its detection chain.
    pub quantize: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection { seed: 42, quantize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub enabled: bool,
    pub vocab_size: usize,
    pub concentration: f64,
    pub normal_traces: usize,
    pub anomalous_traces: usize,
    pub trace_len: usize,
    pub burst_call: String,
    pub burst_intensity: f64,
    pub novel_intensity: f64,
    pub anomaly_segment: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        SynthSection {
            enabled: true,
            vocab_size: c.vocab_size,
            concentration: c.concentration,
            normal_traces: c.normal_traces,
            anomalous_traces: c.anomalous_traces,
            trace_len: c.trace_len,
            burst_call: c.burst_call,
            burst_intensity: c.burst_intensity,
            novel_intensity: c.novel_intensity,
            anomaly_segment: c.anomaly_segment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    /// `plain_names` or `lid_ds_like`.
    pub format: String,
    /// Trace directory; empty means `<out>/traces`.
    pub traces_dir: String,
    pub window_len: usize,
    pub train_stride: usize,
    pub detect_stride: usize,
    /// `drop_tail` or `zero_pad`.
    pub pad: String,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            format: "plain_names".into(),
            traces_dir: String::new(),
            window_len: 64,
            train_stride: 64,
            detect_stride: 16,
            pad: "drop_tail".into(),
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `one_class` or `soft_boundary`.
    pub objective: String,
    pub nu: f64,
    pub epsilon_c: f64,
    pub embed_dim: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_width: usize,
    pub pool: usize,
    pub feature_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            objective: "one_class".into(),
            nu: t.nu,
            epsilon_c: t.epsilon_c,
            embed_dim: 32,
            conv_channels: vec![32, 64, 64],
            kernel_width: 3,
            pool: 2,
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSection {
    pub trees: usize,
    pub psi: usize,
}

impl Default for ForestSection {
    fn default() -> Self {
        ForestSection { trees: 100, psi: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub k: f64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection { k: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { repetitions: 3 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reject settings a stage would later choke on, naming the stage and
    /// operation the offending key belongs to.
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |msg: String| Err(CliError::Config(msg));

        if self.synth.enabled {
            if self.synth.vocab_size < 2 {
                return err("synth: gen_normal_model: vocab_size must be >= 2".into());
            }
            if !(self.synth.concentration > 0.0) {
                return err("synth: gen_normal_model: concentration must be positive".into());
            }
            if self.synth.normal_traces == 0 {
                return err("synth: generate_corpus: need at least one normal trace".into());
            }
            if self.synth.trace_len == 0 || self.synth.anomaly_segment == 0 {
                return err("synth: generate_corpus: trace_len and anomaly_segment must be positive".into());
            }
            for (name, v) in
                [("burst_intensity", self.synth.burst_intensity), ("novel_intensity", self.synth.novel_intensity)]
            {
                if !(v > 0.0 && v <= 1.0) {
                    return err(format!("synth: inject_anomaly: {name} must be in (0, 1]"));
                }
            }
            if self.synth.burst_call.is_empty()
                || self.synth.burst_call.contains(char::is_whitespace)
            {
                return err("synth: inject_anomaly: burst_call must be a single token".into());
            }
        }

        self.trace_format()?;
        self.pad_mode()?;
        if self.ingest.window_len == 0 || self.ingest.train_stride == 0 || self.ingest.detect_stride == 0
        {
            return err("ingest: window: window_len and strides must be positive".into());
        }
        if !(self.ingest.train_frac > 0.0
            && self.ingest.val_frac > 0.0
            && self.ingest.train_frac + self.ingest.val_frac < 1.0)
        {
            return err(format!(
                "ingest: split_dataset: train_frac ({}) + val_frac ({}) must be positive and sum below 1",
                self.ingest.train_frac, self.ingest.val_frac
            ));
        }

        self.objective()?;
        if self.train.batch_size == 0 {
            return err("train: batch_size must be positive".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return err("train: learning_rate must be positive".into());
        }
        if !(self.train.weight_decay >= 0.0) {
            return err("train: weight_decay must be nonnegative".into());
        }
        if !(self.train.nu > 0.0 && self.train.nu <= 1.0) {
            return err("train: nu must be in (0, 1]".into());
        }
        if !(self.train.epsilon_c > 0.0) {
            return err("train: epsilon_c must be positive".into());
        }
        // Architecture floors keep every expressible quantized model within
        // the 0.30x payload bound.
        if self.train.embed_dim < 8 {
            return err("train: embed_dim must be at least 8".into());
        }
        if self.train.feature_dim < 2 {
            return err("train: feature_dim must be at least 2".into());
        }
        if self.train.conv_channels.is_empty() {
            return err("train: at least one conv layer is required".into());
        }
        if self.train.conv_channels.iter().any(|&c| c < 8) {
            return err("train: conv_channels must all be at least 8".into());
        }
        if self.train.kernel_width % 2 == 0 {
            return err("train: kernel_width must be odd".into());
        }
        if self.train.pool == 0 {
            return err("train: pool must be positive".into());
        }
        let mut len = self.ingest.window_len;
        for _ in &self.train.conv_channels {
            if len % self.train.pool != 0 {
                return err(format!(
                    "train: pool {} does not divide the sequence length {len}",
                    self.train.pool
                ));
            }
            len /= self.train.pool;
        }
        if len == 0 {
            return err("train: conv/pool stack collapses the sequence to length 0".into());
        }

        if self.forest.trees == 0 {
            return err("forest: fit: trees must be at least 1".into());
        }
        if self.forest.psi < 2 {
            return err("forest: fit: psi must be at least 2".into());
        }
        if !self.calibrate.k.is_finite() {
            return err("calibrate: calibrate_threshold: k must be finite".into());
        }
        if self.bench.repetitions == 0 {
            return err("bench: repetitions must be at least 1".into());
        }
        Ok(())
    }

    pub fn trace_format(&self) -> Result<TraceFormat, CliError> {
        match self.ingest.format.as_str() {
            "plain_names" => Ok(TraceFormat::PlainNames),
            "lid_ds_like" => Ok(TraceFormat::LidDsLike),
            other => Err(CliError::Config(format!(
                "ingest: parse_trace: unknown format {other:?} (plain_names or lid_ds_like)"
            ))),
        }
    }

    pub fn pad_mode(&self) -> Result<PadMode, CliError> {
        match self.ingest.pad.as_str() {
            "drop_tail" => Ok(PadMode::DropTail),
            "zero_pad" => Ok(PadMode::ZeroPad),
            other => Err(CliError::Config(format!(
                "ingest: window: unknown pad mode {other:?} (drop_tail or zero_pad)"
            ))),
        }
    }

    pub fn objective(&self) -> Result<Objective, CliError> {
        match self.train.objective.as_str() {
            "one_class" => Ok(Objective::OneClass),
            "soft_boundary" => Ok(Objective::SoftBoundary),
            other => Err(CliError::Config(format!(
                "train: unknown objective {other:?} (one_class or soft_boundary)"
            ))),
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            vocab_size: self.synth.vocab_size,
            concentration: self.synth.concentration,
            normal_traces: self.synth.normal_traces,
            anomalous_traces: self.synth.anomalous_traces,
            trace_len: self.synth.trace_len,
            burst_call: self.synth.burst_call.clone(),
            burst_intensity: self.synth.burst_intensity,
            novel_intensity: self.synth.novel_intensity,
            anomaly_segment: self.synth.anomaly_segment,
            seed: self.pipeline.seed,
        }
    }

    pub fn arch_config(&self, vocab_size: usize) -> ArchConfig {
        ArchConfig {
            vocab_size,
            embed_dim: self.train.embed_dim,
            conv: self
                .train
                .conv_channels
                .iter()
                .map(|&c_out| ConvSpec {
                    c_out,
                    kernel_width: self.train.kernel_width,
                    pool: self.train.pool,
                })
                .collect(),
            feature_dim: self.train.feature_dim,
            input_len: self.ingest.window_len,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            seed: self.pipeline.seed,
            objective: self.objective()?,
            nu: self.train.nu,
            epsilon_c: self.train.epsilon_c,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let config = PipelineConfig::default();
        config.validate().unwrap();
        let text = config.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[pipeline]\nseed = 1\nturbo = true\n";
        assert!(toml::from_str::<PipelineConfig>(text).is_err());
    }

    #[test]
    fn bad_fractions_name_the_operation() {
        let mut config = PipelineConfig::default();
        config.ingest.train_frac = 0.9;
        config.ingest.val_frac = 0.2;
        match config.validate() {
            Err(CliError::Config(msg)) => assert!(msg.contains("split_dataset"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn pool_divisibility_is_checked() {
        let mut config = PipelineConfig::default();
        config.ingest.window_len = 50;
        assert!(config.validate().is_err());
    }

    #[test]
    fn partial_file_overrides_only_named_keys() {
        let text = "[train]\nepochs = 3\n\n[pipeline]\nseed = 7\n";
        let config: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.pipeline.seed, 7);
        assert_eq!(config.train.batch_size, 128);
        assert_eq!(config.forest.trees, 100);
    }
}
