//! Deterministic desk-scale syscall corpora: a seeded Markov model emits
//! normal traces; parameterized perturbations emit anomalous traces mimicking
//! brute-force-like repetition and injection-like novel-call patterns, plus a
//! harder in-vocabulary shuffle.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::ingest::Label;
use crate::rng::{derived_rng, mix, TAG_SYNTH_INJECT, TAG_SYNTH_MODEL, TAG_SYNTH_TRACE};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// Plausible call names for small vocabularies; larger ones get `sys{i}`.
const CALL_NAMES: &[&str] = &[
    "read", "write", "openat", "close", "fstat", "lseek", "mmap", "mprotect", "munmap", "brk",
    "ioctl", "access", "pipe", "select", "clone", "execve", "wait4", "kill", "fcntl", "getpid",
    "socket", "connect", "sendto", "recvfrom",
];

fn call_name(i: usize) -> String {
    CALL_NAMES.get(i).map_or_else(|| format!("sys{i:03}"), |n| n.to_string())
}

/// First-order Markov chain over call names.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    pub states: Vec<String>,
    /// V × V row-stochastic matrix.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub seed: u64,
}

/// Draw each transition row (and the initial distribution) from a symmetric
/// Dirichlet via normalized seeded Gamma draws. Low concentration gives
/// peaked, structured rows; high concentration approaches uniform.
pub fn gen_normal_model(
    vocab_size: usize,
    concentration: f64,
    seed: u64,
) -> Result<MarkovModel, SynthError> {
    if vocab_size < 2 {
        return Err(SynthError::BadParameter(format!(
            "vocab_size must be at least 2, got {vocab_size}"
        )));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(SynthError::BadParameter(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| SynthError::BadParameter(format!("gamma: {e}")))?;
    let mut rng = derived_rng(seed, TAG_SYNTH_MODEL, 0);
    let dirichlet = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let draws: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        assert!(sum > 0.0, "gamma draws are positive");
        draws.into_iter().map(|d| d / sum).collect()
    };

    let initial = dirichlet(&mut rng);
    let transition: Vec<Vec<f64>> = (0..vocab_size).map(|_| dirichlet(&mut rng)).collect();
    let states = (0..vocab_size).map(call_name).collect();
    Ok(MarkovModel { states, transition, initial, seed })
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Walk the chain for `length` steps; all randomness comes from a generator
/// derived from (model.seed, stream_id).
pub fn sample_trace(
    model: &MarkovModel,
    length: usize,
    stream_id: u64,
) -> Result<Vec<String>, SynthError> {
    if length == 0 {
        return Err(SynthError::BadParameter("trace length must be positive".into()));
    }
    let mut rng = derived_rng(model.seed, TAG_SYNTH_TRACE, stream_id);
    let mut trace = Vec::with_capacity(length);
    let mut state = pick(&model.initial, &mut rng);
    trace.push(model.states[state].clone());
    for _ in 1..length {
        state = pick(&model.transition[state], &mut rng);
        trace.push(model.states[state].clone());
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnomalyKind {
    /// Overwrite a contiguous region with one call repeated, like the tight
    /// loop of failed authentication attempts in a brute-force attack.
    RepeatBurst { call: String },
    /// Replace scattered positions with names outside the vocabulary,
    /// forcing token 0 downstream, like injected code raising unseen calls.
    NovelCalls,
    /// Permute a window in place: same calls, broken order.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Fraction of the trace touched, in (0, 1].
    pub intensity: f64,
}

/// Apply `spec` to a copy of `trace`. The number of touched positions is
/// round(intensity · |trace|); output length always equals input length.
pub fn inject_anomaly(
    trace: &[String],
    spec: &AnomalySpec,
    seed: u64,
) -> Result<Vec<String>, SynthError> {
    if trace.is_empty() {
        return Err(SynthError::BadParameter("trace must be non-empty".into()));
    }
    if !(spec.intensity > 0.0 && spec.intensity <= 1.0) {
        return Err(SynthError::BadParameter(format!(
            "intensity must be in (0, 1], got {}",
            spec.intensity
        )));
    }
    if let AnomalyKind::RepeatBurst { call } = &spec.kind {
        if call.is_empty() || call.contains(char::is_whitespace) {
            return Err(SynthError::BadParameter("burst call must be a single token".into()));
        }
    }

    let n = trace.len();
    let count = ((spec.intensity * n as f64).round() as usize).min(n);
    let mut out = trace.to_vec();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = derived_rng(seed, TAG_SYNTH_INJECT, 0);

    match &spec.kind {
        AnomalyKind::RepeatBurst { call } => {
            let start = rng.gen_range(0..=n - count);
            for slot in &mut out[start..start + count] {
                *slot = call.clone();
            }
        }
        AnomalyKind::NovelCalls => {
            for pos in rand::seq::index::sample(&mut rng, n, count) {
                out[pos] = format!("novel_{:04x}", rng.gen::<u16>());
            }
        }
        AnomalyKind::Shuffled => {
            let start = rng.gen_range(0..=n - count);
            out[start..start + count].shuffle(&mut rng);
        }
    }
    Ok(out)
}

/// Settings for [`generate_corpus`]. Defaults give a corpus small enough for
/// seconds-scale CI yet separable enough for the end-to-end detection gate.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub concentration: f64,
    pub normal_traces: usize,
    pub anomalous_traces: usize,
    pub trace_len: usize,
    pub burst_call: String,
    pub burst_intensity: f64,
    pub novel_intensity: f64,
    /// Anomalies are injected per segment of this length so that attack
    /// activity recurs across the whole recording.
    pub anomaly_segment: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 16,
            concentration: 0.5,
            normal_traces: 200,
            anomalous_traces: 40,
            trace_len: 512,
            burst_call: "failauth".into(),
            burst_intensity: 0.5,
            novel_intensity: 0.5,
            anomaly_segment: 16,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusTrace {
    pub name: String,
    pub calls: Vec<String>,
    pub label: Label,
}

/// Generate the full corpus: normal traces straight from the chain, then
/// anomalous traces with the burst/novel perturbations applied segment by
/// segment (first half bursts, second half novel calls).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusTrace>, SynthError> {
    if cfg.normal_traces == 0 {
        return Err(SynthError::BadParameter("need at least one normal trace".into()));
    }
    if cfg.trace_len == 0 || cfg.anomaly_segment == 0 {
        return Err(SynthError::BadParameter("trace_len and anomaly_segment must be positive".into()));
    }
    let model = gen_normal_model(cfg.vocab_size, cfg.concentration, cfg.seed)?;

    let mut corpus = Vec::with_capacity(cfg.normal_traces + cfg.anomalous_traces);
    for i in 0..cfg.normal_traces {
        corpus.push(CorpusTrace {
            name: format!("normal_{i:04}"),
            calls: sample_trace(&model, cfg.trace_len, i as u64)?,
            label: Label::Normal,
        });
    }

    for j in 0..cfg.anomalous_traces {
        let base = sample_trace(&model, cfg.trace_len, (cfg.normal_traces + j) as u64)?;
        let spec = if j < cfg.anomalous_traces / 2 {
            AnomalySpec {
                kind: AnomalyKind::RepeatBurst { call: cfg.burst_call.clone() },
                intensity: cfg.burst_intensity,
            }
        } else {
            AnomalySpec { kind: AnomalyKind::NovelCalls, intensity: cfg.novel_intensity }
        };
        let mut calls = Vec::with_capacity(cfg.trace_len);
        for (c, chunk) in base.chunks(cfg.anomaly_segment).enumerate() {
            let seg_seed = mix(cfg.seed, mix(j as u64, c as u64) ^ TAG_SYNTH_INJECT);
            calls.extend(inject_anomaly(chunk, &spec, seg_seed)?);
        }
        corpus.push(CorpusTrace { name: format!("attack_{j:04}"), calls, label: Label::Anomalous });
    }
    Ok(corpus)
}
