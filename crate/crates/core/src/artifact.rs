//! Versioned on-disk artifacts: float and quantized models (one container, a
//! header flag tells them apart, with the hypersphere state as a tagged
//! trailing section), isolation forests, thresholds, vocabularies, and
//! windowed datasets.
//!
//! Every binary file starts with an 8-byte magic and a u32 version. Model
//! tensors are stored row-major as 32-bit little-endian floats in declaration
//! order; quantized tensors store (scale f32, zero_point i8, int8 payload).
//! save → load round-trips bit-exactly at the stored precision, and a version
//! bump is an error, never a silent reinterpretation.

use std::path::Path;

use thiserror::Error;

use crate::detect::Threshold;
use crate::forest::{ITreeNode, IsolationForestModel};
use crate::ingest::{DatasetSplit, Label, TokenSequence, Vocabulary};
use crate::nn::{ConvLayer, ExtractorModel, Hyper, Matrix};
use crate::quant::{QuantConvLayer, QuantParams, QuantTensor, QuantizedModel};
use crate::svdd::SvddState;

pub const FORMAT_VERSION: u32 = 1;

const MAGIC_MODEL: &[u8; 8] = b"HIDSMODL";
const MAGIC_FOREST: &[u8; 8] = b"HIDSFRST";
const MAGIC_THRESHOLD: &[u8; 8] = b"HIDSTHRS";
const MAGIC_DATASET: &[u8; 8] = b"HIDSDATA";
const VOCAB_HEADER: &str = "HIDS-VOCAB v1";
const SVDD_TAG: &[u8; 4] = b"SVDD";

const FLAG_QUANTIZED: u32 = 1;
const FLAG_HAS_SVDD: u32 = 2;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("unsupported artifact version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("wrong artifact kind: expected {expected}, found {found}")]
    WrongKind { expected: &'static str, found: String },
    #[error("artifact failed validation: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Model,
    QuantizedModel,
    Forest,
    Threshold,
    Vocab,
    Dataset,
}

impl ArtifactKind {
    pub fn name(&self) -> &'static str {
        match self {
            ArtifactKind::Model => "model",
            ArtifactKind::QuantizedModel => "quantized_model",
            ArtifactKind::Forest => "forest",
            ArtifactKind::Threshold => "threshold",
            ArtifactKind::Vocab => "vocab",
            ArtifactKind::Dataset => "dataset",
        }
    }
}

/// Identify an artifact file by its magic without fully loading it.
pub fn probe_kind(path: &Path) -> Result<ArtifactKind, ArtifactError> {
    let bytes = std::fs::read(path)?;
    kind_of(&bytes).ok_or_else(|| ArtifactError::CorruptArtifact("unrecognized magic".into()))
}

fn kind_of(bytes: &[u8]) -> Option<ArtifactKind> {
    if bytes.starts_with(MAGIC_MODEL) {
        // Flags live right after magic + version.
        let quantized = bytes
            .get(12..16)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) & FLAG_QUANTIZED != 0)
            .unwrap_or(false);
        return Some(if quantized { ArtifactKind::QuantizedModel } else { ArtifactKind::Model });
    }
    if bytes.starts_with(MAGIC_FOREST) {
        return Some(ArtifactKind::Forest);
    }
    if bytes.starts_with(MAGIC_THRESHOLD) {
        return Some(ArtifactKind::Threshold);
    }
    if bytes.starts_with(MAGIC_DATASET) {
        return Some(ArtifactKind::Dataset);
    }
    if bytes.starts_with(VOCAB_HEADER.as_bytes()) {
        return Some(ArtifactKind::Vocab);
    }
    None
}

// ---------------------------------------------------------------------------
// Little-endian readers/writers

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        if self.pos + n > self.buf.len() {
            return Err(ArtifactError::CorruptArtifact(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ArtifactError> {
        Ok(self.take(1)?[0])
    }

    fn i8(&mut self) -> Result<i8, ArtifactError> {
        Ok(self.take(1)?[0] as i8)
    }

    fn u32(&mut self) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ArtifactError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ArtifactError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<(), ArtifactError> {
        if self.pos != self.buf.len() {
            return Err(ArtifactError::CorruptArtifact(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Check magic + version, returning a reader positioned after them.
fn open<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    expected: &'static str,
) -> Result<Reader<'a>, ArtifactError> {
    if bytes.len() < 12 {
        return Err(ArtifactError::CorruptArtifact("file shorter than header".into()));
    }
    if &bytes[..8] != magic {
        let found = kind_of(bytes).map_or_else(|| "unknown".to_string(), |k| k.name().to_string());
        return Err(ArtifactError::WrongKind { expected, found });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ArtifactError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    Ok(Reader { buf: bytes, pos: 12 })
}

// ---------------------------------------------------------------------------
// Model container (float and quantized share the header)

fn write_model_header(w: &mut Writer, hyper: &Hyper, conv: &[(usize, usize, usize, usize)], flags: u32) {
    w.u32(flags);
    w.u32(hyper.vocab_size as u32);
    w.u32(hyper.embed_dim as u32);
    w.u32(hyper.feature_dim as u32);
    w.u32(hyper.input_len as u32);
    w.u32(conv.len() as u32);
    for &(c_in, c_out, k, pool) in conv {
        w.u32(c_in as u32);
        w.u32(c_out as u32);
        w.u32(k as u32);
        w.u32(pool as u32);
    }
}

struct ModelHeader {
    flags: u32,
    hyper: Hyper,
    conv: Vec<(usize, usize, usize, usize)>,
}

fn read_model_header(r: &mut Reader) -> Result<ModelHeader, ArtifactError> {
    let flags = r.u32()?;
    let hyper = Hyper {
        vocab_size: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        input_len: r.u32()? as usize,
    };
    let n_conv = r.u32()? as usize;
    if n_conv > 1024 {
        return Err(ArtifactError::CorruptArtifact(format!("implausible layer count {n_conv}")));
    }
    let mut conv = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv.push((r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize));
    }
    Ok(ModelHeader { flags, hyper, conv })
}

fn write_svdd(w: &mut Writer, svdd: &SvddState) {
    w.bytes(SVDD_TAG);
    w.u32(svdd.center.len() as u32);
    for &c in &svdd.center {
        w.f64(c);
    }
    w.f64(svdd.radius);
    w.f64(svdd.weight_decay);
}

fn read_svdd(r: &mut Reader) -> Result<SvddState, ArtifactError> {
    if r.take(4)? != SVDD_TAG {
        return Err(ArtifactError::CorruptArtifact("missing SVDD section tag".into()));
    }
    let d = r.u32()? as usize;
    let mut center = Vec::with_capacity(d);
    for _ in 0..d {
        center.push(r.f64()?);
    }
    let radius = r.f64()?;
    let weight_decay = r.f64()?;
    Ok(SvddState { center, radius, weight_decay })
}

/// Save a float model, optionally with its hypersphere state.
pub fn save_model(
    path: &Path,
    model: &ExtractorModel,
    svdd: Option<&SvddState>,
) -> Result<(), ArtifactError> {
    let conv: Vec<_> = model
        .conv_layers
        .iter()
        .map(|l| (l.c_in, l.c_out, l.kernel_width, l.pool))
        .collect();
    let mut flags = 0;
    if svdd.is_some() {
        flags |= FLAG_HAS_SVDD;
    }
    let mut w = Writer::new(MAGIC_MODEL);
    write_model_header(&mut w, &model.hyper, &conv, flags);
    for tensor in model.params() {
        for &v in tensor {
            w.f32(v as f32);
        }
    }
    if let Some(s) = svdd {
        write_svdd(&mut w, s);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

/// Load a float model. Weights widen from their stored 32-bit precision.
pub fn load_model(path: &Path) -> Result<(ExtractorModel, Option<SvddState>), ArtifactError> {
    let bytes = std::fs::read(path)?;
    let mut r = open(&bytes, MAGIC_MODEL, "model")?;
    let header = read_model_header(&mut r)?;
    if header.flags & FLAG_QUANTIZED != 0 {
        return Err(ArtifactError::WrongKind { expected: "model", found: "quantized_model".into() });
    }

    let read_tensor = |r: &mut Reader, n: usize| -> Result<Vec<f64>, ArtifactError> {
        let mut t = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(r.f32()? as f64);
        }
        Ok(t)
    };

    let hyper = header.hyper;
    let rows = hyper.vocab_size + 1;
    let embedding =
        Matrix { rows, cols: hyper.embed_dim, data: read_tensor(&mut r, rows * hyper.embed_dim)? };
    let mut conv_layers = Vec::with_capacity(header.conv.len());
    for &(c_in, c_out, k, pool) in &header.conv {
        conv_layers.push(ConvLayer {
            c_in,
            c_out,
            kernel_width: k,
            pool,
            kernels: read_tensor(&mut r, c_out * c_in * k)?,
        });
    }
    let f_last = conv_layers.last().map_or(hyper.embed_dim, |l| l.c_out);
    let dense = Matrix {
        rows: f_last,
        cols: hyper.feature_dim,
        data: read_tensor(&mut r, f_last * hyper.feature_dim)?,
    };

    let model = ExtractorModel { embedding, conv_layers, dense, hyper };
    model.validate().map_err(|e| ArtifactError::Invalid(e.to_string()))?;

    let svdd = if header.flags & FLAG_HAS_SVDD != 0 {
        let s = read_svdd(&mut r)?;
        if s.center.len() != hyper.feature_dim {
            return Err(ArtifactError::Invalid("center dimension != feature dim".into()));
        }
        Some(s)
    } else {
        None
    };
    r.done()?;
    Ok((model, svdd))
}

/// Save a quantized model in the same container with the quantized flag set.
pub fn save_quantized(
    path: &Path,
    model: &QuantizedModel,
    svdd: Option<&SvddState>,
) -> Result<(), ArtifactError> {
    let conv: Vec<_> =
        model.conv.iter().map(|l| (l.c_in, l.c_out, l.kernel_width, l.pool)).collect();
    let mut flags = FLAG_QUANTIZED;
    if svdd.is_some() {
        flags |= FLAG_HAS_SVDD;
    }
    let mut w = Writer::new(MAGIC_MODEL);
    write_model_header(&mut w, &model.hyper, &conv, flags);
    let write_qtensor = |w: &mut Writer, t: &QuantTensor| {
        w.f32(t.params.scale);
        w.i8(t.params.zero_point);
        for &q in &t.values {
            w.i8(q);
        }
    };
    write_qtensor(&mut w, &model.embedding);
    for layer in &model.conv {
        write_qtensor(&mut w, &layer.tensor);
    }
    write_qtensor(&mut w, &model.dense);
    if let Some(s) = svdd {
        write_svdd(&mut w, s);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_quantized(
    path: &Path,
) -> Result<(QuantizedModel, Option<SvddState>), ArtifactError> {
    let bytes = std::fs::read(path)?;
    let mut r = open(&bytes, MAGIC_MODEL, "quantized_model")?;
    let header = read_model_header(&mut r)?;
    if header.flags & FLAG_QUANTIZED == 0 {
        return Err(ArtifactError::WrongKind { expected: "quantized_model", found: "model".into() });
    }

    let read_qtensor = |r: &mut Reader, n: usize| -> Result<QuantTensor, ArtifactError> {
        let scale = r.f32()?;
        if !(scale > 0.0) {
            return Err(ArtifactError::Invalid(format!("non-positive scale {scale}")));
        }
        let zero_point = r.i8()?;
        let raw = r.take(n)?;
        let values = raw.iter().map(|&b| b as i8).collect();
        Ok(QuantTensor { params: QuantParams { scale, zero_point }, values })
    };

    let hyper = header.hyper;
    let rows = hyper.vocab_size + 1;
    let embedding = read_qtensor(&mut r, rows * hyper.embed_dim)?;
    let mut conv = Vec::with_capacity(header.conv.len());
    for &(c_in, c_out, k, pool) in &header.conv {
        conv.push(QuantConvLayer {
            c_in,
            c_out,
            kernel_width: k,
            pool,
            tensor: read_qtensor(&mut r, c_out * c_in * k)?,
        });
    }
    let f_last = conv.last().map_or(hyper.embed_dim, |l| l.c_out);
    let dense = read_qtensor(&mut r, f_last * hyper.feature_dim)?;

    let svdd = if header.flags & FLAG_HAS_SVDD != 0 {
        let s = read_svdd(&mut r)?;
        if s.center.len() != hyper.feature_dim {
            return Err(ArtifactError::Invalid("center dimension != feature dim".into()));
        }
        Some(s)
    } else {
        None
    };
    r.done()?;
    Ok((QuantizedModel::new(hyper, embedding, conv, dense), svdd))
}

// ---------------------------------------------------------------------------
// Forest

fn write_node(w: &mut Writer, node: &ITreeNode) {
    match node {
        ITreeNode::Leaf { size } => {
            w.u8(1);
            w.u32(*size as u32);
        }
        ITreeNode::Internal { split_dim, split_value, left, right } => {
            w.u8(0);
            w.u32(*split_dim as u32);
            w.f64(*split_value);
            write_node(w, left);
            write_node(w, right);
        }
    }
}

fn read_node(r: &mut Reader, depth_budget: usize) -> Result<ITreeNode, ArtifactError> {
    match r.u8()? {
        1 => Ok(ITreeNode::Leaf { size: r.u32()? as usize }),
        0 => {
            if depth_budget == 0 {
                return Err(ArtifactError::CorruptArtifact("tree deeper than its height limit".into()));
            }
            let split_dim = r.u32()? as usize;
            let split_value = r.f64()?;
            let left = Box::new(read_node(r, depth_budget - 1)?);
            let right = Box::new(read_node(r, depth_budget - 1)?);
            Ok(ITreeNode::Internal { split_dim, split_value, left, right })
        }
        tag => Err(ArtifactError::CorruptArtifact(format!("unknown node tag {tag}"))),
    }
}

pub fn save_forest(path: &Path, forest: &IsolationForestModel) -> Result<(), ArtifactError> {
    let mut w = Writer::new(MAGIC_FOREST);
    w.u32(forest.trees.len() as u32);
    w.u32(forest.psi as u32);
    w.u32(forest.dim() as u32);
    w.u64(forest.seed);
    w.u32(forest.height_limit as u32);
    for tree in &forest.trees {
        write_node(&mut w, tree);
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<IsolationForestModel, ArtifactError> {
    let bytes = std::fs::read(path)?;
    let mut r = open(&bytes, MAGIC_FOREST, "forest")?;
    let t = r.u32()? as usize;
    let psi = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let seed = r.u64()?;
    let height_limit = r.u32()? as usize;
    if t == 0 || t > 1_000_000 {
        return Err(ArtifactError::CorruptArtifact(format!("implausible tree count {t}")));
    }
    let mut trees = Vec::with_capacity(t);
    for _ in 0..t {
        trees.push(read_node(&mut r, height_limit)?);
    }
    r.done()?;
    IsolationForestModel::from_parts(trees, psi, height_limit, seed, dim)
        .map_err(|e| ArtifactError::Invalid(e.to_string()))
}

// ---------------------------------------------------------------------------
// Threshold

pub fn save_threshold(path: &Path, t: &Threshold) -> Result<(), ArtifactError> {
    let mut w = Writer::new(MAGIC_THRESHOLD);
    w.f64(t.mean);
    w.f64(t.std);
    w.f64(t.k);
    w.f64(t.value);
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_threshold(path: &Path) -> Result<Threshold, ArtifactError> {
    let bytes = std::fs::read(path)?;
    let mut r = open(&bytes, MAGIC_THRESHOLD, "threshold")?;
    let t = Threshold { mean: r.f64()?, std: r.f64()?, k: r.f64()?, value: r.f64()? };
    r.done()?;
    if !t.is_consistent() {
        return Err(ArtifactError::Invalid("threshold value != mean + k*std".into()));
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Vocabulary (structured text)

pub fn save_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<(), ArtifactError> {
    let mut text = String::new();
    text.push_str(VOCAB_HEADER);
    text.push('\n');
    text.push_str(&format!("V={}\n", vocab.len()));
    for (i, name) in vocab.names().iter().enumerate() {
        text.push_str(&format!("{name} {}\n", i + 1));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, ArtifactError> {
    let bytes = std::fs::read(path)?;
    if let Some(kind) = kind_of(&bytes) {
        if kind != ArtifactKind::Vocab {
            return Err(ArtifactError::WrongKind {
                expected: "vocab",
                found: kind.name().to_string(),
            });
        }
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| ArtifactError::CorruptArtifact("vocabulary is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some(VOCAB_HEADER) {
        return Err(ArtifactError::WrongKind { expected: "vocab", found: "unknown".into() });
    }
    let v: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("V="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ArtifactError::CorruptArtifact("missing V= line".into()))?;
    let mut names = vec![String::new(); v];
    let mut seen = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (name, id) = line
            .rsplit_once(' ')
            .ok_or_else(|| ArtifactError::CorruptArtifact(format!("bad record: {line}")))?;
        let id: usize = id
            .parse()
            .map_err(|_| ArtifactError::CorruptArtifact(format!("bad id in: {line}")))?;
        if id == 0 || id > v {
            return Err(ArtifactError::CorruptArtifact(format!("id {id} outside 1..={v}")));
        }
        if !names[id - 1].is_empty() {
            return Err(ArtifactError::CorruptArtifact(format!("duplicate id {id}")));
        }
        names[id - 1] = name.to_string();
        seen += 1;
    }
    if seen != v || names.iter().any(|n| n.is_empty()) {
        return Err(ArtifactError::CorruptArtifact(format!("expected {v} records, got {seen}")));
    }
    Ok(Vocabulary::from_names(names))
}

// ---------------------------------------------------------------------------
// Dataset

/// A windowed dataset plus the context needed to interpret it: the source
/// recording names behind each window's `source` index, the vocabulary size
/// it was tokenized against, and the window length.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub split: DatasetSplit,
    pub sources: Vec<String>,
    pub vocab_size: usize,
    pub input_len: usize,
}

fn label_tag(label: Label) -> u8 {
    match label {
        Label::Normal => 0,
        Label::Anomalous => 1,
        Label::Unlabeled => 2,
    }
}

fn tag_label(tag: u8) -> Result<Label, ArtifactError> {
    match tag {
        0 => Ok(Label::Normal),
        1 => Ok(Label::Anomalous),
        2 => Ok(Label::Unlabeled),
        t => Err(ArtifactError::CorruptArtifact(format!("unknown label tag {t}"))),
    }
}

pub fn save_dataset(path: &Path, dataset: &StoredDataset) -> Result<(), ArtifactError> {
    let mut w = Writer::new(MAGIC_DATASET);
    w.u32(dataset.vocab_size as u32);
    w.u32(dataset.input_len as u32);
    w.u32(dataset.sources.len() as u32);
    for name in &dataset.sources {
        let b = name.as_bytes();
        w.u32(b.len() as u32);
        w.bytes(b);
    }
    for section in [&dataset.split.train, &dataset.split.validation, &dataset.split.test] {
        w.u32(section.len() as u32);
        for seq in section.iter() {
            w.u8(label_tag(seq.label));
            w.u32(seq.source);
            for &t in &seq.tokens {
                w.u32(t);
            }
        }
    }
    std::fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<StoredDataset, ArtifactError> {
    let bytes = std::fs::read(path)?;
    let mut r = open(&bytes, MAGIC_DATASET, "dataset")?;
    let vocab_size = r.u32()? as usize;
    let input_len = r.u32()? as usize;
    if input_len == 0 || input_len > 1 << 24 {
        return Err(ArtifactError::CorruptArtifact(format!("implausible window length {input_len}")));
    }
    let n_sources = r.u32()? as usize;
    let mut sources = Vec::with_capacity(n_sources.min(1 << 20));
    for _ in 0..n_sources {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        sources.push(
            std::str::from_utf8(raw)
                .map_err(|_| ArtifactError::CorruptArtifact("source name is not UTF-8".into()))?
                .to_string(),
        );
    }
    let read_section = |r: &mut Reader| -> Result<Vec<TokenSequence>, ArtifactError> {
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let label = tag_label(r.u8()?)?;
            let source = r.u32()?;
            let mut tokens = Vec::with_capacity(input_len);
            for _ in 0..input_len {
                let t = r.u32()?;
                if t as usize > vocab_size {
                    return Err(ArtifactError::Invalid(format!(
                        "token {t} exceeds vocabulary size {vocab_size}"
                    )));
                }
                tokens.push(t);
            }
            out.push(TokenSequence { tokens, label, source });
        }
        Ok(out)
    };
    let train = read_section(&mut r)?;
    let validation = read_section(&mut r)?;
    let test = read_section(&mut r)?;
    r.done()?;
    Ok(StoredDataset {
        split: DatasetSplit { train, validation, test },
        sources,
        vocab_size,
        input_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::quant::quantize_model;
    use tempfile::tempdir;

    fn model_fixture() -> ExtractorModel {
        ExtractorModel::init(&ArchConfig::default_for(8, 16), 3).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact_at_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = model_fixture();
        let svdd = SvddState { center: vec![0.5; 16], radius: 1.25, weight_decay: 1e-6 };
        save_model(&path, &model, Some(&svdd)).unwrap();
        let (loaded, loaded_svdd) = load_model(&path).unwrap();
        assert_eq!(loaded_svdd.unwrap(), svdd);

        let path2 = dir.path().join("model2.bin");
        save_model(&path2, &loaded, Some(&svdd)).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn quantized_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model_q.bin");
        let qm = quantize_model(&model_fixture()).unwrap();
        save_quantized(&path, &qm, None).unwrap();
        let (loaded, svdd) = load_quantized(&path).unwrap();
        assert!(svdd.is_none());
        assert_eq!(loaded, qm);
        assert_eq!(probe_kind(&path).unwrap(), ArtifactKind::QuantizedModel);
    }

    #[test]
    fn model_kinds_are_distinguished() {
        let dir = tempdir().unwrap();
        let fpath = dir.path().join("model.bin");
        let qpath = dir.path().join("model_q.bin");
        let model = model_fixture();
        save_model(&fpath, &model, None).unwrap();
        save_quantized(&qpath, &quantize_model(&model).unwrap(), None).unwrap();
        assert!(matches!(load_model(&qpath), Err(ArtifactError::WrongKind { .. })));
        assert!(matches!(load_quantized(&fpath), Err(ArtifactError::WrongKind { .. })));
    }

    #[test]
    fn forest_roundtrip_and_wrong_kind() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("forest.bin");
        let features: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let forest = crate::forest::fit(&features, 20, 16, 9).unwrap();
        save_forest(&path, &forest).unwrap();
        let loaded = load_forest(&path).unwrap();
        assert_eq!(loaded, forest);

        // A forest file opened as a model reports the kind it found.
        match load_model(&path) {
            Err(ArtifactError::WrongKind { expected: "model", found }) => {
                assert_eq!(found, "forest");
            }
            other => panic!("expected WrongKind, got {other:?}"),
        }
    }

    #[test]
    fn threshold_roundtrip_and_consistency_check() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("threshold.bin");
        let t = crate::detect::calibrate_threshold(&[0.1, 0.2, 0.3, 0.4], 2.0).unwrap();
        save_threshold(&path, &t).unwrap();
        assert_eq!(load_threshold(&path).unwrap(), t);

        // Corrupt the stored value field and expect a validation failure.
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_threshold(&path), Err(ArtifactError::Invalid(_))));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &model_fixture(), None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(ArtifactError::CorruptArtifact(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &model_fixture(), None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ArtifactError::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn vocabulary_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocabulary::from_names(vec!["openat".into(), "read".into(), "close".into()]);
        save_vocabulary(&path, &vocab).unwrap();
        let loaded = load_vocabulary(&path).unwrap();
        assert_eq!(loaded, vocab);
        assert_eq!(probe_kind(&path).unwrap(), ArtifactKind::Vocab);
    }

    #[test]
    fn vocabulary_rejects_binary_artifacts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &model_fixture(), None).unwrap();
        assert!(matches!(load_vocabulary(&path), Err(ArtifactError::WrongKind { .. })));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dataset.bin");
        let mk = |label, source| TokenSequence { tokens: vec![1, 2, 0, 3], label, source };
        let stored = StoredDataset {
            split: DatasetSplit {
                train: vec![mk(Label::Normal, 0), mk(Label::Normal, 1)],
                validation: vec![mk(Label::Normal, 0)],
                test: vec![mk(Label::Anomalous, 2), mk(Label::Normal, 1)],
            },
            sources: vec!["n0".into(), "n1".into(), "a0".into()],
            vocab_size: 3,
            input_len: 4,
        };
        save_dataset(&path, &stored).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), stored);
        assert_eq!(probe_kind(&path).unwrap(), ArtifactKind::Dataset);
    }
}
