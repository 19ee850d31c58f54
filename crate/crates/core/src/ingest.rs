//! Trace ingestion: parse raw system-call traces, build the call-name
//! vocabulary, map traces to integer sequences, window them, and produce
//! normal-only train/validation splits plus a mixed test split.
//!
//! ID 0 is reserved for call names unseen at vocabulary-build time; known
//! names get dense IDs `1..=V` in first-appearance order.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{derived_rng, TAG_SPLIT};

/// Reserved token for call names absent from the vocabulary.
pub const UNKNOWN_ID: u32 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("trace contains no valid events")]
    EmptyTrace,
    #[error("trace is not valid UTF-8 (byte offset {0})")]
    EncodingError(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid split fractions: train_frac={train_frac}, val_frac={val_frac}")]
    BadFractions { train_frac: f64, val_frac: f64 },
}

/// A single parsed system-call event. The pid and timestamp are carried so
/// the pipeline can discard them explicitly; only `call_name` feeds the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SyscallEvent {
    pub timestamp: f64,
    pub process_id: u64,
    pub call_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    /// `<timestamp> <pid> <call_name>` per line, extra columns ignored.
    LidDsLike,
    /// One call name per line; timestamps are synthesized as event ordinals.
    PlainNames,
}

/// Parse a raw trace. Returns the events plus the count of malformed lines
/// that were skipped. Lines starting with `#` are comments, skipped silently.
pub fn parse_trace(
    raw: &[u8],
    format: TraceFormat,
) -> Result<(Vec<SyscallEvent>, usize), IngestError> {
    let text = std::str::from_utf8(raw)
        .map_err(|e| IngestError::EncodingError(e.valid_up_to()))?;

    let mut events = Vec::new();
    let mut skipped = 0usize;
    let mut last_ts = f64::NEG_INFINITY;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match format {
            TraceFormat::PlainNames => {
                if line.split_whitespace().nth(1).is_some() {
                    skipped += 1;
                    continue;
                }
                events.push(SyscallEvent {
                    timestamp: events.len() as f64,
                    process_id: 0,
                    call_name: line.to_string(),
                });
            }
            TraceFormat::LidDsLike => {
                let mut fields = line.split_whitespace();
                let (ts, pid, name) = match (fields.next(), fields.next(), fields.next()) {
                    (Some(ts), Some(pid), Some(name)) => (ts, pid, name),
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let ts: f64 = match ts.parse() {
                    Ok(v) if v >= 0.0 && v >= last_ts => v,
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let pid: u64 = match pid.parse() {
                    Ok(v) => v,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                last_ts = ts;
                events.push(SyscallEvent {
                    timestamp: ts,
                    process_id: pid,
                    call_name: name.to_string(),
                });
            }
        }
    }

    if events.is_empty() {
        return Err(IngestError::EmptyTrace);
    }
    Ok((events, skipped))
}

/// Bijection between known call names and dense IDs `1..=V`; ID 0 is the
/// reserved unknown token and is never assigned to a name.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    name_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Rebuild from names listed in ID order (`names[0]` gets ID 1).
    pub fn from_names(names: Vec<String>) -> Self {
        let name_to_id = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32 + 1))
            .collect();
        Vocabulary { names, name_to_id }
    }

    /// Number of distinct known names (V).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// ID for `name`, or [`UNKNOWN_ID`] if unseen.
    pub fn id_for(&self, name: &str) -> u32 {
        self.name_to_id.get(name).copied().unwrap_or(UNKNOWN_ID)
    }

    /// Known names in ID order.
    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Assign IDs in first-appearance order across `traces`, taken in input order.
pub fn build_vocabulary(traces: &[Vec<SyscallEvent>]) -> Result<Vocabulary, IngestError> {
    let mut names = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for trace in traces {
        for ev in trace {
            if !seen.contains_key(ev.call_name.as_str()) {
                seen.insert(ev.call_name.as_str(), ());
                names.push(ev.call_name.clone());
            }
        }
    }
    if names.is_empty() {
        return Err(IngestError::EmptyTrace);
    }
    Ok(Vocabulary::from_names(names))
}

/// Map events to their vocabulary IDs; unseen names map to 0.
pub fn tokenize(events: &[SyscallEvent], vocab: &Vocabulary) -> Vec<u32> {
    events.iter().map(|e| vocab.id_for(&e.call_name)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

/// Fixed-length window of token IDs; the unit of classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub label: Label,
    /// Index of the source trace, for per-recording report aggregation.
    pub source: u32,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, label: Label) -> Self {
        TokenSequence { tokens, label, source: 0 }
    }

    pub fn with_source(mut self, source: u32) -> Self {
        self.source = source;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Discard a final partial window.
    DropTail,
    /// Right-pad a final partial window with token 0.
    ZeroPad,
}

/// Slice `tokens` into windows of length `l` starting at offsets 0, s, 2s, …
/// At most one final partial window exists; `pad` decides its fate.
pub fn window(
    tokens: &[u32],
    l: usize,
    s: usize,
    pad: PadMode,
    label: Label,
) -> Vec<TokenSequence> {
    assert!(l >= 1 && s >= 1, "window length and stride must be positive");
    let mut out = Vec::new();
    if tokens.is_empty() {
        if pad == PadMode::ZeroPad {
            out.push(TokenSequence::new(vec![UNKNOWN_ID; l], label));
        }
        return out;
    }
    let mut start = 0usize;
    while start < tokens.len() {
        if start + l <= tokens.len() {
            out.push(TokenSequence::new(tokens[start..start + l].to_vec(), label));
            start += s;
        } else {
            if pad == PadMode::ZeroPad {
                let mut w = tokens[start..].to_vec();
                w.resize(l, UNKNOWN_ID);
                out.push(TokenSequence::new(w, label));
            }
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TokenSequence>,
    pub validation: Vec<TokenSequence>,
    pub test: Vec<TokenSequence>,
}

/// Seeded shuffle of the normal pool, partitioned by the given fractions.
/// Every anomalous sequence goes to test.
pub fn split_dataset(
    normal: Vec<TokenSequence>,
    anomalous: Vec<TokenSequence>,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<DatasetSplit, IngestError> {
    if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(IngestError::BadFractions { train_frac, val_frac });
    }
    let n = normal.len();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_val = (val_frac * n as f64).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(IngestError::InsufficientData(format!(
            "cannot split {n} normal sequences into non-empty train/validation/test \
             with fractions {train_frac}/{val_frac}"
        )));
    }

    let mut pool = normal;
    let mut rng = derived_rng(seed, TAG_SPLIT, 0);
    pool.shuffle(&mut rng);

    let mut test: Vec<TokenSequence> = pool.split_off(n_train + n_val);
    let validation = pool.split_off(n_train);
    let train = pool;

    debug_assert!(anomalous.iter().all(|s| s.label == Label::Anomalous));
    test.extend(anomalous);

    Ok(DatasetSplit { train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(name: &str) -> SyscallEvent {
        SyscallEvent { timestamp: 0.0, process_id: 0, call_name: name.to_string() }
    }

    #[test]
    fn parse_empty_is_error() {
        assert_eq!(parse_trace(b"", TraceFormat::PlainNames), Err(IngestError::EmptyTrace));
        assert_eq!(parse_trace(b"# only a comment\n", TraceFormat::LidDsLike), Err(IngestError::EmptyTrace));
    }

    #[test]
    fn parse_plain_names() {
        let (events, skipped) = parse_trace(b"openat\nread\nclose\n", TraceFormat::PlainNames).unwrap();
        assert_eq!(skipped, 0);
        let names: Vec<_> = events.iter().map(|e| e.call_name.as_str()).collect();
        assert_eq!(names, ["openat", "read", "close"]);
        let ts: Vec<_> = events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, [0.0, 1.0, 2.0]);
        assert!(events.iter().all(|e| e.process_id == 0));
    }

    #[test]
    fn parse_lid_ds_like() {
        // Hand-parsed oracle for the two lines.
        let (events, skipped) =
            parse_trace(b"0.01 734 execve\n0.02 734 brk\n", TraceFormat::LidDsLike).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0], SyscallEvent { timestamp: 0.01, process_id: 734, call_name: "execve".into() });
        assert_eq!(events[1], SyscallEvent { timestamp: 0.02, process_id: 734, call_name: "brk".into() });
    }

    #[test]
    fn parse_skips_malformed_and_comments() {
        let raw = b"# header\n0.1 1 read\nnot_a_timestamp 2 write\n0.2 1 close\n";
        let (events, skipped) = parse_trace(raw, TraceFormat::LidDsLike).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn parse_rejects_timestamp_regression() {
        let raw = b"0.5 1 read\n0.2 1 write\n0.6 1 close\n";
        let (events, skipped) = parse_trace(raw, TraceFormat::LidDsLike).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn parse_rejects_invalid_utf8() {
        let raw: &[u8] = &[0x72, 0x65, 0x61, 0x64, 0xff, 0xfe];
        assert!(matches!(
            parse_trace(raw, TraceFormat::PlainNames),
            Err(IngestError::EncodingError(_))
        ));
    }

    #[test]
    fn vocabulary_single_symbol() {
        let v = build_vocabulary(&[vec![ev("read"), ev("read"), ev("read")]]).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.id_for("read"), 1);
    }

    #[test]
    fn vocabulary_first_appearance_order() {
        let v = build_vocabulary(&[vec![ev("open"), ev("read"), ev("open"), ev("close")]]).unwrap();
        assert_eq!(v.id_for("open"), 1);
        assert_eq!(v.id_for("read"), 2);
        assert_eq!(v.id_for("close"), 3);
    }

    #[test]
    fn vocabulary_across_traces() {
        // Replay of the first-appearance rule by hand: a,b then b,c -> a=1 b=2 c=3.
        let v = build_vocabulary(&[vec![ev("a"), ev("b")], vec![ev("b"), ev("c")]]).unwrap();
        assert_eq!((v.id_for("a"), v.id_for("b"), v.id_for("c")), (1, 2, 3));
    }

    #[test]
    fn tokenize_known_and_unknown() {
        let v = build_vocabulary(&[vec![ev("read")]]).unwrap();
        assert_eq!(tokenize(&[ev("read")], &v), vec![1]);
        assert_eq!(tokenize(&[ev("mmap")], &v), vec![0]);
    }

    #[test]
    fn tokenize_composed_with_vocabulary() {
        let v = build_vocabulary(&[vec![ev("open"), ev("read"), ev("open"), ev("close")]]).unwrap();
        assert_eq!(tokenize(&[ev("open"), ev("read"), ev("close")], &v), vec![1, 2, 3]);
    }

    #[test]
    fn window_exact_tiling() {
        let w = window(&[1, 2, 3, 4], 2, 2, PadMode::DropTail, Label::Normal);
        let toks: Vec<_> = w.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(toks, vec![vec![1, 2], vec![3, 4]]);
    }

    #[test]
    fn window_drops_tail() {
        let w = window(&[1, 2, 3], 2, 2, PadMode::DropTail, Label::Normal);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens, vec![1, 2]);
    }

    #[test]
    fn window_zero_pads_tail() {
        // Offsets 0, 1, 2 enumerated by hand.
        let w = window(&[1, 2, 3], 2, 1, PadMode::ZeroPad, Label::Normal);
        let toks: Vec<_> = w.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(toks, vec![vec![1, 2], vec![2, 3], vec![3, 0]]);
    }

    #[test]
    fn window_shorter_than_l() {
        assert!(window(&[1, 2], 4, 1, PadMode::DropTail, Label::Normal).is_empty());
        let w = window(&[1, 2], 4, 1, PadMode::ZeroPad, Label::Normal);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens, vec![1, 2, 0, 0]);
    }

    fn normals(n: usize) -> Vec<TokenSequence> {
        (0..n).map(|i| TokenSequence::new(vec![i as u32 + 1], Label::Normal)).collect()
    }

    fn anomalies(n: usize) -> Vec<TokenSequence> {
        (0..n).map(|i| TokenSequence::new(vec![100 + i as u32], Label::Anomalous)).collect()
    }

    #[test]
    fn split_fraction_arithmetic() {
        let s = split_dataset(normals(10), vec![], 0.6, 0.2, 9).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6, 2, 2));
        assert!(s.test.iter().all(|t| t.label == Label::Normal));
    }

    #[test]
    fn split_anomalies_are_test_only() {
        let s = split_dataset(normals(10), anomalies(4), 0.6, 0.2, 9).unwrap();
        assert_eq!(s.test.len(), 6);
        let anom = s.test.iter().filter(|t| t.label == Label::Anomalous).count();
        assert_eq!(anom, 4);
        assert!(s.train.iter().chain(&s.validation).all(|t| t.label == Label::Normal));
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(normals(10), anomalies(4), 0.6, 0.2, 123).unwrap();
        let b = split_dataset(normals(10), anomalies(4), 0.6, 0.2, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(matches!(
            split_dataset(normals(10), vec![], 0.9, 0.2, 0),
            Err(IngestError::BadFractions { .. })
        ));
        assert!(matches!(
            split_dataset(normals(10), vec![], 0.0, 0.2, 0),
            Err(IngestError::BadFractions { .. })
        ));
    }

    #[test]
    fn split_rejects_empty_partition() {
        assert!(matches!(
            split_dataset(normals(2), vec![], 0.4, 0.4, 0),
            Err(IngestError::InsufficientData(_))
        ));
    }

    proptest! {
        // Tokenizing against a vocabulary built from the same events never
        // yields the unknown token.
        #[test]
        fn roundtrip_has_no_unknowns(names in proptest::collection::vec("[a-z]{1,8}", 1..64)) {
            let events: Vec<_> = names.iter().map(|n| ev(n)).collect();
            let vocab = build_vocabulary(&[events.clone()]).unwrap();
            let tokens = tokenize(&events, &vocab);
            prop_assert!(tokens.iter().all(|&t| t != UNKNOWN_ID));
            prop_assert!(tokens.iter().all(|&t| t as usize <= vocab.len()));
        }

        // With stride == length and DropTail, concatenated windows reproduce
        // the length-L*floor(n/L) prefix of the input.
        #[test]
        fn window_conservation(tokens in proptest::collection::vec(0u32..50, 0..64), l in 1usize..8) {
            let ws = window(&tokens, l, l, PadMode::DropTail, Label::Normal);
            let cat: Vec<u32> = ws.iter().flat_map(|w| w.tokens.clone()).collect();
            let keep = l * (tokens.len() / l);
            prop_assert_eq!(&cat[..], &tokens[..keep]);
            prop_assert!(ws.iter().all(|w| w.tokens.len() == l));
        }

        // Split partitions are disjoint and cover the normal pool, and no
        // anomalous label ever lands in train or validation.
        #[test]
        fn split_partitions_pool(n in 5usize..40, n_anom in 0usize..10, seed in 0u64..1000) {
            let s = split_dataset(normals(n), anomalies(n_anom), 0.6, 0.2, seed);
            prop_assume!(s.is_ok());
            let s = s.unwrap();
            let mut ids: Vec<u32> = s.train.iter()
                .chain(&s.validation)
                .chain(s.test.iter().filter(|t| t.label == Label::Normal))
                .map(|t| t.tokens[0])
                .collect();
            ids.sort_unstable();
            let expected: Vec<u32> = (1..=n as u32).collect();
            prop_assert_eq!(ids, expected);
            prop_assert!(s.train.iter().all(|t| t.label == Label::Normal));
            prop_assert!(s.validation.iter().all(|t| t.label == Label::Normal));
        }
    }
}
