//! Isolation forest over feature vectors: an ensemble of randomly built
//! trees whose average path length yields an anomaly score in (0, 1),
//! higher = more anomalous.
//!
//! Reproducibility contract (oracle builders must follow it draw for draw):
//! at each internal node the builder (1) lists dimensions with nonzero range
//! in ascending order and picks one with `gen_range(0..len)`, (2) draws
//! `gen::<f64>()` repeatedly (at most [`MAX_SPLIT_DRAWS`] times) until
//! `min + u·(max−min)` falls strictly inside (min, max), then (3) partitions
//! strictly-less to the left and recurses left before right. Each tree owns a
//! generator derived from (seed, tree_index), so parallel and serial builds
//! are identical.

use rand::Rng;
use thiserror::Error;

use crate::nn::FeatureVector;
use crate::rng::{derived_rng, TAG_FOREST};

/// Euler–Mascheroni constant, for the harmonic-number approximation.
pub const EULER_MASCHERONI: f64 = 0.5772156649;

/// Bail out to a leaf if the open interval (min, max) cannot be hit.
pub const MAX_SPLIT_DRAWS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("cannot build a tree from an empty sample")]
    EmptySample,
    #[error("training set is empty or degenerate (need at least 2 points)")]
    EmptyTrainingSet,
    #[error("feature has dimension {got}, forest expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("invalid forest parameters: {0}")]
    BadParameter(String),
}

/// Average unsuccessful-search path length of a binary search tree with n
/// points: 2·H(n−1) − 2(n−1)/n, with H(i) ≈ ln(i) + γ. Zero for n ≤ 1.
pub fn c_factor(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    2.0 * ((nf - 1.0).ln() + EULER_MASCHERONI) - 2.0 * (nf - 1.0) / nf
}

#[derive(Debug, Clone, PartialEq)]
pub enum ITreeNode {
    Internal {
        split_dim: usize,
        split_value: f64,
        left: Box<ITreeNode>,
        right: Box<ITreeNode>,
    },
    Leaf {
        size: usize,
    },
}

impl ITreeNode {
    pub fn depth(&self) -> usize {
        match self {
            ITreeNode::Leaf { .. } => 0,
            ITreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Training points recorded under this subtree.
    pub fn total_size(&self) -> usize {
        match self {
            ITreeNode::Leaf { size } => *size,
            ITreeNode::Internal { left, right, .. } => left.total_size() + right.total_size(),
        }
    }
}

/// Recursively isolate `sample`; see the module docs for the draw protocol.
pub fn build_tree(
    sample: &[FeatureVector],
    height_limit: usize,
    rng: &mut impl Rng,
) -> Result<ITreeNode, ForestError> {
    if sample.is_empty() {
        return Err(ForestError::EmptySample);
    }
    let refs: Vec<&[f64]> = sample.iter().map(|f| f.as_slice()).collect();
    Ok(build_node(&refs, 0, height_limit, rng))
}

fn build_node(sample: &[&[f64]], depth: usize, height_limit: usize, rng: &mut impl Rng) -> ITreeNode {
    if depth >= height_limit || sample.len() <= 1 {
        return ITreeNode::Leaf { size: sample.len() };
    }

    let dims = sample[0].len();
    let mut mins = sample[0].to_vec();
    let mut maxs = sample[0].to_vec();
    for point in &sample[1..] {
        for (d, &v) in point.iter().enumerate() {
            if v < mins[d] {
                mins[d] = v;
            }
            if v > maxs[d] {
                maxs[d] = v;
            }
        }
    }
    let eligible: Vec<usize> = (0..dims).filter(|&d| maxs[d] > mins[d]).collect();
    if eligible.is_empty() {
        return ITreeNode::Leaf { size: sample.len() };
    }

    let split_dim = eligible[rng.gen_range(0..eligible.len())];
    let (lo, hi) = (mins[split_dim], maxs[split_dim]);
    let mut split_value = None;
    for _ in 0..MAX_SPLIT_DRAWS {
        let v = lo + rng.gen::<f64>() * (hi - lo);
        if v > lo && v < hi {
            split_value = Some(v);
            break;
        }
    }
    let split_value = match split_value {
        Some(v) => v,
        // The open interval is numerically empty; treat as unsplittable.
        None => return ITreeNode::Leaf { size: sample.len() },
    };

    let mut left = Vec::new();
    let mut right = Vec::new();
    for point in sample {
        if point[split_dim] < split_value {
            left.push(*point);
        } else {
            right.push(*point);
        }
    }
    debug_assert!(
        !left.is_empty() && !right.is_empty(),
        "a split strictly inside (min, max) cannot empty a partition"
    );

    ITreeNode::Internal {
        split_dim,
        split_value,
        left: Box::new(build_node(&left, depth + 1, height_limit, rng)),
        right: Box::new(build_node(&right, depth + 1, height_limit, rng)),
    }
}

/// Edges from root to the reached leaf plus c_factor(leaf size).
pub fn path_length(tree: &ITreeNode, x: &[f64]) -> Result<f64, ForestError> {
    let mut node = tree;
    let mut edges = 0.0;
    loop {
        match node {
            ITreeNode::Leaf { size } => return Ok(edges + c_factor(*size)),
            ITreeNode::Internal { split_dim, split_value, left, right } => {
                if *split_dim >= x.len() {
                    return Err(ForestError::DimensionMismatch {
                        got: x.len(),
                        expected: *split_dim + 1,
                    });
                }
                node = if x[*split_dim] < *split_value { left } else { right };
                edges += 1.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForestModel {
    pub trees: Vec<ITreeNode>,
    /// Requested subsample size ψ.
    pub psi: usize,
    /// ⌈log2 ψ_eff⌉, the per-tree depth cap.
    pub height_limit: usize,
    pub seed: u64,
    dim: usize,
    /// Realized per-tree sample size, min(ψ, n).
    psi_eff: usize,
}

impl IsolationForestModel {
    /// Reassemble a forest from stored parts; ψ_eff is recovered from the
    /// first tree's leaf sizes.
    pub fn from_parts(
        trees: Vec<ITreeNode>,
        psi: usize,
        height_limit: usize,
        seed: u64,
        dim: usize,
    ) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::BadParameter("forest has no trees".into()));
        }
        if trees.iter().any(|t| t.depth() > height_limit) {
            return Err(ForestError::BadParameter("tree exceeds height limit".into()));
        }
        let psi_eff = trees[0].total_size();
        Ok(IsolationForestModel { trees, psi, height_limit, seed, dim, psi_eff })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn psi_eff(&self) -> usize {
        self.psi_eff
    }

    /// Anomaly score s(x) = 2^(−E[h(x)] / c(ψ_eff)); higher = more anomalous.
    pub fn score(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.dim {
            return Err(ForestError::DimensionMismatch { got: x.len(), expected: self.dim });
        }
        let mut total = 0.0;
        for tree in &self.trees {
            total += path_length(tree, x)?;
        }
        let mean_path = total / self.trees.len() as f64;
        let norm = c_factor(self.psi_eff);
        if norm <= 0.0 {
            // ψ_eff ≤ 1: a degenerate forest has no isolation signal.
            return Ok(0.5);
        }
        Ok(2f64.powf(-mean_path / norm))
    }
}

/// Fit `t` trees, each on an independent uniform subsample of min(ψ, n)
/// points drawn without replacement.
pub fn fit(
    features: &[FeatureVector],
    t: usize,
    psi: usize,
    seed: u64,
) -> Result<IsolationForestModel, ForestError> {
    fit_with_workers(features, t, psi, seed, 1)
}

/// Parallel fit; bit-identical to [`fit`] because each tree derives its own
/// generator from (seed, tree_index).
pub fn fit_with_workers(
    features: &[FeatureVector],
    t: usize,
    psi: usize,
    seed: u64,
    workers: usize,
) -> Result<IsolationForestModel, ForestError> {
    if features.is_empty() {
        return Err(ForestError::EmptyTrainingSet);
    }
    if t == 0 {
        return Err(ForestError::BadParameter("need at least one tree".into()));
    }
    if psi < 2 {
        return Err(ForestError::BadParameter("psi must be at least 2".into()));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(ForestError::DimensionMismatch { got: 0, expected: dim });
    }

    let n = features.len();
    let psi_eff = psi.min(n);
    let height_limit = (psi_eff as f64).log2().ceil() as usize;

    let build_one = |tree_index: usize| -> ITreeNode {
        let mut rng = derived_rng(seed, TAG_FOREST, tree_index as u64);
        let chosen = rand::seq::index::sample(&mut rng, n, psi_eff);
        let subsample: Vec<&[f64]> = chosen.iter().map(|i| features[i].as_slice()).collect();
        build_node(&subsample, 0, height_limit, &mut rng)
    };

    let workers = workers.max(1).min(t);
    let trees: Vec<ITreeNode> = if workers == 1 {
        (0..t).map(build_one).collect()
    } else {
        let mut slots: Vec<Option<ITreeNode>> = vec![None; t];
        std::thread::scope(|scope| {
            for (w, chunk) in slots.chunks_mut(t.div_ceil(workers)).enumerate() {
                let base = w * t.div_ceil(workers);
                let build_one = &build_one;
                scope.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(build_one(base + off));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("tree built")).collect()
    };

    Ok(IsolationForestModel { trees, psi, height_limit, seed, dim, psi_eff })
}
