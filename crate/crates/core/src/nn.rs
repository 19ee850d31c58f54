//! Minimal dense-tensor layers: embedding, 1D convolution, ReLU, max pooling,
//! fully connected. Forward passes record an [`ActivationTape`] so
//! [`extractor_backward`] can produce exact reverse-mode gradients for every
//! parameter; no external ML runtime is involved.
//!
//! No layer carries an additive bias term: with biases, the one-class
//! objective in [`crate::svdd`] admits a trivial constant-map solution.
//! Training arithmetic is 64-bit throughout.

use thiserror::Error;

use crate::rng::{derived_rng, TAG_MODEL_INIT};

/// Feature vector in the latent space the detector scores (length D).
pub type FeatureVector = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("token {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pool width {pool} does not divide sequence length {len}")]
    IndivisibleLength { len: usize, pool: usize },
    #[error("activation tape does not match the model or input")]
    TapeMismatch,
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
}

/// Row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One convolution stage: cross-correlation kernels plus the max-pool width
/// applied after its ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_width: usize,
    pub pool: usize,
    /// c_out × c_in × kernel_width, row-major.
    pub kernels: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize, kernel_width: usize, pool: usize) -> Self {
        ConvLayer { c_in, c_out, kernel_width, pool, kernels: vec![0.0; c_out * c_in * kernel_width] }
    }
}

/// Hyperparameters a serialized model must reproduce exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    /// Vocabulary size V; the embedding has V+1 rows (row 0 = unknown token).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub input_len: usize,
}

/// Shape of one conv stage, used to describe architectures before init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_out: usize,
    pub kernel_width: usize,
    pub pool: usize,
}

/// Full architecture description; see [`ExtractorModel::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub conv: Vec<ConvSpec>,
    pub feature_dim: usize,
    pub input_len: usize,
}

impl ArchConfig {
    /// Default architecture: E=32, three K=3 conv layers (32, 64, 64 channels,
    /// pool 2 each), final pool collapsing the rest, D=16.
    pub fn default_for(vocab_size: usize, input_len: usize) -> Self {
        ArchConfig {
            vocab_size,
            embed_dim: 32,
            conv: vec![
                ConvSpec { c_out: 32, kernel_width: 3, pool: 2 },
                ConvSpec { c_out: 64, kernel_width: 3, pool: 2 },
                ConvSpec { c_out: 64, kernel_width: 3, pool: 2 },
            ],
            feature_dim: 16,
            input_len,
        }
    }
}

/// Embedding + conv/ReLU/maxpool stack + dense projection. Maps a token
/// window of length L to a D-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorModel {
    /// (V+1) × E.
    pub embedding: Matrix,
    pub conv_layers: Vec<ConvLayer>,
    /// f_last × D.
    pub dense: Matrix,
    pub hyper: Hyper,
}

impl ExtractorModel {
    /// Seeded Glorot-uniform initialization (±√(6/(fan_in+fan_out)) per
    /// tensor, no biases anywhere).
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NnError> {
        use rand::Rng;
        validate_arch(arch)?;
        let mut rng = derived_rng(seed, TAG_MODEL_INIT, 0);
        let mut uniform = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        };

        let rows = arch.vocab_size + 1;
        let embedding = Matrix {
            rows,
            cols: arch.embed_dim,
            data: uniform(rows * arch.embed_dim, rows, arch.embed_dim),
        };

        let mut c_in = arch.embed_dim;
        let mut conv_layers = Vec::with_capacity(arch.conv.len());
        for spec in &arch.conv {
            let n = spec.c_out * c_in * spec.kernel_width;
            conv_layers.push(ConvLayer {
                c_in,
                c_out: spec.c_out,
                kernel_width: spec.kernel_width,
                pool: spec.pool,
                kernels: uniform(n, c_in * spec.kernel_width, spec.c_out * spec.kernel_width),
            });
            c_in = spec.c_out;
        }

        let f_last = c_in;
        let dense = Matrix {
            rows: f_last,
            cols: arch.feature_dim,
            data: uniform(f_last * arch.feature_dim, f_last, arch.feature_dim),
        };

        Ok(ExtractorModel {
            embedding,
            conv_layers,
            dense,
            hyper: Hyper {
                vocab_size: arch.vocab_size,
                embed_dim: arch.embed_dim,
                feature_dim: arch.feature_dim,
                input_len: arch.input_len,
            },
        })
    }

    /// Channel count feeding the dense layer.
    pub fn f_last(&self) -> usize {
        self.conv_layers.last().map_or(self.hyper.embed_dim, |l| l.c_out)
    }

    /// Sequence length remaining after the conv/pool stack; a final max pool
    /// of this width collapses it to 1 before the dense layer.
    pub fn final_pool_width(&self) -> usize {
        let mut len = self.hyper.input_len;
        for l in &self.conv_layers {
            len /= l.pool;
        }
        len
    }

    /// Structural consistency check (channel chain, pool divisibility, dims).
    pub fn validate(&self) -> Result<(), NnError> {
        if self.embedding.rows != self.hyper.vocab_size + 1
            || self.embedding.cols != self.hyper.embed_dim
        {
            return Err(NnError::BadArchitecture("embedding shape".into()));
        }
        let mut c_in = self.hyper.embed_dim;
        let mut len = self.hyper.input_len;
        for l in &self.conv_layers {
            if l.c_in != c_in {
                return Err(NnError::BadArchitecture(format!(
                    "conv input channels {} do not chain from {}",
                    l.c_in, c_in
                )));
            }
            if l.kernel_width % 2 == 0 {
                return Err(NnError::BadArchitecture("kernel width must be odd".into()));
            }
            if l.pool == 0 || len % l.pool != 0 {
                return Err(NnError::BadArchitecture(format!(
                    "pool {} does not divide length {len}",
                    l.pool
                )));
            }
            if l.kernels.len() != l.c_out * l.c_in * l.kernel_width {
                return Err(NnError::BadArchitecture("kernel tensor size".into()));
            }
            len /= l.pool;
            c_in = l.c_out;
        }
        if len == 0 {
            return Err(NnError::BadArchitecture("sequence length collapsed to 0".into()));
        }
        if self.dense.rows != c_in || self.dense.cols != self.hyper.feature_dim {
            return Err(NnError::BadArchitecture("dense shape".into()));
        }
        Ok(())
    }

    /// Parameter tensors in declaration order: embedding, conv kernels, dense.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.embedding.data];
        for l in &self.conv_layers {
            v.push(&l.kernels);
        }
        v.push(&self.dense.data);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let ExtractorModel { embedding, conv_layers, dense, .. } = self;
        let mut v: Vec<&mut [f64]> = vec![&mut embedding.data];
        for l in conv_layers {
            v.push(&mut l.kernels);
        }
        v.push(&mut dense.data);
        v
    }

    /// Sum of squared parameters, Σ_W ‖W‖²_F.
    pub fn weight_sq_norm(&self) -> f64 {
        self.params().iter().flat_map(|t| t.iter()).map(|w| w * w).sum()
    }
}

fn validate_arch(arch: &ArchConfig) -> Result<(), NnError> {
    if arch.embed_dim == 0 || arch.feature_dim == 0 || arch.input_len == 0 {
        return Err(NnError::BadArchitecture("zero dimension".into()));
    }
    let mut len = arch.input_len;
    for spec in &arch.conv {
        if spec.c_out == 0 {
            return Err(NnError::BadArchitecture("zero conv channels".into()));
        }
        if spec.kernel_width % 2 == 0 {
            return Err(NnError::BadArchitecture("kernel width must be odd".into()));
        }
        if spec.pool == 0 || len % spec.pool != 0 {
            return Err(NnError::BadArchitecture(format!(
                "pool {} does not divide length {len}",
                spec.pool
            )));
        }
        len /= spec.pool;
    }
    if len == 0 {
        return Err(NnError::BadArchitecture("sequence length collapsed to 0".into()));
    }
    Ok(())
}

/// Pure lookup: row i of the output is the embedding row of token i.
pub fn embed_forward(embedding: &Matrix, tokens: &[u32]) -> Result<Matrix, NnError> {
    let mut out = Matrix::zeros(tokens.len(), embedding.cols);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= embedding.rows {
            return Err(NnError::TokenOutOfRange { token: t as u32, vocab: embedding.rows - 1 });
        }
        out.data[i * embedding.cols..(i + 1) * embedding.cols]
            .copy_from_slice(embedding.row(t));
    }
    Ok(out)
}

/// Kernels rearranged to [j][o][c] so the innermost conv loops run over
/// contiguous memory on both sides.
fn transpose_kernels(layer: &ConvLayer) -> Vec<f64> {
    let (c_in, c_out, k) = (layer.c_in, layer.c_out, layer.kernel_width);
    let mut tk = vec![0.0; k * c_out * c_in];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                tk[(j * c_out + o) * c_in + c] = layer.kernels[(o * c_in + c) * k + j];
            }
        }
    }
    tk
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-correlation with zero same-padding of ⌊K/2⌋ on each side:
/// out[t][o] = Σ_{c,j} in[t+j−⌊K/2⌋][c] · ker[o][c][j].
pub fn conv1d_forward(input: &Matrix, layer: &ConvLayer) -> Result<Matrix, NnError> {
    if input.cols != layer.c_in {
        return Err(NnError::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            layer.c_in, input.cols
        )));
    }
    if input.rows == 0 {
        return Err(NnError::ShapeMismatch("empty sequence".into()));
    }
    let len = input.rows;
    let (c_in, c_out, k) = (layer.c_in, layer.c_out, layer.kernel_width);
    let off = k / 2;
    let tk = transpose_kernels(layer);
    let mut out = Matrix::zeros(len, c_out);
    for t in 0..len {
        let j_lo = off.saturating_sub(t);
        let j_hi = k.min(len + off - t);
        let out_row = &mut out.data[t * c_out..(t + 1) * c_out];
        for j in j_lo..j_hi {
            let in_row = input.row(t + j - off);
            let slab = &tk[j * c_out * c_in..(j + 1) * c_out * c_in];
            for (o, acc) in out_row.iter_mut().enumerate() {
                *acc += dot(in_row, &slab[o * c_in..(o + 1) * c_in]);
            }
        }
    }
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Non-overlapping max pooling of width `p` per channel. Returns the pooled
/// matrix plus, per output cell, the winning input row (ties break to the
/// lowest index; the backward pass routes gradient there).
pub fn maxpool_forward(input: &Matrix, p: usize) -> Result<(Matrix, Vec<usize>), NnError> {
    if p == 0 || input.rows % p != 0 {
        return Err(NnError::IndivisibleLength { len: input.rows, pool: p });
    }
    let out_rows = input.rows / p;
    let mut out = Matrix::zeros(out_rows, input.cols);
    let mut argmax = vec![0usize; out_rows * input.cols];
    for w in 0..out_rows {
        for c in 0..input.cols {
            let mut best = input.at(w * p, c);
            let mut best_row = w * p;
            for r in w * p + 1..(w + 1) * p {
                if input.at(r, c) > best {
                    best = input.at(r, c);
                    best_row = r;
                }
            }
            *out.at_mut(w, c) = best;
            argmax[w * input.cols + c] = best_row;
        }
    }
    Ok((out, argmax))
}

/// Every intermediate needed by [`extractor_backward`].
#[derive(Debug, Clone)]
pub struct ActivationTape {
    tokens: Vec<u32>,
    /// xs[0] = embedding output; xs[i+1] = pooled output of conv layer i.
    /// The last entry is the input to the final collapsing pool.
    xs: Vec<Matrix>,
    /// Pre-ReLU conv outputs, one per conv layer.
    preacts: Vec<Matrix>,
    /// Pool argmax rows, one per conv layer.
    pool_idx: Vec<Vec<usize>>,
    /// Argmax of the final collapsing pool; empty when nothing to collapse.
    final_idx: Vec<usize>,
    dense_in: Vec<f64>,
}

/// embed → (conv → ReLU → maxpool)× → final pool → dense.
pub fn extractor_forward(
    model: &ExtractorModel,
    tokens: &[u32],
) -> Result<(FeatureVector, ActivationTape), NnError> {
    if tokens.len() != model.hyper.input_len {
        return Err(NnError::ShapeMismatch(format!(
            "input length {} != model input length {}",
            tokens.len(),
            model.hyper.input_len
        )));
    }
    let mut xs = vec![embed_forward(&model.embedding, tokens)?];
    let mut preacts = Vec::with_capacity(model.conv_layers.len());
    let mut pool_idx = Vec::with_capacity(model.conv_layers.len());

    for layer in &model.conv_layers {
        let pre = conv1d_forward(xs.last().unwrap(), layer)?;
        let act = relu(&pre);
        let (pooled, idx) = maxpool_forward(&act, layer.pool)?;
        preacts.push(pre);
        pool_idx.push(idx);
        xs.push(pooled);
    }

    let last = xs.last().unwrap();
    let (dense_in, final_idx) = if last.rows > 1 {
        let (collapsed, idx) = maxpool_forward(last, last.rows)?;
        (collapsed.data, idx)
    } else {
        (last.data.clone(), Vec::new())
    };

    if dense_in.len() != model.dense.rows {
        return Err(NnError::ShapeMismatch(format!(
            "dense expects {} inputs, got {}",
            model.dense.rows,
            dense_in.len()
        )));
    }
    let mut feature = vec![0.0; model.dense.cols];
    for f in 0..model.dense.rows {
        let x = dense_in[f];
        for d in 0..model.dense.cols {
            feature[d] += x * model.dense.at(f, d);
        }
    }

    Ok((
        feature,
        ActivationTape { tokens: tokens.to_vec(), xs, preacts, pool_idx, final_idx, dense_in },
    ))
}

/// Gradients for every trainable tensor, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub embedding: Matrix,
    pub conv_kernels: Vec<Vec<f64>>,
    pub dense: Matrix,
}

impl GradientSet {
    pub fn zeros_like(model: &ExtractorModel) -> Self {
        GradientSet {
            embedding: Matrix::zeros(model.embedding.rows, model.embedding.cols),
            conv_kernels: model.conv_layers.iter().map(|l| vec![0.0; l.kernels.len()]).collect(),
            dense: Matrix::zeros(model.dense.rows, model.dense.cols),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.embedding.data];
        for k in &self.conv_kernels {
            v.push(k);
        }
        v.push(&self.dense.data);
        v
    }

    /// Accumulate `other`, entry by entry.
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.embedding.data.iter_mut().zip(&other.embedding.data) {
            *a += b;
        }
        for (ka, kb) in self.conv_kernels.iter_mut().zip(&other.conv_kernels) {
            for (a, b) in ka.iter_mut().zip(kb) {
                *a += b;
            }
        }
        for (a, b) in self.dense.data.iter_mut().zip(&other.dense.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in [&mut self.embedding.data, &mut self.dense.data] {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
        for k in &mut self.conv_kernels {
            for v in k.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Exact reverse-mode gradients for a forward pass recorded on `tape`.
/// Max pools route gradient only to their recorded argmax rows; ReLU gates by
/// the sign of the pre-activation.
pub fn extractor_backward(
    model: &ExtractorModel,
    tape: &ActivationTape,
    grad_feature: &[f64],
) -> Result<GradientSet, NnError> {
    let n_conv = model.conv_layers.len();
    if tape.xs.len() != n_conv + 1
        || tape.preacts.len() != n_conv
        || tape.tokens.len() != model.hyper.input_len
        || tape.dense_in.len() != model.dense.rows
        || grad_feature.len() != model.dense.cols
    {
        return Err(NnError::TapeMismatch);
    }

    let mut grads = GradientSet::zeros_like(model);

    // Dense layer: g_dense[f][d] = dense_in[f] * gf[d]; g_in[f] = Σ_d W[f][d]·gf[d].
    let mut g_dense_in = vec![0.0; model.dense.rows];
    for f in 0..model.dense.rows {
        let x = tape.dense_in[f];
        let mut acc = 0.0;
        for d in 0..model.dense.cols {
            *grads.dense.at_mut(f, d) += x * grad_feature[d];
            acc += model.dense.at(f, d) * grad_feature[d];
        }
        g_dense_in[f] = acc;
    }

    // Final collapsing pool (identity when the stack already reached length 1).
    let last = &tape.xs[n_conv];
    let mut g_x = Matrix::zeros(last.rows, last.cols);
    if tape.final_idx.is_empty() {
        if last.rows != 1 {
            return Err(NnError::TapeMismatch);
        }
        g_x.data.copy_from_slice(&g_dense_in);
    } else {
        for c in 0..last.cols {
            *g_x.at_mut(tape.final_idx[c], c) = g_dense_in[c];
        }
    }

    for i in (0..n_conv).rev() {
        let layer = &model.conv_layers[i];
        let pre = &tape.preacts[i];
        let input = &tape.xs[i];

        // Pool backward: deposit each pooled gradient at its argmax row.
        let mut g_act = Matrix::zeros(pre.rows, pre.cols);
        for w in 0..g_x.rows {
            for c in 0..g_x.cols {
                g_act.data[tape.pool_idx[i][w * g_x.cols + c] * g_act.cols + c] += g_x.at(w, c);
            }
        }

        // ReLU backward.
        for (g, &p) in g_act.data.iter_mut().zip(&pre.data) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }

        // Conv backward: kernel and input gradients of the cross-correlation,
        // accumulated in the transposed [j][o][c] layout for contiguity and
        // written back to the declaration layout afterwards.
        let len = input.rows;
        let (c_in, c_out, k) = (layer.c_in, layer.c_out, layer.kernel_width);
        let off = k / 2;
        let tk = transpose_kernels(layer);
        let mut gk_t = vec![0.0; k * c_out * c_in];
        let mut g_in = Matrix::zeros(input.rows, input.cols);
        for t in 0..len {
            let j_lo = off.saturating_sub(t);
            let j_hi = k.min(len + off - t);
            let g_row = g_act.row(t);
            for j in j_lo..j_hi {
                let u = t + j - off;
                let in_row = input.row(u);
                let gin_row = &mut g_in.data[u * c_in..(u + 1) * c_in];
                let slab = &tk[j * c_out * c_in..(j + 1) * c_out * c_in];
                let gslab = &mut gk_t[j * c_out * c_in..(j + 1) * c_out * c_in];
                for (o, &g) in g_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let kk = &slab[o * c_in..(o + 1) * c_in];
                    let gk = &mut gslab[o * c_in..(o + 1) * c_in];
                    for c in 0..c_in {
                        gk[c] += g * in_row[c];
                        gin_row[c] += g * kk[c];
                    }
                }
            }
        }
        let kernel_grads = &mut grads.conv_kernels[i];
        for o in 0..c_out {
            for c in 0..c_in {
                for j in 0..k {
                    kernel_grads[(o * c_in + c) * k + j] += gk_t[(j * c_out + o) * c_in + c];
                }
            }
        }
        g_x = g_in;
    }

    // Embedding backward: rows accumulate over repeated tokens.
    for (t, &tok) in tape.tokens.iter().enumerate() {
        let row = tok as usize;
        for e in 0..model.embedding.cols {
            *grads.embedding.at_mut(row, e) += g_x.at(t, e);
        }
    }

    Ok(grads)
}
