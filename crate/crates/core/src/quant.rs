//! Post-training int8 quantization of a trained extractor.
//!
//! Weight-only scheme: every weight tensor is stored as int8 with one affine
//! (scale, zero_point) pair per tensor — symmetric (zero_point = 0) for model
//! weights — while activations stay in real arithmetic. Inference runs in
//! 32-bit floats over weights dequantized once at construction, which keeps
//! the quantized path at least as fast as the 64-bit float path.

use thiserror::Error;

use crate::nn::{ExtractorModel, FeatureVector, Hyper, NnError};

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("tensor contains non-finite values")]
    NonFiniteInput,
    #[error("cannot quantize an empty tensor")]
    EmptyTensor,
}

/// Affine quantization parameters: real = (q − zero_point) · scale.
/// The scale is kept at f32 precision so files round-trip bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// zero_point = 0, scale = max(|min|, |max|)/127.
    Symmetric,
    /// scale = (max − min)/255, zero_point = round(−128 − min/scale).
    Affine,
}

/// Quantization parameters for `tensor`. An all-zero (or otherwise
/// zero-range) tensor yields scale 1 (resp. the symmetric rule) so the scale
/// stays strictly positive.
pub fn compute_qparams(tensor: &[f64], mode: QuantMode) -> Result<QuantParams, QuantError> {
    if tensor.is_empty() {
        return Err(QuantError::EmptyTensor);
    }
    if tensor.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFiniteInput);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in tensor {
        lo = lo.min(v);
        hi = hi.max(v);
    }

    let symmetric = |lo: f64, hi: f64| -> QuantParams {
        let m = lo.abs().max(hi.abs());
        if m == 0.0 {
            return QuantParams { scale: 1.0, zero_point: 0 };
        }
        let mut scale = (m / 127.0) as f32;
        if scale == 0.0 {
            scale = f32::MIN_POSITIVE;
        }
        QuantParams { scale, zero_point: 0 }
    };

    match mode {
        QuantMode::Symmetric => Ok(symmetric(lo, hi)),
        QuantMode::Affine => {
            if hi == lo {
                return Ok(symmetric(lo, hi));
            }
            let mut scale = ((hi - lo) / 255.0) as f32;
            if scale == 0.0 {
                scale = f32::MIN_POSITIVE;
            }
            let zp = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i8;
            Ok(QuantParams { scale, zero_point: zp })
        }
    }
}

/// q = clamp(round(x/scale) + zero_point, −128, 127), rounding half away
/// from zero.
pub fn quantize_tensor(tensor: &[f64], params: QuantParams) -> Vec<i8> {
    let s = params.scale as f64;
    let zp = params.zero_point as f64;
    tensor
        .iter()
        .map(|&x| ((x / s).round() + zp).clamp(-128.0, 127.0) as i8)
        .collect()
}

/// dq = (q − zero_point) · scale.
pub fn dequantize_tensor(values: &[i8], params: QuantParams) -> Vec<f64> {
    let s = params.scale as f64;
    let zp = params.zero_point as f64;
    values.iter().map(|&q| (q as f64 - zp) * s).collect()
}

/// An int8 payload plus its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub params: QuantParams,
    pub values: Vec<i8>,
}

impl QuantTensor {
    fn from_floats(tensor: &[f64]) -> Result<Self, QuantError> {
        let params = compute_qparams(tensor, QuantMode::Symmetric)?;
        Ok(QuantTensor { params, values: quantize_tensor(tensor, params) })
    }

    fn dequant_f32(&self) -> Vec<f32> {
        let s = self.params.scale;
        let zp = self.params.zero_point as f32;
        self.values.iter().map(|&q| (q as f32 - zp) * s).collect()
    }

    /// Serialized bytes: int8 payload plus scale (4) and zero_point (1).
    pub fn payload_bytes(&self) -> usize {
        self.values.len() + 5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_width: usize,
    pub pool: usize,
    pub tensor: QuantTensor,
}

/// Int8 snapshot of an [`ExtractorModel`]; hyperparameters copied verbatim.
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub hyper: Hyper,
    pub embedding: QuantTensor,
    pub conv: Vec<QuantConvLayer>,
    pub dense: QuantTensor,
    emb_f32: Vec<f32>,
    conv_f32: Vec<Vec<f32>>,
    dense_f32: Vec<f32>,
}

impl QuantizedModel {
    pub fn new(
        hyper: Hyper,
        embedding: QuantTensor,
        conv: Vec<QuantConvLayer>,
        dense: QuantTensor,
    ) -> Self {
        let emb_f32 = embedding.dequant_f32();
        let conv_f32 = conv.iter().map(|l| l.tensor.dequant_f32()).collect();
        let dense_f32 = dense.dequant_f32();
        QuantizedModel { hyper, embedding, conv, dense, emb_f32, conv_f32, dense_f32 }
    }

    /// Serialized parameter payload in bytes (tensor payloads only).
    pub fn payload_bytes(&self) -> usize {
        self.embedding.payload_bytes()
            + self.conv.iter().map(|l| l.tensor.payload_bytes()).sum::<usize>()
            + self.dense.payload_bytes()
    }

    pub fn f_last(&self) -> usize {
        self.conv.last().map_or(self.hyper.embed_dim, |l| l.c_out)
    }
}

/// Serialized 32-bit float parameter payload of `model`, in bytes.
pub fn float_payload_bytes(model: &ExtractorModel) -> usize {
    4 * model.params().iter().map(|t| t.len()).sum::<usize>()
}

/// Symmetric per-tensor quantization of every weight tensor.
pub fn quantize_model(model: &ExtractorModel) -> Result<QuantizedModel, QuantError> {
    let embedding = QuantTensor::from_floats(&model.embedding.data)?;
    let conv = model
        .conv_layers
        .iter()
        .map(|l| {
            Ok(QuantConvLayer {
                c_in: l.c_in,
                c_out: l.c_out,
                kernel_width: l.kernel_width,
                pool: l.pool,
                tensor: QuantTensor::from_floats(&l.kernels)?,
            })
        })
        .collect::<Result<Vec<_>, QuantError>>()?;
    let dense = QuantTensor::from_floats(&model.dense.data)?;
    Ok(QuantizedModel::new(model.hyper, embedding, conv, dense))
}

/// Forward pass over the dequantized f32 weights: embed → (conv → ReLU →
/// maxpool)× → final pool → dense. Output is upcast to f64.
pub fn quantized_forward(model: &QuantizedModel, tokens: &[u32]) -> Result<FeatureVector, NnError> {
    let hyper = &model.hyper;
    if tokens.len() != hyper.input_len {
        return Err(NnError::ShapeMismatch(format!(
            "input length {} != model input length {}",
            tokens.len(),
            hyper.input_len
        )));
    }

    let e = hyper.embed_dim;
    let rows = hyper.vocab_size + 1;
    let mut len = tokens.len();
    let mut cols = e;
    let mut x = vec![0f32; len * e];
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= rows {
            return Err(NnError::TokenOutOfRange { token: t as u32, vocab: rows - 1 });
        }
        x[i * e..(i + 1) * e].copy_from_slice(&model.emb_f32[t * e..(t + 1) * e]);
    }

    for (layer, kernels) in model.conv.iter().zip(&model.conv_f32) {
        if layer.c_in != cols {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                layer.c_in, cols
            )));
        }
        let (c_in, c_out, k) = (layer.c_in, layer.c_out, layer.kernel_width);
        let off = k / 2;
        // [j][o][c] layout keeps the inner dot contiguous.
        let mut tk = vec![0f32; k * c_out * c_in];
        for o in 0..c_out {
            for c in 0..c_in {
                for j in 0..k {
                    tk[(j * c_out + o) * c_in + c] = kernels[(o * c_in + c) * k + j];
                }
            }
        }
        let mut out = vec![0f32; len * c_out];
        for t in 0..len {
            let j_lo = off.saturating_sub(t);
            let j_hi = k.min(len + off - t);
            let out_row = &mut out[t * c_out..(t + 1) * c_out];
            for j in j_lo..j_hi {
                let in_row = &x[(t + j - off) * cols..(t + j - off + 1) * cols];
                let slab = &tk[j * c_out * c_in..(j + 1) * c_out * c_in];
                for (o, acc) in out_row.iter_mut().enumerate() {
                    let kk = &slab[o * c_in..(o + 1) * c_in];
                    *acc += in_row.iter().zip(kk).map(|(a, b)| a * b).sum::<f32>();
                }
            }
        }
        // ReLU after the full accumulation.
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }

        let p = layer.pool;
        if p == 0 || len % p != 0 {
            return Err(NnError::IndivisibleLength { len, pool: p });
        }
        let pooled_len = len / p;
        let mut pooled = vec![f32::NEG_INFINITY; pooled_len * layer.c_out];
        for t in 0..len {
            let w = t / p;
            for o in 0..layer.c_out {
                let v = out[t * layer.c_out + o];
                let slot = &mut pooled[w * layer.c_out + o];
                if v > *slot {
                    *slot = v;
                }
            }
        }
        x = pooled;
        len = pooled_len;
        cols = layer.c_out;
    }

    // Final collapsing pool down to one position.
    if len > 1 {
        let mut collapsed = vec![f32::NEG_INFINITY; cols];
        for t in 0..len {
            for c in 0..cols {
                let v = x[t * cols + c];
                if v > collapsed[c] {
                    collapsed[c] = v;
                }
            }
        }
        x = collapsed;
    }

    let f_last = model.f_last();
    if x.len() != f_last || model.dense_f32.len() != f_last * hyper.feature_dim {
        return Err(NnError::ShapeMismatch("dense input size".into()));
    }
    let mut feature = vec![0f32; hyper.feature_dim];
    for f in 0..f_last {
        let v = x[f];
        for d in 0..hyper.feature_dim {
            feature[d] += v * model.dense_f32[f * hyper.feature_dim + d];
        }
    }
    Ok(feature.into_iter().map(|v| v as f64).collect())
}
