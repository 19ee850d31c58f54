//! One-class training of the feature extractor: normal windows are pulled
//! toward a fixed hypersphere center in feature space. The center is the mean
//! of the initial model's outputs over the training windows (with a
//! zero-collapse guard) and never moves afterwards; only the network weights
//! are optimized, with Adam and decay applied through the gradient.
//!
//! Two objectives are provided. `OneClass` minimizes mean squared distance to
//! the center plus weight decay. `SoftBoundary` additionally carries a radius
//! R and penalizes only samples outside it, refreshing R every few batches
//! from a quantile of batch distances.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::ingest::{DatasetSplit, TokenSequence};
use crate::nn::{
    extractor_backward, extractor_forward, ExtractorModel, FeatureVector, GradientSet, NnError,
};
use crate::rng::{derived_rng, TAG_TRAIN_SHUFFLE};

/// Radius refresh cadence for the soft-boundary objective, in batches.
const RADIUS_UPDATE_EVERY: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Hypersphere state: center c, radius R (soft boundary only), and the weight
/// decay λ the model was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct SvddState {
    pub center: Vec<f64>,
    pub radius: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Objective {
    OneClass,
    SoftBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Fraction of samples allowed outside the sphere (soft boundary only).
    pub nu: f64,
    /// Zero-collapse guard for center coordinates.
    pub epsilon_c: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            seed: 42,
            objective: Objective::OneClass,
            nu: 0.1,
            epsilon_c: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig("weight_decay must be nonnegative".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(TrainError::BadConfig("nu must be in (0, 1]".into()));
        }
        if !(self.epsilon_c > 0.0) {
            return Err(TrainError::BadConfig("epsilon_c must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch record emitted by [`train`].
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_sq_dist: f64,
    pub wall_seconds: f64,
}

/// Feature vectors for a batch of windows under a frozen model.
pub fn extract_features(
    model: &ExtractorModel,
    windows: &[TokenSequence],
) -> Result<Vec<FeatureVector>, NnError> {
    windows
        .iter()
        .map(|w| extractor_forward(model, &w.tokens).map(|(f, _)| f))
        .collect()
}

/// Mean squared distance from `center` over `windows`.
pub fn mean_sq_distance(
    model: &ExtractorModel,
    center: &[f64],
    windows: &[TokenSequence],
) -> Result<f64, NnError> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for w in windows {
        let (f, _) = extractor_forward(model, &w.tokens)?;
        sum += sq_dist(&f, center);
    }
    Ok(sum / windows.len() as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Center initialization: mean of the initial model's features over the
/// training windows. Coordinates with |c_j| < epsilon_c are pushed to
/// ±epsilon_c preserving sign (exact zeros go positive) so the network cannot
/// trivially satisfy the objective by mapping everything to the origin.
pub fn init_center(
    model: &ExtractorModel,
    train: &[TokenSequence],
    epsilon_c: f64,
) -> Result<Vec<f64>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let d = model.hyper.feature_dim;
    let mut center = vec![0.0; d];
    for w in train {
        let (f, _) = extractor_forward(model, &w.tokens)?;
        for (c, v) in center.iter_mut().zip(&f) {
            *c += v;
        }
    }
    let n = train.len() as f64;
    for c in center.iter_mut() {
        *c /= n;
        if c.abs() < epsilon_c {
            *c = if *c < 0.0 { -epsilon_c } else { epsilon_c };
        }
    }
    Ok(center)
}

/// Loss and per-feature gradients for one batch.
///
/// `OneClass`: loss = (1/n)·Σ‖φ_i − c‖² + (λ/2)·Σ_W‖W‖²_F, gradient
/// (2/n)(φ_i − c) for every sample. `SoftBoundary`: loss = R² +
/// (1/(ν·n))·Σ max(0, ‖φ_i − c‖² − R²) + decay, gradient routed only through
/// violating samples. `weight_sq_norm` supplies Σ_W‖W‖²_F.
pub fn svdd_loss(
    features: &[FeatureVector],
    state: &SvddState,
    weight_sq_norm: f64,
    config: &TrainConfig,
) -> (f64, Vec<Vec<f64>>) {
    assert!(!features.is_empty(), "svdd_loss needs a non-empty batch");
    let n = features.len() as f64;
    let decay = 0.5 * config.weight_decay * weight_sq_norm;
    match config.objective {
        Objective::OneClass => {
            let mut loss = 0.0;
            let grads = features
                .iter()
                .map(|f| {
                    loss += sq_dist(f, &state.center);
                    f.iter().zip(&state.center).map(|(x, c)| 2.0 / n * (x - c)).collect()
                })
                .collect();
            (loss / n + decay, grads)
        }
        Objective::SoftBoundary => {
            let r_sq = state.radius * state.radius;
            let mut hinge = 0.0;
            let grads = features
                .iter()
                .map(|f| {
                    let d_sq = sq_dist(f, &state.center);
                    if d_sq > r_sq {
                        hinge += d_sq - r_sq;
                        f.iter()
                            .zip(&state.center)
                            .map(|(x, c)| 2.0 / (config.nu * n) * (x - c))
                            .collect()
                    } else {
                        vec![0.0; f.len()]
                    }
                })
                .collect();
            (r_sq + hinge / (config.nu * n) + decay, grads)
        }
    }
}

/// (1−ν)-quantile of distances, used as the refreshed soft-boundary radius.
fn radius_quantile(sq_dists: &mut [f64], nu: f64) -> f64 {
    sq_dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sq_dists.len();
    let idx = (((1.0 - nu) * n as f64).ceil() as usize).saturating_sub(1).min(n - 1);
    sq_dists[idx].sqrt()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Train the extractor on `data.train`. Returns the trained model, the frozen
/// hypersphere state, and one [`EpochStats`] per epoch. Identical inputs,
/// config, and seed reproduce identical weights bit for bit.
pub fn train(
    model: ExtractorModel,
    data: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(ExtractorModel, SvddState, Vec<EpochStats>), TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    model.validate()?;

    let center = init_center(&model, &data.train, config.epsilon_c)?;
    let mut state = SvddState { center, radius: 0.0, weight_decay: config.weight_decay };
    let mut model = model;
    if config.epochs == 0 {
        return Ok((model, state, Vec::new()));
    }

    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes, config.learning_rate);
    let mut shuffle_rng = derived_rng(config.seed, TAG_TRAIN_SHUFFLE, 0);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batches_done = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut sq_dist_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            let mut features = Vec::with_capacity(batch.len());
            let mut tapes = Vec::with_capacity(batch.len());
            for &idx in batch {
                let (f, tape) = extractor_forward(&model, &data.train[idx].tokens)?;
                features.push(f);
                tapes.push(tape);
            }

            let (loss, feature_grads) =
                svdd_loss(&features, &state, model.weight_sq_norm(), config);
            if !loss.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            let mut batch_sq: Vec<f64> =
                features.iter().map(|f| sq_dist(f, &state.center)).collect();
            sq_dist_sum += batch_sq.iter().sum::<f64>();

            let mut grads = GradientSet::zeros_like(&model);
            for (tape, gf) in tapes.iter().zip(&feature_grads) {
                grads.add_assign(&extractor_backward(&model, tape, gf)?);
            }
            // Decay through the gradient: g += λ·w, so lr scales everything.
            if config.weight_decay > 0.0 {
                let decay = config.weight_decay;
                let model_params = model.params();
                let grad_tensors: Vec<Vec<f64>> = grads
                    .params()
                    .iter()
                    .zip(&model_params)
                    .map(|(g, w)| g.iter().zip(w.iter()).map(|(g, w)| g + decay * w).collect())
                    .collect();
                let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|t| t.as_slice()).collect();
                adam.step(model.params_mut(), grad_slices);
            } else {
                adam.step(model.params_mut(), grads.params());
            }

            batches_done += 1;
            if config.objective == Objective::SoftBoundary
                && batches_done % RADIUS_UPDATE_EVERY == 0
            {
                state.radius = radius_quantile(&mut batch_sq, config.nu);
            }
        }

        let n = data.train.len() as f64;
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            mean_sq_dist: sq_dist_sum / n,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok((model, state, history))
}
