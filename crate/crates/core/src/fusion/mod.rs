//! Vision–torque fusion strategies and the operations that combine the
//! per-modality noise estimates.

pub mod model;
pub mod sampler;
pub mod strategy;

pub use model::{Block, Conditioning, Layout, MixWeights, ModelDims, ObsBatch, PolicyModel};
pub use sampler::{Policy, SampleOutput, TraceRow};
pub use strategy::{StrategyConfig, StrategyTag};

use crate::diffusion::{training_loss, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::models::{GuidanceWeight, Mat, ParameterSet, Scalar};
use crate::simenv::ObservationWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Vision,
    Torque,
    Blended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction<T> {
    pub values: Mat<T>,
    pub source: NoiseSource,
}

fn same_shape<T: Scalar>(a: &NoisePrediction<T>, b: &NoisePrediction<T>) -> Result<()> {
    if (a.values.rows, a.values.cols) != (b.values.rows, b.values.cols) {
        return Err(Error::Shape(format!(
            "noise predictions {}x{} and {}x{} differ",
            a.values.rows, a.values.cols, b.values.rows, b.values.cols
        )));
    }
    Ok(())
}

/// `ε̂_v + w·(ε̂_t − ε̂_v)`. At `w = 0` the vision estimate is returned
/// unchanged.
pub fn cfg_combine<T: Scalar>(
    eps_vision: &NoisePrediction<T>,
    eps_torque: &NoisePrediction<T>,
    w: GuidanceWeight<T>,
) -> Result<NoisePrediction<T>> {
    same_shape(eps_vision, eps_torque)?;
    let w = w.w_torque;
    if w == T::zero() {
        return Ok(NoisePrediction {
            values: eps_vision.values.clone(),
            source: NoiseSource::Blended,
        });
    }
    let mut values = eps_vision.values.clone();
    for (v, &t) in values.data.iter_mut().zip(&eps_torque.values.data) {
        *v = *v + w * (t - *v);
    }
    Ok(NoisePrediction {
        values,
        source: NoiseSource::Blended,
    })
}

/// `w_img·ε̂_v + w_tor·ε̂_t` for weights on the probability simplex.
pub fn moe_combine<T: Scalar>(
    eps_vision: &NoisePrediction<T>,
    eps_torque: &NoisePrediction<T>,
    w_img: T,
    w_tor: T,
) -> Result<NoisePrediction<T>> {
    same_shape(eps_vision, eps_torque)?;
    let sum = (w_img + w_tor).to_f64c();
    if (sum - 1.0).abs() > 1e-9 || w_img < T::zero() || w_tor < T::zero() {
        return Err(Error::Invalid(format!(
            "mixture weights must be non-negative and sum to 1, got {} + {}",
            w_img.to_f64c(),
            w_tor.to_f64c()
        )));
    }
    let mut values = eps_vision.values.clone();
    for (v, &t) in values.data.iter_mut().zip(&eps_torque.values.data) {
        *v = w_img * *v + w_tor * t;
    }
    Ok(NoisePrediction {
        values,
        source: NoiseSource::Blended,
    })
}

/// Conditioning vectors for a single observation window.
pub fn build_conditioning<T: Scalar>(
    model: &PolicyModel,
    params: &ParameterSet<T>,
    window: &ObservationWindow,
) -> Result<Conditioning<T>> {
    let obs = model.observe(params, &[window])?;
    Ok(model.conditioning(params, &obs))
}

/// Final noise estimate of the strategy for one noisy trajectory.
pub fn predict_noise<T: Scalar>(
    model: &PolicyModel,
    params: &ParameterSet<T>,
    noisy: &Mat<T>,
    t: usize,
    window: &ObservationWindow,
) -> Result<NoisePrediction<T>> {
    if (noisy.rows, noisy.cols) != (model.dims.horizon, model.traj_width()) {
        return Err(Error::Shape(format!(
            "trajectory is {}x{}, strategy {} expects {}x{}",
            noisy.rows,
            noisy.cols,
            model.tag(),
            model.dims.horizon,
            model.traj_width()
        )));
    }
    let obs = model.observe(params, &[window])?;
    let (values, _) = model.forward_train(params, &obs, noisy, &[t]);
    let source = if model.tag().two_denoisers() {
        NoiseSource::Blended
    } else {
        NoiseSource::Vision
    };
    Ok(NoisePrediction { values, source })
}

/// A training minibatch: observations, clean targets, timesteps and noise.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub obs: ObsBatch<T>,
    pub x0: Mat<T>,
    pub ts: Vec<usize>,
    pub eps: Mat<T>,
}

/// Denoising loss of the strategy on `batch`; accumulates gradients into
/// `grads` when given.
pub fn strategy_loss<T: Scalar>(
    model: &PolicyModel,
    params: &ParameterSet<T>,
    batch: &TrainBatch<T>,
    schedule: &DiffusionSchedule,
    grads: Option<&mut ParameterSet<T>>,
) -> Result<T> {
    if batch.x0.cols != model.traj_width() || batch.x0.rows != batch.ts.len() * model.dims.horizon {
        return Err(Error::Shape(format!(
            "batch target is {}x{}, strategy {} expects {} rows of width {}",
            batch.x0.rows,
            batch.x0.cols,
            model.tag(),
            batch.ts.len() * model.dims.horizon,
            model.traj_width()
        )));
    }
    training_loss(model, params, &batch.obs, &batch.x0, &batch.ts, &batch.eps, schedule, grads)
}
