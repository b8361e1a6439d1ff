//! DDPM machinery: variance schedule, forward noising, ε-parameterised
//! reverse steps, the denoising loss and the ancestral sampling loop.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{Mat, ParameterSet, Scalar};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Invalid("diffusion schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Invalid(format!("beta must lie in (0, 1), got {b}")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("diffusion steps must be >= 1".into()));
    }
    let beta = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Clean,
    Noisy { t: usize },
}

/// `P × A` block of future actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrajectory<T> {
    pub values: Mat<T>,
    pub kind: TrajectoryKind,
}

fn check_t(s: &DiffusionSchedule, t: usize) -> Result<()> {
    if t >= s.steps() {
        return Err(Error::Invalid(format!("timestep {t} outside [0, {})", s.steps())));
    }
    Ok(())
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · ε` with a single timestep for the whole block.
pub fn q_sample<T: Scalar>(x0: &Mat<T>, t: usize, eps: &Mat<T>, s: &DiffusionSchedule) -> Result<Mat<T>> {
    check_t(s, t)?;
    if (x0.rows, x0.cols) != (eps.rows, eps.cols) {
        return Err(Error::Shape("noise shape differs from trajectory".into()));
    }
    Ok(q_sample_rows(x0, &[t], eps, s, x0.rows))
}

/// Batched forward noising: rows `[b·len, (b+1)·len)` use timestep `ts[b]`.
pub fn q_sample_rows<T: Scalar>(
    x0: &Mat<T>,
    ts: &[usize],
    eps: &Mat<T>,
    s: &DiffusionSchedule,
    len: usize,
) -> Mat<T> {
    assert_eq!(x0.rows, ts.len() * len);
    let mut out = Mat::zeros(x0.rows, x0.cols);
    let w = x0.cols;
    for (b, &t) in ts.iter().enumerate() {
        let ca = T::from_f64c(s.alpha_bar[t].sqrt());
        let cn = T::from_f64c((1.0 - s.alpha_bar[t]).sqrt());
        let lo = b * len * w;
        let hi = lo + len * w;
        for i in lo..hi {
            out.data[i] = ca * x0.data[i] + cn * eps.data[i];
        }
    }
    out
}

pub fn gaussian<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Mat<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64c(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Posterior mean `(x_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`, plus `√β_t · z` for t > 0.
pub fn reverse_step_with<T: Scalar>(
    x_t: &Mat<T>,
    eps_hat: &Mat<T>,
    t: usize,
    s: &DiffusionSchedule,
    z: Option<&Mat<T>>,
) -> Result<Mat<T>> {
    check_t(s, t)?;
    if (x_t.rows, x_t.cols) != (eps_hat.rows, eps_hat.cols) {
        return Err(Error::Shape("noise prediction shape differs from trajectory".into()));
    }
    let c_eps = T::from_f64c(s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt());
    let inv_sqrt_a = T::from_f64c(1.0 / s.alpha[t].sqrt());
    let sigma = T::from_f64c(s.beta[t].sqrt());
    let mut out = Mat::zeros(x_t.rows, x_t.cols);
    for i in 0..out.data.len() {
        out.data[i] = (x_t.data[i] - c_eps * eps_hat.data[i]) * inv_sqrt_a;
    }
    if t > 0 {
        let z = z.ok_or_else(|| Error::Invalid("reverse step at t > 0 needs noise".into()))?;
        for (o, &zi) in out.data.iter_mut().zip(&z.data) {
            *o += sigma * zi;
        }
    }
    Ok(out)
}

pub fn reverse_step<T: Scalar>(
    x_t: &Mat<T>,
    eps_hat: &Mat<T>,
    t: usize,
    s: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Mat<T>> {
    if t == 0 {
        reverse_step_with(x_t, eps_hat, t, s, None)
    } else {
        let z = gaussian(rng, x_t.rows, x_t.cols);
        reverse_step_with(x_t, eps_hat, t, s, Some(&z))
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`. `predict` returns
/// ε̂ for the current sample at timestep `t`.
pub fn sample_loop<T: Scalar>(
    s: &DiffusionSchedule,
    rows: usize,
    cols: usize,
    clip: Option<&[T]>,
    rng: &mut Rng,
    mut predict: impl FnMut(&Mat<T>, usize) -> Result<Mat<T>>,
) -> Result<Mat<T>> {
    if let Some(c) = clip {
        if c.len() != cols {
            return Err(Error::Shape(format!("{} clip bounds for {cols} columns", c.len())));
        }
    }
    let mut x = gaussian(rng, rows, cols);
    for t in (0..s.steps()).rev() {
        let eps_hat = predict(&x, t)?;
        if !eps_hat.is_finite() {
            return Err(Error::Numerical(format!("non-finite noise prediction at t={t}")));
        }
        let z = (t > 0).then(|| gaussian(rng, rows, cols));
        x = match clip {
            Some(c) => reverse_step_clipped(&x, &eps_hat, t, s, z.as_ref(), c)?,
            None => reverse_step_with(&x, &eps_hat, t, s, z.as_ref())?,
        };
    }
    Ok(x)
}

/// Reverse step through the clean-sample estimate, with each column of that
/// estimate clamped to `±clip[col]`. Without active clamping this equals
/// [`reverse_step_with`].
pub fn reverse_step_clipped<T: Scalar>(
    x_t: &Mat<T>,
    eps_hat: &Mat<T>,
    t: usize,
    s: &DiffusionSchedule,
    z: Option<&Mat<T>>,
    clip: &[T],
) -> Result<Mat<T>> {
    check_t(s, t)?;
    if (x_t.rows, x_t.cols) != (eps_hat.rows, eps_hat.cols) || clip.len() != x_t.cols {
        return Err(Error::Shape("reverse step operands differ in shape".into()));
    }
    let ab = s.alpha_bar[t];
    let ab_prev = if t == 0 { 1.0 } else { s.alpha_bar[t - 1] };
    let inv_sqrt_ab = T::from_f64c(1.0 / ab.sqrt());
    let sqrt_1m_ab = T::from_f64c((1.0 - ab).sqrt());
    let c0 = T::from_f64c(ab_prev.sqrt() * s.beta[t] / (1.0 - ab));
    let ct = T::from_f64c(s.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let sigma = T::from_f64c(s.beta[t].sqrt());
    let mut out = Mat::zeros(x_t.rows, x_t.cols);
    for r in 0..x_t.rows {
        for c in 0..x_t.cols {
            let i = r * x_t.cols + c;
            let x0 = ((x_t.data[i] - sqrt_1m_ab * eps_hat.data[i]) * inv_sqrt_ab).max(-clip[c]).min(clip[c]);
            out.data[i] = c0 * x0 + ct * x_t.data[i];
        }
    }
    if t > 0 {
        let z = z.ok_or_else(|| Error::Invalid("reverse step at t > 0 needs noise".into()))?;
        for (o, &zi) in out.data.iter_mut().zip(&z.data) {
            *o += sigma * zi;
        }
    }
    Ok(out)
}

/// Column split of the denoised target: leading action columns and optional
/// trailing auxiliary columns weighted by `aux_weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLayout {
    pub action_cols: usize,
    pub aux_cols: usize,
    pub aux_weight: f64,
}

impl LossLayout {
    pub fn actions_only(action_cols: usize) -> Self {
        LossLayout {
            action_cols,
            aux_cols: 0,
            aux_weight: 0.0,
        }
    }
}

/// `MSE(action cols) + aux_weight · MSE(aux cols)` and its gradient.
pub fn weighted_mse<T: Scalar>(pred: &Mat<T>, target: &Mat<T>, layout: LossLayout) -> (T, Mat<T>) {
    assert_eq!(pred.cols, layout.action_cols + layout.aux_cols);
    assert_eq!((pred.rows, pred.cols), (target.rows, target.cols));
    let rows = pred.rows as f64;
    let wa = T::from_f64c(1.0 / (rows * layout.action_cols as f64));
    let wx = if layout.aux_cols > 0 {
        T::from_f64c(layout.aux_weight / (rows * layout.aux_cols as f64))
    } else {
        T::zero()
    };
    let two = T::from_f64c(2.0);
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let (mut la, mut lx) = (T::zero(), T::zero());
    for r in 0..pred.rows {
        for c in 0..pred.cols {
            let i = r * pred.cols + c;
            let d = pred.data[i] - target.data[i];
            if c < layout.action_cols {
                la += d * d;
                grad.data[i] = two * wa * d;
            } else {
                lx += d * d;
                grad.data[i] = two * wx * d;
            }
        }
    }
    (la * wa + lx * wx, grad)
}

/// A noise-prediction network usable by [`training_loss`].
pub trait EpsModel<T: Scalar> {
    type Obs;
    type Cache;

    fn layout(&self) -> LossLayout;

    /// Predicts ε for `x_t`; rows are grouped per sample, one timestep each.
    fn forward(&self, p: &ParameterSet<T>, obs: &Self::Obs, x_t: &Mat<T>, ts: &[usize]) -> (Mat<T>, Self::Cache);

    /// Accumulates parameter gradients for `d_eps = ∂L/∂ε̂`.
    fn backward(
        &self,
        p: &ParameterSet<T>,
        obs: &Self::Obs,
        cache: Self::Cache,
        d_eps: &Mat<T>,
        grads: &mut ParameterSet<T>,
    );
}

/// Denoising loss for clean targets `x0` noised with `eps` at `ts`. Gradients
/// are accumulated into `grads` when given.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Scalar, M: EpsModel<T>>(
    model: &M,
    p: &ParameterSet<T>,
    obs: &M::Obs,
    x0: &Mat<T>,
    ts: &[usize],
    eps: &Mat<T>,
    s: &DiffusionSchedule,
    grads: Option<&mut ParameterSet<T>>,
) -> Result<T> {
    if ts.is_empty() || !x0.rows.is_multiple_of(ts.len()) {
        return Err(Error::Shape("trajectory rows must split evenly across the batch".into()));
    }
    if let Some(&t) = ts.iter().find(|&&t| t >= s.steps()) {
        return Err(Error::Invalid(format!("timestep {t} outside schedule")));
    }
    let len = x0.rows / ts.len();
    let x_t = q_sample_rows(x0, ts, eps, s, len);
    let (eps_hat, cache) = model.forward(p, obs, &x_t, ts);
    let (loss, d_eps) = weighted_mse(&eps_hat, eps, model.layout());
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite training loss".into()));
    }
    if let Some(g) = grads {
        model.backward(p, obs, cache, &d_eps, g);
    }
    Ok(loss)
}
