//! Behaviour-cloning training of a policy on a demonstration dataset.

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::diffusion::{gaussian, make_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::fusion::{strategy_loss, ModelDims, ObsBatch, PolicyModel, StrategyConfig, StrategyTag, TrainBatch};
use crate::models::{AdamW, Mat, ParameterSet};
use crate::parallel::{map_indexed, Execution};
use crate::rng::stream;
use crate::simenv::{Dataset, EpisodeRecord, TaskId, HISTORY};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskId,
    pub strategy: StrategyConfig,
    pub demos: usize,
    pub demo_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub horizon: usize,
    pub history: usize,
    pub c1: usize,
    pub c2: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Samples per gradient chunk; chunks are evaluated in parallel and
    /// summed in a fixed order.
    pub grad_chunk: usize,
    /// Actions executed from each sampled chunk before replanning.
    pub exec_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskId::WeighSort,
            strategy: StrategyConfig::new(StrategyTag::GatedCfg),
            demos: 200,
            demo_seed: 0,
            epochs: 100,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 1e-6,
            warmup_steps: 100,
            seed: 0,
            horizon: 8,
            history: HISTORY,
            c1: 16,
            c2: 32,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            grad_chunk: 16,
            exec_steps: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        let positive = [
            ("demos", self.demos),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("grad_chunk", self.grad_chunk),
            ("diffusion_steps", self.diffusion_steps),
            ("exec_steps", self.exec_steps),
            ("c1", self.c1),
            ("c2", self.c2),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be >= 1")));
            }
        }
        if self.horizon < 2 || !self.horizon.is_multiple_of(2) {
            return Err(Error::Invalid(format!("horizon must be even and >= 2, got {}", self.horizon)));
        }
        if self.exec_steps > self.horizon {
            return Err(Error::Invalid("exec_steps cannot exceed horizon".into()));
        }
        if self.history != HISTORY {
            return Err(Error::Invalid(format!("history is fixed at {HISTORY} by the simulator")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("lr must be > 0 and weight_decay >= 0".into()));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            horizon: self.horizon,
            history: self.history,
            c1: self.c1,
            c2: self.c2,
            ..ModelDims::default()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Canonical text form; hashed for provenance.
    pub fn canonical(&self) -> String {
        let s = &self.strategy;
        format!(
            "task={}\nstrategy={}\ngate_threshold={:?}\nalpha={:?}\nmax_guidance={:?}\n\
             demos={}\ndemo_seed={}\nepochs={}\nbatch_size={}\nlr={:?}\nweight_decay={:?}\nwarmup_steps={}\n\
             seed={}\nhorizon={}\nhistory={}\nc1={}\nc2={}\ndiffusion_steps={}\nbeta_start={:?}\nbeta_end={:?}\n\
             grad_chunk={}\nexec_steps={}\n",
            self.task,
            s.tag,
            s.gate_threshold,
            s.alpha,
            s.max_guidance,
            self.demos,
            self.demo_seed,
            self.epochs,
            self.batch_size,
            self.lr,
            self.weight_decay,
            self.warmup_steps,
            self.seed,
            self.horizon,
            self.history,
            self.c1,
            self.c2,
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.grad_chunk,
            self.exec_steps,
        )
    }

    pub fn hash(&self) -> u64 {
        config_hash(&self.canonical())
    }
}

/// First eight bytes of the SHA-256 digest of `text`.
pub fn config_hash(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// Per-dimension mean and standard deviation with a floor on the latter.
fn moments(values: impl Iterator<Item = (usize, f64)>, dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = vec![0usize; dims];
    let mut s = vec![0.0; dims];
    let mut s2 = vec![0.0; dims];
    for (k, v) in values {
        n[k] += 1;
        s[k] += v;
        s2[k] += v * v;
    }
    let mean: Vec<f64> = (0..dims).map(|k| if n[k] > 0 { s[k] / n[k] as f64 } else { 0.0 }).collect();
    let std = (0..dims)
        .map(|k| {
            if n[k] == 0 {
                return 1.0;
            }
            let var = (s2[k] / n[k] as f64 - mean[k] * mean[k]).max(0.0);
            let sd = var.sqrt();
            if sd < 1e-6 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

fn set(p: &mut ParameterSet<f32>, id: usize, v: &[f64]) {
    for (d, s) in p.data_mut(id).iter_mut().zip(v) {
        *d = *s as f32;
    }
}

/// Fits the normalization buffers of `model` to the dataset.
pub fn fit_normalizer(model: &PolicyModel, p: &mut ParameterSet<f32>, ds: &Dataset) {
    let d = model.dims;
    let obs = || ds.episodes.iter().flat_map(|e| e.observations.iter());
    let (m, s) = moments(
        obs().flat_map(|o| o.visual.iter().enumerate().map(|(k, v)| (k, *v as f64))),
        d.visual,
    );
    set(p, model.norm.vis_mean, &m);
    set(p, model.norm.vis_std, &s);
    let (m, s) = moments(
        obs().flat_map(|o| o.proprio.iter().enumerate().map(|(k, v)| (k, *v as f64))),
        d.joints,
    );
    set(p, model.norm.prop_mean, &m);
    set(p, model.norm.prop_std, &s);
    let h = d.history;
    let (m, s) = moments(
        obs().flat_map(|o| o.torque_history.data.iter().enumerate().map(move |(k, v)| (k / h, *v as f64))),
        d.joints,
    );
    set(p, model.norm.tor_mean, &m);
    set(p, model.norm.tor_std, &s);
    let (m, s) = moments(
        obs().flat_map(|o| (0..d.joints).map(move |j| (j, o.torque_history.data[j * h + h - 1] as f64))),
        d.joints,
    );
    set(p, model.norm.ftor_mean, &m);
    set(p, model.norm.ftor_std, &s);
    set(p, model.norm.act_scale, &ds.task.action_bounds());
}

/// Normalized `(observations, targets)` for every step of every episode.
pub fn training_samples(model: &PolicyModel, p: &ParameterSet<f32>, ds: &Dataset) -> Result<(ObsBatch<f32>, Mat<f32>)> {
    let windows: Vec<_> = ds.episodes.iter().flat_map(|e| e.observations.iter()).collect();
    let obs = model.observe(p, &windows)?;
    let d = model.dims;
    let width = model.traj_width();
    let mut x0 = Mat::zeros(windows.len() * d.horizon, width);
    let scale = p.data(model.norm.act_scale);
    let (fm, fs) = (p.data(model.norm.ftor_mean), p.data(model.norm.ftor_std));
    let mut row = 0;
    for ep in &ds.episodes {
        let n = ep.steps_used;
        for i in 0..n {
            for k in 0..d.horizon {
                let out = x0.row_mut(row);
                row += 1;
                // Past the end of the demonstration the expert holds still.
                if i + k < n {
                    for a in 0..d.action {
                        out[a] = ep.actions[i + k].delta[a] as f32 / scale[a];
                    }
                }
                if width > d.action {
                    let col = future_torque(ep, i + k + 1, d.joints, d.history);
                    for j in 0..d.joints {
                        out[d.action + j] = (col[j] - fm[j]) / fs[j];
                    }
                }
            }
        }
    }
    Ok((obs, x0))
}

/// Latest torque column observed at step `idx`, clamped to the episode.
fn future_torque(ep: &EpisodeRecord, idx: usize, joints: usize, history: usize) -> Vec<f32> {
    let o = &ep.observations[idx.min(ep.steps_used - 1)];
    (0..joints).map(|j| o.torque_history.data[j * history + history - 1]).collect()
}

fn gather(obs: &ObsBatch<f32>, x0: &Mat<f32>, idx: &[usize], horizon: usize) -> (ObsBatch<f32>, Mat<f32>) {
    let pick = |m: &Mat<f32>, rows_per: usize| -> Mat<f32> {
        let mut out = Mat::zeros(idx.len() * rows_per, m.cols);
        for (b, &i) in idx.iter().enumerate() {
            let src = &m.data[i * rows_per * m.cols..(i + 1) * rows_per * m.cols];
            out.data[b * rows_per * m.cols..(b + 1) * rows_per * m.cols].copy_from_slice(src);
        }
        out
    };
    (
        ObsBatch {
            vis: pick(&obs.vis, 1),
            tor: pick(&obs.tor, 1),
            prop: pick(&obs.prop, 1),
            phi: idx.iter().map(|&i| obs.phi[i]).collect(),
        },
        pick(x0, horizon),
    )
}

/// Linear warm-up followed by cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub params: ParameterSet<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains a fresh model on `ds`. Deterministic in `config` regardless of
/// the execution mode.
pub fn train(config: &TrainConfig, ds: &Dataset, exec: Execution) -> Result<TrainOutcome> {
    config.validate()?;
    if ds.task != config.task {
        return Err(Error::TaskMismatch {
            expected: config.task.to_string(),
            found: ds.task.to_string(),
        });
    }
    if ds.episodes.is_empty() {
        return Err(Error::Invalid("dataset has no episodes".into()));
    }
    let sched = config.schedule()?;
    let mut init_rng = stream(config.seed, "init", 0);
    let (model, mut params) = PolicyModel::new::<f32>(config.strategy, config.dims(), &mut init_rng);
    fit_normalizer(&model, &mut params, ds);
    let (obs, x0) = training_samples(&model, &params, ds)?;
    let n = obs.len();
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = steps_per_epoch * config.epochs;
    let mut opt = AdamW::new(&params, config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    let horizon = model.dims.horizon;
    let width = model.traj_width();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut shuffle = stream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut shuffle);
        let mut noise = stream(config.seed, "train.noise", epoch as u64);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(batch) {
            let (b_obs, b_x0) = gather(&obs, &x0, idx, horizon);
            let ts: Vec<usize> = idx.iter().map(|_| noise.gen_range(0..sched.steps())).collect();
            let eps = gaussian(&mut noise, idx.len() * horizon, width);
            let tb = TrainBatch { obs: b_obs, x0: b_x0, ts, eps };
            let (loss, grads) = batch_gradient(&model, &params, &tb, &sched, config.grad_chunk, exec)?;
            opt.lr = learning_rate(config.lr, step, config.warmup_steps, total);
            opt.step(&mut params, &grads)?;
            epoch_loss += loss * idx.len() as f64;
            step += 1;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("loss became non-finite in epoch {}", epoch + 1)));
        }
        losses.push(mean);
    }
    Ok(TrainOutcome { model, params, losses })
}

/// Mean loss and gradient over `batch`, computed in fixed-size chunks.
pub fn batch_gradient(
    model: &PolicyModel,
    params: &ParameterSet<f32>,
    batch: &TrainBatch<f32>,
    sched: &DiffusionSchedule,
    chunk: usize,
    exec: Execution,
) -> Result<(f64, ParameterSet<f32>)> {
    let n = batch.ts.len();
    let chunks = n.div_ceil(chunk);
    let horizon = model.dims.horizon;
    let parts = map_indexed(exec, chunks, |c| -> Result<(f64, ParameterSet<f32>)> {
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let (obs, x0) = gather(&batch.obs, &batch.x0, &idx, horizon);
        let (_, eps) = gather(&batch.obs, &batch.eps, &idx, horizon);
        let sub = TrainBatch {
            obs,
            x0,
            ts: batch.ts[lo..hi].to_vec(),
            eps,
        };
        let mut g = params.zeros_like();
        let loss = strategy_loss(model, params, &sub, sched, Some(&mut g))?;
        let w = (hi - lo) as f32 / n as f32;
        g.scale(w);
        Ok((loss as f64 * w as f64, g))
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.accumulate(&g);
    }
    Ok((loss, total))
}
