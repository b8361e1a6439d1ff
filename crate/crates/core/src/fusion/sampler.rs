//! Action sampling with a trained policy and per-step weight traces.

use crate::diffusion::{sample_loop, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::models::{Mat, ParameterSet};
use crate::rng::Rng;
use crate::simenv::{Action, ObservationWindow};

use super::model::{MixWeights, PolicyModel, SamplerTables};

/// One denoising step of one sampling call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub diffusion_t: usize,
    pub phi: bool,
    pub weights: MixWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Denormalized actions, first row executed first.
    pub actions: Vec<Action>,
    /// Full normalized sample including any auxiliary columns.
    pub joint: Mat<f32>,
    pub trace: Vec<TraceRow>,
}

/// A trained model bundled with its parameters and sampling tables.
pub struct Policy<'a> {
    pub model: &'a PolicyModel,
    pub params: &'a ParameterSet<f32>,
    pub schedule: &'a DiffusionSchedule,
    tables: SamplerTables<f32>,
}

impl<'a> Policy<'a> {
    pub fn new(model: &'a PolicyModel, params: &'a ParameterSet<f32>, schedule: &'a DiffusionSchedule) -> Self {
        let tables = model.sampler_tables(params, schedule.steps());
        Policy {
            model,
            params,
            schedule,
            tables,
        }
    }

    /// Samples one action chunk for `window`. With `keep_trace` every
    /// denoising step is recorded.
    pub fn sample(&self, window: &ObservationWindow, rng: &mut Rng, keep_trace: bool) -> Result<SampleOutput> {
        let m = self.model;
        let obs = m.observe(self.params, &[window])?;
        let cond = m.condition(self.params, &obs);
        let width = m.traj_width();
        let mut trace = Vec::new();
        let clip = m.sample_clip();
        let x = sample_loop(self.schedule, m.dims.horizon, width, Some(&clip), rng, |x, t| {
            if keep_trace {
                trace.push(TraceRow {
                    diffusion_t: t,
                    phi: cond.phi[0],
                    weights: cond.mix[0],
                });
            }
            Ok(m.predict_eps(self.params, &self.tables, &cond, x, t))
        })?;
        if !x.is_finite() {
            return Err(Error::Numerical("sampled trajectory is not finite".into()));
        }
        let scale = self.params.data(m.norm.act_scale);
        let actions = (0..x.rows)
            .map(|r| {
                let row = x.row(r);
                Action::new(std::array::from_fn(|k| {
                    (row[k].clamp(-1.0, 1.0) * scale[k]) as f64
                }))
            })
            .collect();
        Ok(SampleOutput { actions, joint: x, trace })
    }
}
