//! Closed-loop evaluation of controllers in the simulator.

use crate::diffusion::DiffusionSchedule;
use crate::error::Result;
use crate::fusion::{MixWeights, Policy, PolicyModel, TraceRow};
use crate::models::ParameterSet;
use crate::parallel::{map_indexed, Execution};
use crate::rng::{stream, stream_seed, Rng};
use crate::simenv::tasks::scripted_expert;
use crate::simenv::{env_reset, Action, EpisodeRecord, FailureReason, Latent, MassClass, ObservationWindow, TaskId, WorldState};

/// Actions to execute before replanning, plus any weight trace.
#[derive(Debug, Clone, Default)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub trace: Vec<TraceRow>,
}

/// Anything that can drive an episode. `state` is privileged and only the
/// scripted expert reads it.
pub trait Controller: Sync {
    fn name(&self) -> &str;
    fn plan(&self, state: &WorldState, obs: &ObservationWindow, rng: &mut Rng) -> Result<Plan>;
}

/// A trained diffusion policy executing the first `exec_steps` actions of
/// every sampled chunk.
pub struct PolicyController<'a> {
    pub policy: Policy<'a>,
    pub exec_steps: usize,
}

impl<'a> PolicyController<'a> {
    pub fn new(model: &'a PolicyModel, params: &'a ParameterSet<f32>, schedule: &'a DiffusionSchedule, exec_steps: usize) -> Self {
        PolicyController {
            policy: Policy::new(model, params, schedule),
            exec_steps,
        }
    }
}

impl Controller for PolicyController<'_> {
    fn name(&self) -> &str {
        self.policy.model.tag().as_str()
    }

    fn plan(&self, _state: &WorldState, obs: &ObservationWindow, rng: &mut Rng) -> Result<Plan> {
        let keep = self.policy.model.layout.mix.is_some();
        let mut out = self.policy.sample(obs, rng, keep)?;
        out.actions.truncate(self.exec_steps);
        Ok(Plan {
            actions: out.actions,
            trace: out.trace,
        })
    }
}

pub struct ExpertController;

impl Controller for ExpertController {
    fn name(&self) -> &str {
        "expert"
    }

    fn plan(&self, state: &WorldState, _obs: &ObservationWindow, _rng: &mut Rng) -> Result<Plan> {
        Ok(Plan {
            actions: vec![scripted_expert(state)],
            trace: Vec::new(),
        })
    }
}

pub struct ZeroController;

impl Controller for ZeroController {
    fn name(&self) -> &str {
        "zero"
    }

    fn plan(&self, _state: &WorldState, _obs: &ObservationWindow, _rng: &mut Rng) -> Result<Plan> {
        Ok(Plan {
            actions: vec![Action::zero()],
            trace: Vec::new(),
        })
    }
}

/// One trace row tagged with the environment step it was planned at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub env_step: usize,
    pub row: TraceRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub index: usize,
    /// Hidden condition label, e.g. `light`/`heavy` on WeighSort.
    pub condition: String,
    pub record: EpisodeRecord,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub strategy: String,
    pub task: TaskId,
    pub seed: u64,
    pub episodes: Vec<EvalEpisode>,
}

impl Evaluation {
    pub fn successes(&self) -> u64 {
        self.episodes.iter().filter(|e| e.record.success).count() as u64
    }

    pub fn trials(&self) -> u64 {
        self.episodes.len() as u64
    }
}

pub fn condition_label(latent: Latent) -> String {
    match latent {
        Latent::Mass(MassClass::Light) => "light".into(),
        Latent::Mass(MassClass::Heavy) => "heavy".into(),
        Latent::StopAngle(_) | Latent::UnlockAngle(_) => "all".into(),
    }
}

/// Rolls out `ctrl` from `env_reset(task, env_seed)` until termination.
pub fn run_episode(ctrl: &dyn Controller, task: TaskId, env_seed: u64, rng: &mut Rng) -> Result<(EpisodeRecord, Vec<TraceEntry>, Latent)> {
    let (mut state, mut obs) = env_reset(task, env_seed);
    let latent = state.latent;
    let mut rec = EpisodeRecord {
        observations: Vec::new(),
        actions: Vec::new(),
        contact_flags: Vec::new(),
        phases: Vec::new(),
        success: false,
        failure_reason: FailureReason::None,
        steps_used: 0,
        seed: env_seed,
    };
    let mut trace = Vec::new();
    while !state.done {
        let plan = ctrl.plan(&state, &obs, rng)?;
        let env_step = state.step_count;
        trace.extend(plan.trace.into_iter().map(|row| TraceEntry { env_step, row }));
        let actions = if plan.actions.is_empty() { vec![Action::zero()] } else { plan.actions };
        for a in actions {
            rec.observations.push(obs);
            rec.contact_flags.push(state.contact_flag);
            rec.phases.push(state.phase);
            obs = state.step(&a)?;
            rec.actions.push(a.clipped(&task.action_bounds()));
            if state.done {
                break;
            }
        }
    }
    rec.success = state.success;
    rec.failure_reason = state.failure;
    rec.steps_used = rec.actions.len();
    Ok((rec, trace, latent))
}

/// Evaluates `ctrl` on `n` episodes. Episode `i` uses its own environment
/// seed and sampling stream, so results do not depend on scheduling.
pub fn evaluate(ctrl: &dyn Controller, task: TaskId, n: usize, seed: u64, exec: Execution) -> Result<Evaluation> {
    let runs = map_indexed(exec, n, |i| -> Result<EvalEpisode> {
        let env_seed = stream_seed(seed, "eval.env", i as u64);
        let mut rng = stream(seed, "eval.sample", i as u64);
        let (record, trace, latent) = run_episode(ctrl, task, env_seed, &mut rng)?;
        Ok(EvalEpisode {
            index: i,
            condition: condition_label(latent),
            record,
            trace,
        })
    });
    Ok(Evaluation {
        strategy: ctrl.name().to_string(),
        task,
        seed,
        episodes: runs.into_iter().collect::<Result<_>>()?,
    })
}

/// The torque-side weight of a trace row: `w_torque` for guidance,
/// `w_tor` for routing.
pub fn torque_weight(w: &MixWeights) -> Option<f64> {
    match *w {
        MixWeights::None => None,
        MixWeights::Guidance { w_torque, .. } => Some(w_torque),
        MixWeights::Route { w_tor, .. } => Some(w_tor),
    }
}
