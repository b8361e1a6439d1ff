//! Deterministic synthetic manipulation tasks whose hidden latent is only
//! observable through joint torques once contact is made.
//!
//! Three tasks share one world model: a planar agent with a wrist and a
//! gripper, one object, and a task-specific latent. The visual channel and
//! proprioception never carry the latent; contact torques do.

pub mod dataset;
pub mod tasks;
mod torque;

pub use dataset::{generate_demos, read_dataset, write_dataset, Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use tasks::scripted_expert;
pub use torque::{contact_signal, synthesize_torque, JACOBIAN};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use rand::Rng as _;

pub const JOINTS: usize = 4;
pub const HISTORY: usize = 10;
pub const ACTION_DIM: usize = 3;
pub const VISUAL_DIM: usize = 8;
pub const HORIZON_CAP: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    WeighSort,
    TwistPull,
    LidOpen,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::WeighSort, TaskId::TwistPull, TaskId::LidOpen];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::WeighSort => "weigh_sort",
            TaskId::TwistPull => "twist_pull",
            TaskId::LidOpen => "lid_open",
        }
    }

    /// Column heading used in reports.
    pub fn title(self) -> &'static str {
        match self {
            TaskId::WeighSort => "WeighSort",
            TaskId::TwistPull => "TwistPull",
            TaskId::LidOpen => "LidOpen",
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<TaskId> {
        TaskId::ALL.get(code as usize).copied()
    }

    /// Per-dimension bounds on the action delta.
    pub fn action_bounds(self) -> [f64; ACTION_DIM] {
        match self {
            TaskId::WeighSort => [0.06, 0.06, 0.25],
            TaskId::TwistPull | TaskId::LidOpen => [0.06, 0.06, 0.08],
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        match norm.as_str() {
            "weighsort" => Ok(TaskId::WeighSort),
            "twistpull" => Ok(TaskId::TwistPull),
            "lidopen" => Ok(TaskId::LidOpen),
            _ => Err(Error::Invalid(format!(
                "unknown task '{s}' (expected one of weigh_sort, twist_pull, lid_open)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Approach,
    Engage,
    ContactWork,
    Transport,
}

impl Phase {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Phase> {
        [Phase::Approach, Phase::Engage, Phase::ContactWork, Phase::Transport]
            .get(c as usize)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    None,
    Timeout,
    Abort,
}

impl FailureReason {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<FailureReason> {
        [FailureReason::None, FailureReason::Timeout, FailureReason::Abort]
            .get(c as usize)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MassClass {
    Light,
    Heavy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latent {
    Mass(MassClass),
    /// Rotation limit of the connector, radians.
    StopAngle(f64),
    /// Twist needed before the lid unlocks, radians.
    UnlockAngle(f64),
}

/// Noise and dynamics knobs. Defaults are the benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// Per-joint standard deviation of free-space torque noise.
    pub sigma_free: f64,
    /// Multiplier on the task's contact-noise standard deviation.
    pub contact_noise_scale: f64,
    /// Gain on the inertial torque produced by commanded acceleration.
    pub inertial_gain: f64,
    pub horizon_cap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            sigma_free: 0.45,
            contact_noise_scale: 1.0,
            inertial_gain: 5.5,
            horizon_cap: HORIZON_CAP,
        }
    }
}

impl EnvConfig {
    pub fn noiseless() -> Self {
        EnvConfig {
            sigma_free: 0.0,
            contact_noise_scale: 0.0,
            ..EnvConfig::default()
        }
    }
}

/// `D × H` torque matrix, row-major by joint, most recent sample last.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueHistory {
    pub data: Vec<f32>,
}

impl TorqueHistory {
    pub fn zeros() -> Self {
        TorqueHistory {
            data: vec![0.0; JOINTS * HISTORY],
        }
    }

    pub fn at(&self, joint: usize, step: usize) -> f32 {
        self.data[joint * HISTORY + step]
    }

    /// Most recent column.
    pub fn latest(&self) -> [f32; JOINTS] {
        std::array::from_fn(|j| self.at(j, HISTORY - 1))
    }

    /// Drops the oldest column and appends `col`.
    pub fn push(&mut self, col: &[f64; JOINTS]) {
        for (j, &v) in col.iter().enumerate() {
            let row = &mut self.data[j * HISTORY..(j + 1) * HISTORY];
            row.rotate_left(1);
            row[HISTORY - 1] = v as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub visual: Vec<f32>,
    pub torque_history: TorqueHistory,
    pub proprio: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub delta: [f64; ACTION_DIM],
}

impl Action {
    pub fn new(delta: [f64; ACTION_DIM]) -> Self {
        Action { delta }
    }

    pub fn zero() -> Self {
        Action { delta: [0.0; ACTION_DIM] }
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite())
    }

    pub fn clipped(&self, bounds: &[f64; ACTION_DIM]) -> Action {
        Action {
            delta: std::array::from_fn(|i| self.delta[i].clamp(-bounds[i], bounds[i])),
        }
    }
}

/// Object state shared by all tasks; fields a task does not use stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectState {
    pub pos: [f64; 2],
    /// Connector or lid rotation.
    pub angle: f64,
    /// Axial displacement (pull distance or lid lift).
    pub lift: f64,
    /// Bottle held in the gripper, or knob engaged by the wrist.
    pub attached: bool,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub task: TaskId,
    /// `(x, y, wrist angle, gripper closure)`.
    pub agent: [f64; 4],
    pub object: ObjectState,
    pub phase: Phase,
    pub latent: Latent,
    pub contact_flag: bool,
    pub step_count: usize,
    pub done: bool,
    pub success: bool,
    pub failure: FailureReason,
    pub config: EnvConfig,
    /// Applied velocity of the previous step, for the inertial torque term.
    pub prev_velocity: [f64; ACTION_DIM],
    /// A brushing contact on this step that did not lead to a grasp.
    pub bump: bool,
    pub torque: TorqueHistory,
    pub rng: Rng,
}

impl WorldState {
    /// Same state with a different latent; used to compare counterfactual
    /// rollouts.
    pub fn with_latent(&self, latent: Latent) -> WorldState {
        let mut s = self.clone();
        s.latent = latent;
        s
    }

    pub fn observe(&self) -> ObservationWindow {
        let a = &self.agent;
        let o = &self.object;
        let mut visual = vec![0.0f32; VISUAL_DIM];
        let fields: &[f64] = match self.task {
            TaskId::WeighSort => &[a[0], a[1], a[3], o.pos[0], o.pos[1]],
            TaskId::TwistPull | TaskId::LidOpen => &[a[0], a[1], o.pos[0], o.pos[1], o.lift],
        };
        for (v, f) in visual.iter_mut().zip(fields) {
            *v = *f as f32;
        }
        ObservationWindow {
            visual,
            torque_history: self.torque.clone(),
            proprio: a.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Applies one action; a non-finite action is rejected without touching
    /// the state.
    pub fn step(&mut self, action: &Action) -> Result<ObservationWindow> {
        if !action.is_finite() {
            return Err(Error::Invalid(format!("non-finite action {:?}", action.delta)));
        }
        if self.done {
            return Err(Error::Invalid("step called on a finished episode".into()));
        }
        let a = action.clipped(&self.task.action_bounds());
        self.bump = false;
        let velocity = tasks::advance(self, &a);
        self.step_count += 1;
        let accel: [f64; ACTION_DIM] = std::array::from_fn(|i| velocity[i] - self.prev_velocity[i]);
        self.prev_velocity = velocity;
        let tau = synthesize_torque(self, &accel);
        self.torque.push(&tau);
        if !self.done && self.step_count >= self.config.horizon_cap {
            self.done = true;
            self.failure = FailureReason::Timeout;
        }
        Ok(self.observe())
    }
}

pub fn env_reset(task: TaskId, seed: u64) -> (WorldState, ObservationWindow) {
    env_reset_with(task, seed, EnvConfig::default())
}

pub fn env_reset_with(task: TaskId, seed: u64, config: EnvConfig) -> (WorldState, ObservationWindow) {
    let mut init = stream(seed, "env.init", task.code() as u64);
    let mut lat = stream(seed, "env.latent", task.code() as u64);
    let rng = stream(seed, "env.noise", task.code() as u64);
    let (agent, object, latent) = match task {
        TaskId::WeighSort => {
            let agent = [init.gen_range(-0.4..0.4), init.gen_range(-0.95..-0.75), 0.0, 0.0];
            let pos = [init.gen_range(-0.3..0.3), init.gen_range(-0.45..-0.15)];
            let class = if lat.gen_bool(0.5) { MassClass::Heavy } else { MassClass::Light };
            (agent, ObjectState { pos, ..Default::default() }, Latent::Mass(class))
        }
        TaskId::TwistPull | TaskId::LidOpen => {
            let pos = [init.gen_range(-0.4..0.4), init.gen_range(0.0..0.4)];
            let agent = [init.gen_range(-0.8..0.8), init.gen_range(-0.9..-0.6), 0.0, 0.0];
            let latent = if task == TaskId::TwistPull {
                Latent::StopAngle(lat.gen_range(0.6..1.8))
            } else {
                Latent::UnlockAngle(lat.gen_range(0.5..1.3))
            };
            (agent, ObjectState { pos, ..Default::default() }, latent)
        }
    };
    let mut state = WorldState {
        task,
        agent,
        object,
        phase: Phase::Approach,
        latent,
        contact_flag: false,
        step_count: 0,
        done: false,
        success: false,
        failure: FailureReason::None,
        config,
        prev_velocity: [0.0; ACTION_DIM],
        bump: false,
        torque: TorqueHistory::zeros(),
        rng,
    };
    for _ in 0..HISTORY {
        let tau = synthesize_torque(&mut state, &[0.0; ACTION_DIM]);
        state.torque.push(&tau);
    }
    let obs = state.observe();
    (state, obs)
}

/// Functional form of [`WorldState::step`]: returns
/// `(next state, observation, done, success)`.
pub fn env_step(state: &WorldState, action: &Action) -> Result<(WorldState, ObservationWindow, bool, bool)> {
    let mut next = state.clone();
    let obs = next.step(action)?;
    let (done, success) = (next.done, next.success);
    Ok((next, obs, done, success))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub observations: Vec<ObservationWindow>,
    pub actions: Vec<Action>,
    pub contact_flags: Vec<bool>,
    pub phases: Vec<Phase>,
    pub success: bool,
    pub failure_reason: FailureReason,
    pub steps_used: usize,
    pub seed: u64,
}

/// Runs the scripted expert from `env_reset(task, seed)` to termination.
pub fn expert_episode(task: TaskId, seed: u64) -> Result<EpisodeRecord> {
    let (mut state, mut obs) = env_reset(task, seed);
    let mut rec = EpisodeRecord {
        observations: Vec::new(),
        actions: Vec::new(),
        contact_flags: Vec::new(),
        phases: Vec::new(),
        success: false,
        failure_reason: FailureReason::None,
        steps_used: 0,
        seed,
    };
    while !state.done {
        let action = scripted_expert(&state);
        rec.observations.push(obs);
        rec.contact_flags.push(state.contact_flag);
        rec.phases.push(state.phase);
        obs = state.step(&action)?;
        rec.actions.push(action.clipped(&task.action_bounds()));
    }
    rec.success = state.success;
    rec.failure_reason = state.failure;
    rec.steps_used = rec.actions.len();
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in TaskId::ALL {
            assert_eq!(t.as_str().parse::<TaskId>().unwrap(), t);
            assert_eq!(TaskId::from_code(t.code()), Some(t));
        }
        assert!("WeighSort".parse::<TaskId>().is_ok());
        assert!("stack_cups".parse::<TaskId>().is_err());
    }

    #[test]
    fn history_push_shifts_left() {
        let mut h = TorqueHistory::zeros();
        h.push(&[1.0, 2.0, 3.0, 4.0]);
        h.push(&[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(h.latest(), [5.0, 6.0, 7.0, 8.0]);
        assert_eq!(h.at(0, HISTORY - 2), 1.0);
        assert_eq!(h.at(3, 0), 0.0);
    }

    #[test]
    fn reset_is_deterministic() {
        let (s1, o1) = env_reset(TaskId::WeighSort, 7);
        let (s2, o2) = env_reset(TaskId::WeighSort, 7);
        assert_eq!(o1, o2);
        assert_eq!(s1.agent, s2.agent);
        assert_eq!(s1.latent, s2.latent);
    }

    #[test]
    fn twist_pull_starts_before_contact() {
        let (s, _) = env_reset(TaskId::TwistPull, 0);
        assert!(!s.contact_flag);
        assert_eq!(s.phase, Phase::Approach);
    }

    #[test]
    fn zero_action_keeps_pose() {
        for task in TaskId::ALL {
            let (s, _) = env_reset(task, 3);
            let (n, _, done, _) = env_step(&s, &Action::zero()).unwrap();
            assert_eq!(n.agent, s.agent);
            assert!(!done);
        }
    }

    #[test]
    fn non_finite_action_rejected() {
        let (s, _) = env_reset(TaskId::LidOpen, 1);
        let err = env_step(&s, &Action::new([f64::NAN, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn timeout_at_horizon_cap() {
        let (mut s, _) = env_reset(TaskId::TwistPull, 2);
        for _ in 0..HORIZON_CAP {
            s.step(&Action::zero()).unwrap();
        }
        assert!(s.done && !s.success);
        assert_eq!(s.failure, FailureReason::Timeout);
        assert_eq!(s.step_count, HORIZON_CAP);
    }
}
