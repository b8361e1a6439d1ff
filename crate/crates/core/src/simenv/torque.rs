//! Joint-torque synthesis: inertial load plus noise in free space, a
//! latent-dependent load signal plus smaller noise in contact.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Latent, MassClass, Phase, TaskId, WorldState, ACTION_DIM, JOINTS};

/// Maps commanded acceleration `(x, y, wrist)` to joint torques.
pub const JACOBIAN: [[f64; ACTION_DIM]; JOINTS] = [
    [1.0, 0.3, 0.0],
    [0.2, 1.0, 0.1],
    [0.5, 0.5, 0.2],
    [0.0, 0.3, 1.0],
];

const GRAVITY_LEVER: [f64; JOINTS] = [1.0, 0.8, 0.5, 0.3];
const TWIST_LEVER: [f64; JOINTS] = [0.3, 0.5, 0.8, 1.0];
const BUMP_PROFILE: [f64; JOINTS] = [0.8, 1.0, 0.4, 0.2];
const BUMP_MAGNITUDE: f64 = 2.0;

pub const LOAD_LIGHT: f64 = 1.6;
pub const LOAD_HEAVY: f64 = 3.2;

struct Ramp {
    base: f64,
    rise: f64,
    width: f64,
}

const TWIST_RAMP: Ramp = Ramp { base: 1.5, rise: 2.0, width: 0.4 };
const LID_RAMP: Ramp = Ramp { base: 1.3, rise: 1.5, width: 0.3 };

impl Ramp {
    fn at(&self, angle: f64, limit: f64) -> f64 {
        self.base + self.rise * (1.0 - (limit - angle) / self.width).clamp(0.0, 1.0)
    }
}

/// Standard deviation of contact noise: a tenth of the load gap on the
/// strongest joint.
pub fn contact_sigma(task: TaskId) -> f64 {
    match task {
        TaskId::WeighSort => 0.1 * (LOAD_HEAVY - LOAD_LIGHT),
        TaskId::TwistPull => 0.1 * TWIST_RAMP.rise,
        TaskId::LidOpen => 0.1 * LID_RAMP.rise,
    }
}

fn scaled(profile: &[f64; JOINTS], k: f64) -> [f64; JOINTS] {
    std::array::from_fn(|j| profile[j] * k)
}

/// Noise-free contact torque for the current state; zero out of contact.
pub fn contact_signal(s: &WorldState) -> [f64; JOINTS] {
    if !s.contact_flag && !s.bump {
        return [0.0; JOINTS];
    }
    if s.bump {
        return scaled(&BUMP_PROFILE, BUMP_MAGNITUDE);
    }
    match (s.task, s.latent) {
        (TaskId::WeighSort, Latent::Mass(m)) => {
            let load = if m == MassClass::Heavy { LOAD_HEAVY } else { LOAD_LIGHT };
            scaled(&GRAVITY_LEVER, load)
        }
        (TaskId::TwistPull, Latent::StopAngle(stop)) => scaled(&TWIST_LEVER, TWIST_RAMP.at(s.object.angle, stop)),
        (TaskId::LidOpen, Latent::UnlockAngle(c)) => {
            let r = if s.phase == Phase::Transport {
                LID_RAMP.base
            } else {
                LID_RAMP.at(s.object.angle, c)
            };
            scaled(&TWIST_LEVER, r)
        }
        _ => unreachable!("latent does not match task"),
    }
}

/// Draws one torque column. The noise stream advances by exactly `JOINTS`
/// normals per call regardless of contact, so rollouts that differ only in
/// latent stay aligned.
pub fn synthesize_torque(s: &mut WorldState, accel: &[f64; ACTION_DIM]) -> [f64; JOINTS] {
    let z: [f64; JOINTS] = std::array::from_fn(|_| s.rng.sample(StandardNormal));
    if s.contact_flag || s.bump {
        let sigma = contact_sigma(s.task) * s.config.contact_noise_scale;
        let sig = contact_signal(s);
        std::array::from_fn(|j| sig[j] + sigma * z[j])
    } else {
        let gain = s.config.inertial_gain;
        std::array::from_fn(|j| {
            let inertial: f64 = JACOBIAN[j].iter().zip(accel).map(|(a, b)| a * b).sum();
            gain * inertial + s.config.sigma_free * z[j]
        })
    }
}
