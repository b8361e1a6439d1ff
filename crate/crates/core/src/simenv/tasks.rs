//! Per-task transition rules and the privileged scripted expert.

use super::{Action, FailureReason, Latent, MassClass, Phase, TaskId, WorldState, ACTION_DIM};

const WORKSPACE: f64 = 1.0;

pub const PLATE_LIGHT: [f64; 2] = [-0.6, 0.6];
pub const PLATE_HEAVY: [f64; 2] = [0.6, 0.6];
pub const PLATE_RADIUS: f64 = 0.12;
pub const GRASP_RADIUS: f64 = 0.05;
pub const FUMBLE_RADIUS: f64 = 0.15;

pub const ENGAGE_RADIUS: f64 = 0.04;
pub const LID_FUMBLE_RADIUS: f64 = 0.12;
pub const PULL_TOLERANCE: f64 = 0.1;
pub const SLIP_BAND: f64 = 0.35;
pub const RETRACT: f64 = 0.08;
pub const PULL_MIN: f64 = 0.02;
pub const TWIST_MIN: f64 = 0.02;
pub const EXTRACT_DISTANCE: f64 = 0.24;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn agent_xy(s: &WorldState) -> [f64; 2] {
    [s.agent[0], s.agent[1]]
}

/// Translates the agent within the workspace and returns the applied motion.
fn translate(s: &mut WorldState, dx: f64, dy: f64) -> [f64; 2] {
    let (x0, y0) = (s.agent[0], s.agent[1]);
    s.agent[0] = (x0 + dx).clamp(-WORKSPACE, WORKSPACE);
    s.agent[1] = (y0 + dy).clamp(-WORKSPACE, WORKSPACE);
    [s.agent[0] - x0, s.agent[1] - y0]
}

pub fn correct_plate(latent: Latent) -> [f64; 2] {
    match latent {
        Latent::Mass(MassClass::Heavy) => PLATE_HEAVY,
        _ => PLATE_LIGHT,
    }
}

fn finish(s: &mut WorldState, success: bool) {
    s.done = true;
    s.success = success;
    s.failure = if success { FailureReason::None } else { FailureReason::Abort };
}

fn limit(s: &WorldState) -> f64 {
    match s.latent {
        Latent::StopAngle(v) | Latent::UnlockAngle(v) => v,
        Latent::Mass(_) => 0.0,
    }
}

/// Advances the task by one clipped action; returns the applied velocity
/// used for the inertial torque term.
pub(super) fn advance(s: &mut WorldState, a: &Action) -> [f64; ACTION_DIM] {
    match s.task {
        TaskId::WeighSort => weigh_sort(s, a),
        TaskId::TwistPull => twist_pull(s, a),
        TaskId::LidOpen => lid_open(s, a),
    }
}

fn weigh_sort(s: &mut WorldState, a: &Action) -> [f64; ACTION_DIM] {
    let [dx, dy, dg] = a.delta;
    let moved = translate(s, dx, dy);
    let g_prev = s.agent[3];
    let g = (g_prev + dg).clamp(0.0, 1.0);
    s.agent[3] = g;
    let closing = g_prev <= 0.5 && g > 0.5;
    let opening = g_prev > 0.5 && g <= 0.5;
    if s.object.attached {
        s.object.pos = agent_xy(s);
        if opening {
            s.object.attached = false;
            s.contact_flag = false;
            let ok = dist(s.object.pos, correct_plate(s.latent)) <= PLATE_RADIUS;
            finish(s, ok);
        }
    } else {
        let d = dist(agent_xy(s), s.object.pos);
        if closing && d < GRASP_RADIUS {
            s.object.attached = true;
            s.object.pos = agent_xy(s);
            s.phase = Phase::Transport;
        } else if closing && d < FUMBLE_RADIUS {
            s.bump = true;
            s.agent[3] = 0.0;
            s.phase = Phase::Engage;
        } else {
            if closing {
                s.agent[3] = 0.0;
            }
            s.phase = if d < GRASP_RADIUS { Phase::Engage } else { Phase::Approach };
        }
        s.contact_flag = s.object.attached || s.bump;
    }
    [moved[0], moved[1], 0.0]
}

fn twist_pull(s: &mut WorldState, a: &Action) -> [f64; ACTION_DIM] {
    let [dx, dy, dth] = a.delta;
    if !s.object.attached {
        let moved = translate(s, dx, dy);
        if dist(agent_xy(s), s.object.pos) < ENGAGE_RADIUS {
            s.object.attached = true;
            s.agent[0] = s.object.pos[0];
            s.agent[1] = s.object.pos[1];
            s.agent[3] = 1.0;
            s.phase = Phase::ContactWork;
            s.contact_flag = true;
        }
        return [moved[0], moved[1], 0.0];
    }
    let stop = limit(s);
    let before = s.object.angle;
    s.object.angle = (before + dth).clamp(0.0, stop);
    s.agent[2] = s.object.angle;
    if dy > PULL_MIN {
        if s.object.angle >= stop - PULL_TOLERANCE {
            s.object.lift += dy;
            s.agent[1] += dy;
            s.phase = Phase::Transport;
            if s.object.lift >= EXTRACT_DISTANCE - 1e-9 {
                finish(s, true);
            }
        } else {
            finish(s, false);
        }
    }
    [0.0, 0.0, s.object.angle - before]
}

fn lid_open(s: &mut WorldState, a: &Action) -> [f64; ACTION_DIM] {
    let [dx, dy, dth] = a.delta;
    if !s.object.attached {
        let moved = translate(s, dx, dy);
        s.contact_flag = false;
        s.phase = Phase::Approach;
        if dth > TWIST_MIN {
            let d = dist(agent_xy(s), s.object.pos);
            if d < ENGAGE_RADIUS {
                s.object.attached = true;
                s.agent[0] = s.object.pos[0];
                s.agent[1] = s.object.pos[1];
                s.agent[3] = 1.0;
                s.phase = Phase::ContactWork;
                s.contact_flag = true;
            } else if d < LID_FUMBLE_RADIUS {
                s.bump = true;
                s.contact_flag = true;
                s.phase = Phase::Engage;
                s.agent[1] = (s.agent[1] - RETRACT).max(-WORKSPACE);
            }
        }
        return [moved[0], moved[1], 0.0];
    }
    let unlock = limit(s);
    let before = s.object.angle;
    s.object.angle = (before + dth).clamp(0.0, unlock);
    s.agent[2] = s.object.angle;
    if dy > PULL_MIN {
        if s.object.angle >= unlock - PULL_TOLERANCE {
            s.object.lift += dy;
            s.agent[1] += dy;
            s.phase = Phase::Transport;
            if s.object.lift >= EXTRACT_DISTANCE - 1e-9 {
                finish(s, true);
            }
        } else if s.object.angle >= unlock - SLIP_BAND {
            s.object.attached = false;
            s.object.angle = 0.0;
            s.agent[2] = 0.0;
            s.agent[3] = 0.0;
            s.agent[1] = (s.agent[1] - RETRACT).max(-WORKSPACE);
            s.phase = Phase::Approach;
            s.bump = true;
        } else {
            finish(s, false);
        }
    }
    [0.0, 0.0, s.object.angle - before]
}

fn toward(from: [f64; 2], to: [f64; 2], step: f64) -> [f64; 2] {
    [(to[0] - from[0]).clamp(-step, step), (to[1] - from[1]).clamp(-step, step)]
}

/// Privileged controller that reads the latent directly.
pub fn scripted_expert(s: &WorldState) -> Action {
    let [bx, by, bz] = s.task.action_bounds();
    let here = agent_xy(s);
    match s.task {
        TaskId::WeighSort => {
            if s.object.attached {
                let plate = correct_plate(s.latent);
                if dist(here, plate) <= 1e-9 {
                    Action::new([0.0, 0.0, -bz])
                } else {
                    let m = toward(here, plate, bx.min(by));
                    Action::new([m[0], m[1], bz])
                }
            } else if dist(here, s.object.pos) <= 1e-9 {
                Action::new([0.0, 0.0, bz])
            } else {
                let m = toward(here, s.object.pos, bx.min(by));
                Action::new([m[0], m[1], -bz])
            }
        }
        TaskId::TwistPull | TaskId::LidOpen => {
            if !s.object.attached {
                if dist(here, s.object.pos) <= 1e-9 {
                    Action::new([0.0, 0.0, bz])
                } else {
                    let m = toward(here, s.object.pos, bx.min(by));
                    Action::new([m[0], m[1], 0.0])
                }
            } else if s.object.lift == 0.0 && s.object.angle < limit(s) {
                Action::new([0.0, 0.0, bz])
            } else {
                Action::new([0.0, by, 0.0])
            }
        }
    }
}
