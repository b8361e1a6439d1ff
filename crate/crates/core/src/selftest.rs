//! Fast invariant checks run by the `selftest` subcommand.

use rand::Rng as _;

use crate::config::parse_train_config;
use crate::diffusion::{gaussian, make_schedule, q_sample};
use crate::fusion::{cfg_combine, strategy_loss, ModelDims, NoisePrediction, NoiseSource, ObsBatch, PolicyModel, StrategyConfig, StrategyTag, TrainBatch};
use crate::harness::{evaluate, ExpertController, TrainConfig, ZeroController};
use crate::models::encoders::GuidanceWeight;
use crate::models::{Mat, ParameterSet};
use crate::parallel::Execution;
use crate::rng::{stream, Rng};
use crate::simenv::{dataset::encode_dataset, generate_demos, TaskId};
use crate::store::{decode_checkpoint, encode_checkpoint, Checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn schedule_identity() -> Check {
    let s = match make_schedule(100, 1e-4, 0.02) {
        Ok(s) => s,
        Err(e) => return check("schedule", false, e.to_string()),
    };
    let mut acc = 1.0;
    let mut worst: f64 = 0.0;
    for (a, ab) in s.alpha.iter().zip(&s.alpha_bar) {
        acc *= a;
        worst = worst.max((acc - ab).abs());
    }
    let decreasing = s.alpha_bar.windows(2).all(|w| w[1] < w[0]);
    check(
        "schedule: cumulative product and monotonicity",
        worst <= 1e-12 && decreasing,
        format!("max |prod - alpha_bar| = {worst:.1e}"),
    )
}

fn noising_inverse() -> Check {
    let s = make_schedule(50, 1e-4, 0.02).expect("valid schedule");
    let mut rng = stream(0, "selftest.noise", 0);
    let x0: Mat<f64> = gaussian(&mut rng, 8, 3);
    let eps: Mat<f64> = gaussian(&mut rng, 8, 3);
    let mut worst: f64 = 0.0;
    for t in [0, 10, 49] {
        let xt = q_sample(&x0, t, &eps, &s).expect("shapes match");
        let (ca, cn) = (s.alpha_bar[t].sqrt(), (1.0 - s.alpha_bar[t]).sqrt());
        for i in 0..x0.data.len() {
            worst = worst.max(((xt.data[i] - cn * eps.data[i]) / ca - x0.data[i]).abs());
        }
    }
    check("forward noising inverts with the true noise", worst <= 1e-12, format!("max error {worst:.1e}"))
}

fn cfg_zero_weight() -> Check {
    let mut rng = stream(0, "selftest.cfg", 0);
    let v = NoisePrediction {
        values: gaussian::<f64>(&mut rng, 4, 3),
        source: NoiseSource::Vision,
    };
    let t = NoisePrediction {
        values: gaussian::<f64>(&mut rng, 4, 3),
        source: NoiseSource::Torque,
    };
    let w = GuidanceWeight {
        w_scale: 0.7,
        w_torque: 0.0,
    };
    let ok = cfg_combine(&v, &t, w).map(|c| c.values == v.values).unwrap_or(false);
    check("guidance with zero weight returns the vision estimate", ok, String::new())
}

fn gradients(instances: u64) -> Check {
    let dims = ModelDims {
        visual: 3,
        joints: 2,
        history: 3,
        horizon: 2,
        action: 2,
        c1: 3,
        c2: 4,
    };
    let sched = make_schedule(10, 1e-3, 0.2).expect("valid schedule");
    let mut worst: f64 = 0.0;
    for tag in StrategyTag::ALL {
        for k in 0..instances {
            let mut rng = stream(k, "selftest.grad", tag as u64);
            let (model, mut p) = PolicyModel::new::<f64>(StrategyConfig::new(tag), dims, &mut rng);
            for id in 0..p.len() {
                if p.is_trainable(id) {
                    for v in p.data_mut(id) {
                        *v += rng.gen_range(-0.15..0.15);
                    }
                }
            }
            let batch = random_batch(&model, &mut rng, 4, sched.steps());
            let mut g = p.zeros_like();
            if strategy_loss(&model, &p, &batch, &sched, Some(&mut g)).is_err() {
                return check("loss gradients match finite differences", false, format!("{tag}: loss failed"));
            }
            let loss = |q: &ParameterSet<f64>| strategy_loss(&model, q, &batch, &sched, None).unwrap_or(f64::NAN);
            worst = worst.max(relative_gradient_error(&p, &g, &mut rng, loss));
        }
    }
    check(
        "loss gradients match finite differences",
        worst < 1e-4,
        format!("worst relative error {worst:.2e}"),
    )
}

fn random_batch(model: &PolicyModel, rng: &mut Rng, n: usize, steps: usize) -> TrainBatch<f64> {
    let d = model.dims;
    let mut m = |rows: usize, cols: usize| Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect());
    let obs = ObsBatch {
        vis: m(n, d.visual),
        tor: m(n, d.torque_len()),
        prop: m(n, d.joints),
        phi: (0..n).map(|i| i % 2 == 0).collect(),
    };
    let width = model.traj_width();
    let x0 = m(n * d.horizon, width);
    TrainBatch {
        obs,
        x0,
        ts: (0..n).map(|_| rng.gen_range(0..steps)).collect(),
        eps: gaussian(rng, n * d.horizon, width),
    }
}

fn relative_gradient_error(
    p: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    rng: &mut Rng,
    loss: impl Fn(&ParameterSet<f64>) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut q = p.clone();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for id in 0..p.len() {
        if !p.is_trainable(id) {
            continue;
        }
        let n = p.data(id).len();
        for _ in 0..4.min(n) {
            let i = rng.gen_range(0..n);
            let orig = q.data(id)[i];
            q.data_mut(id)[i] = orig + h;
            let lp = loss(&q);
            q.data_mut(id)[i] = orig - h;
            let lm = loss(&q);
            q.data_mut(id)[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = analytic.data(id)[i];
            diff += (num - ana).powi(2);
            na += ana * ana;
            nn += num * num;
        }
    }
    let denom = f64::max(na.sqrt(), nn.sqrt());
    if denom < 1e-10 {
        return f64::INFINITY;
    }
    diff.sqrt() / denom
}

fn controllers(exec: Execution) -> Vec<Check> {
    let mut out = Vec::new();
    for task in TaskId::ALL {
        let expert = evaluate(&ExpertController, task, 10, 7, exec);
        let zero = evaluate(&ZeroController, task, 10, 7, exec);
        let (es, zs) = match (expert, zero) {
            (Ok(e), Ok(z)) => (e.successes(), z.successes()),
            (Err(e), _) | (_, Err(e)) => {
                out.push(check(&format!("{task}: reference controllers"), false, e.to_string()));
                continue;
            }
        };
        out.push(check(
            &format!("{task}: expert succeeds, zero action fails"),
            es == 10 && zs == 0,
            format!("expert {es}/10, zero {zs}/10"),
        ));
    }
    out
}

fn checkpoint_round_trip() -> Check {
    let config = TrainConfig::default();
    let mut rng = stream(0, "init", 0);
    let (_, params) = PolicyModel::new::<f32>(config.strategy, config.dims(), &mut rng);
    let ck = Checkpoint {
        strategy: config.strategy.tag,
        config_text: config.canonical(),
        params,
    };
    let bytes = encode_checkpoint(&ck);
    let back = decode_checkpoint(std::path::Path::new("<memory>"), &bytes, Some(ck.strategy));
    let exact = back.as_ref().map(|b| encode_checkpoint(b) == bytes && *b == ck).unwrap_or(false);
    let config_back = parse_train_config(&ck.config_text).map(|c| c == config).unwrap_or(false);
    check(
        "checkpoint and config text round trip exactly",
        exact && config_back,
        format!("{} bytes", bytes.len()),
    )
}

fn demo_determinism(exec: Execution) -> Check {
    let a = generate_demos(TaskId::LidOpen, 3, 11, None, exec);
    let b = generate_demos(TaskId::LidOpen, 3, 11, None, Execution::Sequential);
    let ok = match (a, b) {
        (Ok(a), Ok(b)) => encode_dataset(&a) == encode_dataset(&b),
        _ => false,
    };
    check("demo generation is byte-identical across runs and modes", ok, String::new())
}

/// Runs every check; takes a few seconds.
pub fn run_selftest(exec: Execution) -> Vec<Check> {
    let mut out = vec![schedule_identity(), noising_inverse(), cfg_zero_weight(), gradients(2)];
    out.extend(controllers(exec));
    out.push(checkpoint_round_trip());
    out.push(demo_determinism(exec));
    out
}
