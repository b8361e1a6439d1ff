//! Finite-difference checks of every differentiable operation. Each check
//! returns the worst relative error over its random instances.

use rand::Rng as _;
use vtfusion::diffusion::{gaussian, make_schedule};
use vtfusion::fusion::{strategy_loss, ModelDims, ObsBatch, PolicyModel, StrategyConfig, StrategyTag, TrainBatch};
use vtfusion::models::layers::{
    avg_pool2, avg_pool2_backward, film_apply, film_backward, silu, silu_grad, softplus, softplus_grad, upsample2,
    upsample2_backward, Conv1d, Linear, Mlp,
};
use vtfusion::models::params::Builder;
use vtfusion::models::unet::{TemporalUnet, UnetDims};
use vtfusion::models::{Mat, ParameterSet};
use vtfusion::rng::{stream, Rng};

use super::{gradient_error, perturb_params, random_mat};

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;

fn dot(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn activations() -> f64 {
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.act", 0);
        let x: f64 = rng.gen_range(-6.0..6.0);
        let ns = (silu(x + h) - silu(x - h)) / (2.0 * h);
        let np = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
        worst = worst.max((ns - silu_grad(x)).abs() / ns.abs().max(silu_grad(x).abs()).max(1e-12));
        worst = worst.max((np - softplus_grad(x)).abs() / np.abs().max(softplus_grad(x).abs()).max(1e-12));
    }
    worst
}

pub fn linear_layer() -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.linear", 0);
        let (din, dout, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
        let mut b = Builder::<f64>::new(&mut rng);
        let l = Linear::new(&mut b, "l", din, dout);
        let mut p = b.finish();
        perturb_params(&mut p, &mut rng, 0.5);
        let x = random_mat(&mut rng, n, din, 1.0);
        let r = random_mat(&mut rng, n, dout, 1.0);
        let mut g = p.zeros_like();
        l.backward(&p, &x, &r, &mut g, false);
        worst = worst.max(gradient_error(&p, &g, &mut rng, 50, |q| dot(&l.forward(q, &x), &r)));
    }
    worst
}

pub fn perceptron_encoder() -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.mlp", 0);
        let widths = [rng.gen_range(1..8), rng.gen_range(2..10), rng.gen_range(2..10), rng.gen_range(1..5)];
        let mut b = Builder::<f64>::new(&mut rng);
        let m = Mlp::new(&mut b, "m", &widths);
        let mut p = b.finish();
        perturb_params(&mut p, &mut rng, 0.5);
        let x = random_mat(&mut rng, 3, widths[0], 1.5);
        let r = random_mat(&mut rng, 3, widths[3], 1.0);
        let (_, c) = m.forward(&p, &x);
        let mut g = p.zeros_like();
        m.backward(&p, &c, &r, &mut g, false);
        worst = worst.max(gradient_error(&p, &g, &mut rng, 40, |q| dot(&m.eval(q, &x), &r)));
    }
    worst
}

pub fn conv1d() -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.conv", 0);
        let (cin, cout, len, batch) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..6), 2);
        let mut b = Builder::<f64>::new(&mut rng);
        let conv = Conv1d::new(&mut b, "c", cin, cout);
        let mut p = b.finish();
        perturb_params(&mut p, &mut rng, 0.5);
        let x = random_mat(&mut rng, batch * len, cin, 1.0);
        let r = random_mat(&mut rng, batch * len, cout, 1.0);
        let (_, col) = conv.forward(&p, &x, len);
        let mut g = p.zeros_like();
        let dx = conv.backward(&p, &col, &r, len, &mut g, true).unwrap();
        worst = worst.max(gradient_error(&p, &g, &mut rng, 50, |q| dot(&conv.forward(q, &x, len).0, &r)));
        // Input gradient, coordinate by coordinate.
        let h = 1e-6;
        let mut xe = x.clone();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..x.data.len() {
            xe.data[i] = x.data[i] + h;
            let lp = dot(&conv.forward(&p, &xe, len).0, &r);
            xe.data[i] = x.data[i] - h;
            let lm = dot(&conv.forward(&p, &xe, len).0, &r);
            xe.data[i] = x.data[i];
            let num = (lp - lm) / (2.0 * h);
            diff += (num - dx.data[i]).powi(2);
            norm = norm.max(num.abs()).max(dx.data[i].abs());
        }
        if norm > 0.0 {
            worst = worst.max(diff.sqrt() / norm);
        }
    }
    worst
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_input_grad(x: &Mat<f64>, f: impl Fn(&Mat<f64>) -> f64) -> Mat<f64> {
    let h = 1e-6;
    let mut xe = x.clone();
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.data.len() {
        xe.data[i] = x.data[i] + h;
        let lp = f(&xe);
        xe.data[i] = x.data[i] - h;
        let lm = f(&xe);
        xe.data[i] = x.data[i];
        out.data[i] = (lp - lm) / (2.0 * h);
    }
    out
}

fn rel(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let d: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = dot(a, a).sqrt().max(dot(b, b).sqrt());
    if n == 0.0 {
        0.0
    } else {
        d / n
    }
}

pub fn film_pool_and_upsample() -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.film", 0);
        let (c, len, batch) = (rng.gen_range(1..4), 2 * rng.gen_range(1..4), 2);
        let width = 2 * c + 3;
        let off = 1;
        let h = random_mat(&mut rng, batch * len, c, 1.0);
        let film = random_mat(&mut rng, batch, width, 1.0);
        let r = random_mat(&mut rng, batch * len, c, 1.0);
        let mut dfilm = Mat::zeros(batch, width);
        let dh = film_backward(&h, &film, off, len, &r, &mut dfilm);
        let nh = numeric_input_grad(&h, |x| dot(&film_apply(x, &film, off, len), &r));
        let nf = numeric_input_grad(&film, |f| dot(&film_apply(&h, f, off, len), &r));
        worst = worst.max(rel(&dh, &nh)).max(rel(&dfilm, &nf));

        let rp = random_mat(&mut rng, batch * len / 2, c, 1.0);
        let np = numeric_input_grad(&h, |x| dot(&avg_pool2(x, len), &rp));
        worst = worst.max(rel(&avg_pool2_backward(&rp), &np));
        let half = random_mat(&mut rng, batch * len / 2, c, 1.0);
        let nu = numeric_input_grad(&half, |x| dot(&upsample2(x), &r));
        worst = worst.max(rel(&upsample2_backward(&r), &nu));
    }
    worst
}

pub fn temporal_unet_two_step_horizon() -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.unet", 0);
        let dims = UnetDims {
            horizon: 2 * rng.gen_range(1..3),
            in_ch: rng.gen_range(1..4),
            c1: rng.gen_range(2..5),
            c2: rng.gen_range(2..5),
            temb: 4,
            cond: rng.gen_range(1..5),
        };
        let batch = 2;
        let mut b = Builder::<f64>::new(&mut rng);
        let net = TemporalUnet::new(&mut b, "den", dims);
        let mut p = b.finish();
        perturb_params(&mut p, &mut rng, 0.4);
        let x = random_mat(&mut rng, batch * dims.horizon, dims.in_ch, 1.0);
        let temb = random_mat(&mut rng, batch, dims.temb, 1.0);
        let cond = random_mat(&mut rng, batch, dims.cond, 1.0);
        let r = random_mat(&mut rng, batch * dims.horizon, dims.in_ch, 1.0);
        let (_, cache) = net.forward(&p, &x, &temb, &cond);
        let mut g = p.zeros_like();
        let dcond = net.backward(&p, &cache, &r, &mut g);
        worst = worst.max(gradient_error(&p, &g, &mut rng, 30, |q| dot(&net.forward(q, &x, &temb, &cond).0, &r)));
        let nc = numeric_input_grad(&cond, |c| dot(&net.forward(&p, &x, &temb, c).0, &r));
        worst = worst.max(rel(&dcond, &nc));
    }
    worst
}

fn small_dims() -> ModelDims {
    ModelDims {
        visual: 3,
        joints: 2,
        history: 3,
        horizon: 2,
        action: 2,
        c1: 3,
        c2: 4,
    }
}

fn random_batch(model: &PolicyModel, rng: &mut Rng, n: usize, steps: usize) -> TrainBatch<f64> {
    let d = model.dims;
    // Alternate contact and free-space rows so both gate branches are hit.
    let phi = (0..n).map(|i| i % 2 == 0).collect();
    let obs = ObsBatch {
        vis: random_mat(rng, n, d.visual, 1.5),
        tor: random_mat(rng, n, d.torque_len(), 1.5),
        prop: random_mat(rng, n, d.joints, 1.5),
        phi,
    };
    let width = model.traj_width();
    TrainBatch {
        obs,
        x0: random_mat(rng, n * d.horizon, width, 1.0),
        ts: (0..n).map(|_| rng.gen_range(0..steps)).collect(),
        eps: gaussian(rng, n * d.horizon, width),
    }
}

pub fn check_strategy(tag: StrategyTag) -> f64 {
    let sched = make_schedule(10, 1e-3, 0.2).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let mut rng = stream(k, "grad.strategy", tag as u64);
        let mut cfg = StrategyConfig::new(tag);
        cfg.alpha = 0.37;
        let (model, mut p) = PolicyModel::new::<f64>(cfg, small_dims(), &mut rng);
        perturb_params(&mut p, &mut rng, 0.15);
        let batch = random_batch(&model, &mut rng, 4, sched.steps());
        let mut g = p.zeros_like();
        strategy_loss(&model, &p, &batch, &sched, Some(&mut g)).unwrap();
        let loss = |q: &ParameterSet<f64>| strategy_loss(&model, q, &batch, &sched, None).unwrap();
        worst = worst.max(gradient_error(&p, &g, &mut rng, 6, loss));
    }
    worst
}

pub fn every_strategy_loss() -> Vec<(String, f64)> {
    StrategyTag::ALL
        .into_iter()
        .map(|tag| (format!("strategy {tag}"), check_strategy(tag)))
        .collect()
}

/// Every check by name.
pub fn all() -> Vec<(String, f64)> {
    let mut out = vec![
        ("silu/softplus".to_string(), activations()),
        ("linear".to_string(), linear_layer()),
        ("mlp".to_string(), perceptron_encoder()),
        ("conv1d".to_string(), conv1d()),
        ("film/pool/upsample".to_string(), film_pool_and_upsample()),
        ("temporal unet".to_string(), temporal_unet_two_step_horizon()),
    ];
    out.extend(every_strategy_loss());
    out
}
