//! Checks shared by the focused test files and the acceptance target.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use vtfusion::diffusion::{gaussian, make_schedule, q_sample, reverse_step, sample_loop, training_loss, DiffusionSchedule, EpsModel, LossLayout};
use vtfusion::fusion::{cfg_combine, moe_combine, NoisePrediction, NoiseSource};
use vtfusion::harness::train::learning_rate;
use vtfusion::models::layers::{softplus, timestep_embedding, Mlp, MlpCache};
use vtfusion::models::params::Builder;
use vtfusion::models::{detect_contact, gate_torque, guidance_weight, softmax2, AdamW, FeatureVector, Mat, Modality, ParameterSet, FEATURE_DIM};
use vtfusion::rng::stream;

/// One named identity and whether it held.
pub type Outcome = (String, bool);

fn pred(values: Vec<f64>, source: NoiseSource) -> NoisePrediction<f64> {
    NoisePrediction {
        values: Mat::from_vec(1, values.len(), values),
        source,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Gate, guidance, routing and schedule identities.
pub fn identity_suite() -> Vec<Outcome> {
    let mut out: Vec<Outcome> = Vec::new();
    let mut rng = stream(0, "identities", 0);
    let mut push = |name: &str, ok: bool| out.push((name.to_string(), ok));

    // Contact gate.
    let f_t: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let f_s: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ft = FeatureVector::new(f_t.clone(), Modality::Torque).expect("64-d");
    let off = detect_contact(&[0.0, 0.0, 0.0], 1.0).expect("valid threshold");
    let on = detect_contact(&[0.0, -1.5, 0.2], 1.0).expect("valid threshold");
    let edge = detect_contact(&[1.0, -1.0, 0.0], 1.0).expect("valid threshold");
    push("contact gate: zeros -> 0, |1.5| -> 1, exactly 1.0 -> 0", !off.phi && on.phi && !edge.phi);
    push("gated feature at phi=0 is f_star bitwise", gate_torque(&ft, off, &f_s).expect("gate").values == f_s);
    push("gated feature at phi=1 is f_torque bitwise", gate_torque(&ft, on, &f_s).expect("gate").values == f_t);

    // Guidance combination.
    let ev: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let et: Vec<f64> = (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let (v, t) = (pred(ev.clone(), NoiseSource::Vision), pred(et.clone(), NoiseSource::Torque));
    let gw = |w: f64| vtfusion::models::GuidanceWeight { w_scale: 0.0, w_torque: w };
    let at = |w: f64| cfg_combine(&v, &t, gw(w)).expect("same shape").values.data;
    push("guidance w=0 returns the vision estimate bitwise", at(0.0) == ev);
    push("guidance w=1 returns the torque estimate", at(1.0).iter().zip(&et).all(|(a, b)| close(*a, *b)));
    let scalar = cfg_combine(&pred(vec![0.2], NoiseSource::Vision), &pred(vec![0.6], NoiseSource::Torque), gw(0.5))
        .expect("same shape")
        .values
        .data[0];
    push("guidance 0.2, 0.6 at w=0.5 gives 0.4", close(scalar, 0.4));
    let (a, b) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
    let (ca, cb, cm) = (at(a), at(b), at(0.5 * (a + b)));
    push(
        "guidance is affine in w",
        (0..ca.len()).all(|i| close(cm[i], 0.5 * (ca[i] + cb[i]))),
    );
    push(
        "guidance with equal estimates ignores w",
        cfg_combine(&v, &pred(ev.clone(), NoiseSource::Torque), gw(a)).expect("shape").values.data == ev,
    );

    // Guidance weight.
    push("w_torque = 0 exactly at phi=0", [-20.0, 0.0, 3.5, 40.0].iter().all(|&s| guidance_weight(s, false).w_torque == 0.0));
    push("softplus(0) = ln 2", close(guidance_weight(0.0, true).w_torque, std::f64::consts::LN_2));
    let tiny = guidance_weight(-20.0f64, true).w_torque;
    push("softplus(-20) is positive and about 2.06e-9", tiny > 0.0 && (tiny - 2.061e-9).abs() < 1e-12);
    push("softplus matches ln(1+e^x)", (0..50).all(|i| {
        let x = -5.0 + 0.2 * i as f64;
        close(softplus(x), (1.0 + x.exp()).ln())
    }));

    // Routing simplex.
    let (p, q) = softmax2(0.7f64, 0.7);
    push("equal logits route (0.5, 0.5)", p == 0.5 && q == 0.5);
    let (p, q) = softmax2(3f64.ln(), 0.0);
    push("logits (ln 3, 0) route (0.75, 0.25)", close(p, 0.75) && close(q, 0.25));
    push(
        "routing weights sum to 1 over 1000 random inputs",
        (0..1000).all(|_| {
            let (p, q) = softmax2(rng.gen_range(-30.0..30.0f64), rng.gen_range(-30.0..30.0));
            close(p + q, 1.0) && p >= 0.0 && q >= 0.0
        }),
    );
    push("mixture (1, 0) returns the vision estimate bitwise", moe_combine(&v, &t, 1.0, 0.0).expect("simplex").values.data == ev);
    let mix = moe_combine(&pred(vec![0.2], NoiseSource::Vision), &pred(vec![0.6], NoiseSource::Torque), 0.5, 0.5)
        .expect("simplex")
        .values
        .data[0];
    push("mixture 0.2, 0.6 at (0.5, 0.5) gives 0.4", close(mix, 0.4));
    push(
        "mixture stays within the elementwise hull",
        (0..200).all(|_| {
            let wi: f64 = rng.gen_range(0.0..1.0);
            let m = moe_combine(&v, &t, wi, 1.0 - wi).expect("simplex").values.data;
            m.iter().enumerate().all(|(i, x)| *x >= ev[i].min(et[i]) - 1e-12 && *x <= ev[i].max(et[i]) + 1e-12)
        }),
    );

    // Schedule and forward process.
    let one = DiffusionSchedule::from_betas(vec![0.5]).expect("valid");
    push("T=1, beta 0.5 gives alpha_bar 0.5", one.alpha_bar == vec![0.5]);
    let s = make_schedule(100, 1e-4, 0.02).expect("valid");
    let mut acc = 1.0;
    push(
        "alpha_bar is the running product of alpha",
        s.alpha.iter().zip(&s.alpha_bar).all(|(a, ab)| {
            acc *= a;
            close(acc, *ab)
        }),
    );
    // Independent oracle: exp of the summed log-survival of a linear ramp.
    let log_sum: f64 = (0..100).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0)).ln()).sum();
    push(
        "default alpha_bar strictly decreases to exp(sum ln(1 - beta))",
        s.alpha_bar.windows(2).all(|w| w[1] < w[0]) && (s.alpha_bar[99] - log_sum.exp()).abs() < 1e-12,
    );
    let quarter = DiffusionSchedule::from_betas(vec![0.75]).expect("valid");
    let x = q_sample(&Mat::from_vec(1, 1, vec![1.0f64]), 0, &Mat::from_vec(1, 1, vec![2.0]), &quarter).expect("shape");
    push("q_sample(1, 2) at alpha_bar 0.25 is 2.2320508", (x.data[0] - 2.232_050_807_568_877).abs() < 1e-12);
    out
}

/// Worst error of the one-step oracle round trip at f32 and f64.
pub fn oracle_round_trip() -> f64 {
    let s = make_schedule(1, 0.3, 0.3).expect("valid");
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let mut rng = stream(k, "oracle", 0);
        let x0: Mat<f64> = gaussian(&mut rng, 8, 3);
        let eps: Mat<f64> = gaussian(&mut rng, 8, 3);
        let xt = q_sample(&x0, 0, &eps, &s).expect("shape");
        let back = reverse_step(&xt, &eps, 0, &s, &mut rng).expect("step");
        let (x0f, epsf): (Mat<f32>, Mat<f32>) = (x0.cast(), eps.cast());
        let xtf = q_sample(&x0f, 0, &epsf, &s).expect("shape");
        let backf = reverse_step(&xtf, &epsf, 0, &s, &mut rng).expect("step");
        for i in 0..x0.data.len() {
            worst = worst.max((back.data[i] - x0.data[i]).abs());
            worst = worst.max((backf.data[i] as f64 - x0.data[i]).abs());
        }
    }
    worst
}

/// Small unconditional ε-network over scalar samples.
pub struct ToyEps {
    pub mlp: Mlp,
}

pub const TOY_TEMB: usize = 16;

impl ToyEps {
    fn input(x_t: &Mat<f64>, ts: &[usize]) -> Mat<f64> {
        let mut m = Mat::zeros(x_t.rows, 1 + TOY_TEMB);
        for (r, &t) in ts.iter().enumerate().take(x_t.rows) {
            let row = m.row_mut(r);
            row[0] = x_t.at(r, 0);
            row[1..].copy_from_slice(&timestep_embedding::<f64>(t, TOY_TEMB));
        }
        m
    }
}

impl EpsModel<f64> for ToyEps {
    type Obs = ();
    type Cache = MlpCache<f64>;

    fn layout(&self) -> LossLayout {
        LossLayout::actions_only(1)
    }

    fn forward(&self, p: &ParameterSet<f64>, _: &(), x_t: &Mat<f64>, ts: &[usize]) -> (Mat<f64>, MlpCache<f64>) {
        self.mlp.forward(p, &Self::input(x_t, ts))
    }

    fn backward(&self, p: &ParameterSet<f64>, _: &(), cache: MlpCache<f64>, d_eps: &Mat<f64>, g: &mut ParameterSet<f64>) {
        self.mlp.backward(p, &cache, d_eps, g, false);
    }
}

pub fn toy_model(seed: u64) -> (ToyEps, ParameterSet<f64>) {
    let mut rng = stream(seed, "toy.init", 0);
    let mut b = Builder::<f64>::new(&mut rng);
    let mlp = Mlp::new(&mut b, "toy", &[1 + TOY_TEMB, 64, 64, 1]);
    let mut p = b.finish();
    // Default init is tuned for deep stacks; widen it for the toy.
    for id in 0..p.len() {
        if p.is_trainable(id) && p.get(id).shape.len() == 2 {
            let fan_in = p.get(id).shape[1] as f64;
            for v in p.data_mut(id) {
                *v = rng.gen_range(-1.0..1.0) * (3.0 / fan_in).sqrt();
            }
        }
    }
    (ToyEps { mlp }, p)
}

/// Mixture `w·N(-1, 0.2²) + (1−w)·N(1, 0.2²)`.
pub fn mixture_samples(rng: &mut vtfusion::rng::Rng, n: usize, w_left: f64) -> Vec<f64> {
    let left = Normal::new(-1.0, 0.2).expect("valid");
    let right = Normal::new(1.0, 0.2).expect("valid");
    (0..n)
        .map(|_| if rng.gen_bool(w_left) { left.sample(rng) } else { right.sample(rng) })
        .collect()
}

pub struct MixtureOutcome {
    pub w_true: f64,
    pub w_sampled: f64,
    pub samples: usize,
    pub final_loss: f64,
}

/// Trains the toy network on a two-component mixture and measures the left
/// component's share among sampled points.
pub fn mixture_reproduction(w_left: f64, samples: usize) -> MixtureOutcome {
    let s = make_schedule(100, 1e-4, 0.1).expect("valid");
    let (model, mut p) = toy_model(0);
    let mut opt = AdamW::new(&p, 2e-3, 0.0);
    let mut rng = stream(0, "toy.data", 0);
    let steps = 4000;
    let batch = 256;
    let mut recent = Vec::new();
    for step in 0..steps {
        let x0 = Mat::from_vec(batch, 1, mixture_samples(&mut rng, batch, w_left));
        let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..s.steps())).collect();
        let eps = gaussian(&mut rng, batch, 1);
        let mut g = p.zeros_like();
        let loss = training_loss(&model, &p, &(), &x0, &ts, &eps, &s, Some(&mut g)).expect("finite loss");
        opt.lr = learning_rate(2e-3, step, 100, steps);
        opt.step(&mut p, &g).expect("finite step");
        if step + 200 >= steps {
            recent.push(loss);
        }
    }
    let mut srng = stream(0, "toy.sample", 0);
    let x = sample_loop(&s, samples, 1, None, &mut srng, |x, t| {
        let ts = vec![t; x.rows];
        Ok(model.forward(&p, &(), x, &ts).0)
    })
    .expect("finite samples");
    let left = x.data.iter().filter(|v| **v < 0.0).count();
    MixtureOutcome {
        w_true: w_left,
        w_sampled: left as f64 / samples as f64,
        samples,
        final_loss: recent.iter().sum::<f64>() / recent.len() as f64,
    }
}
