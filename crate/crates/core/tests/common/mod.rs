#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;

use rand::Rng as _;
use vtfusion::models::{Mat, ParameterSet};
use vtfusion::rng::Rng;

pub fn random_mat(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Scales every trainable tensor up so that gradients are not dominated by
/// the tiny initialization.
pub fn perturb_params(p: &mut ParameterSet<f64>, rng: &mut Rng, scale: f64) {
    for id in 0..p.len() {
        if p.is_trainable(id) {
            for v in p.data_mut(id) {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}

/// Relative error between analytic gradients and central differences on up
/// to `per_tensor` random coordinates of each trainable tensor.
pub fn gradient_error(
    p: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    rng: &mut Rng,
    per_tensor: usize,
    loss: impl Fn(&ParameterSet<f64>) -> f64,
) -> f64 {
    let h = 1e-6;
    let mut q = p.clone();
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for id in 0..p.len() {
        if !p.is_trainable(id) {
            continue;
        }
        let n = p.data(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = q.data(id)[i];
            q.data_mut(id)[i] = orig + h;
            let lp = loss(&q);
            q.data_mut(id)[i] = orig - h;
            let lm = loss(&q);
            q.data_mut(id)[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = analytic.data(id)[i];
            diff += (num - ana).powi(2);
            norm_a += ana * ana;
            norm_n += num * num;
        }
    }
    let denom = norm_a.sqrt().max(norm_n.sqrt());
    assert!(denom > 1e-10, "degenerate gradient check (all-zero gradients)");
    diff.sqrt() / denom
}
