//! Central finite-difference gradient checks, plus the standard case set for every layer operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Mode, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Builds `sum(weights * f(inputs))` so every output element contributes.
fn weighted_loss<F>(inputs: &[Tensor], weights: &Tensor, f: &F) -> (Graph, Vec<Var>, Var)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone()).expect("finite input")).collect();
    let y = f(&mut g, &vars);
    let y = if g.value(y).shape() == weights.shape() {
        let w = g.constant(weights.clone()).expect("finite weights");
        g.mul(y, w).expect("same shape")
    } else {
        y
    };
    let l = g.sum(y).expect("sum");
    (g, vars, l)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Worst relative error between analytic and central-difference gradients over all inputs.
///
/// Outputs of shape `out_shape` are contracted with random weights; scalar outputs are used as is.
pub fn check<F>(inputs: Vec<Tensor>, out_shape: &[usize], rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let weights = random(out_shape, rng);
    let (mut g, vars, l) = weighted_loss(&inputs, &weights, &f);
    g.backward(l).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("input gradient");
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let (gp, _, lp) = weighted_loss(&plus, &weights, &f);
            let (gm, _, lm) = weighted_loss(&minus, &weights, &f);
            numeric[i] = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Worst error of `case` over [`INSTANCES`] seeded instances.
pub fn run_suite(name: &str, case: &dyn Fn(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..INSTANCES)
        .map(|seed| case(&mut ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64)))
        .fold(0.0, f64::max)
}

pub type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

/// Random-instance generators for every differentiable operation the layers are built from.
pub fn layer_cases() -> Vec<(&'static str, Case)> {
    vec![
        (
            "conv3d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let cin = rng.gen_range(1..3);
                let cout = rng.gen_range(1..3);
                let x = random(&[2, cin, 3, 4, 3], rng);
                let w = random(&[cout, cin, 3, 3, 3], rng);
                let b = random(&[cout], rng);
                check(vec![x, w, b], &[2, cout, 3, 4, 3], rng, |g, v| g.conv3d(v[0], v[1], v[2]).unwrap())
            }),
        ),
        (
            "max_pool3d",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[2, 2, 4, 4, 2], rng);
                check(vec![x], &[2, 2, 2, 2, 1], rng, |g, v| g.max_pool3d(v[0], 2).unwrap())
            }),
        ),
        (
            "batch_norm_train",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[3, 2, 2, 2, 1], rng);
                let gamma = random(&[2], rng);
                let beta = random(&[2], rng);
                check(vec![x, gamma, beta], &[3, 2, 2, 2, 1], rng, |g, v| {
                    let (mut m, mut s) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
                    g.batch_norm(v[0], v[1], v[2], (&mut m, &mut s), Mode::Train).unwrap()
                })
            }),
        ),
        (
            "batch_norm_eval",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[4, 3], rng);
                let gamma = random(&[3], rng);
                let beta = random(&[3], rng);
                let mean = random(&[3], rng);
                let var = Tensor::from_vec(vec![0.5, 1.3, 2.0]);
                check(vec![x, gamma, beta], &[4, 3], rng, move |g, v| {
                    let (mut m, mut s) = (mean.clone(), var.clone());
                    g.batch_norm(v[0], v[1], v[2], (&mut m, &mut s), Mode::Eval).unwrap()
                })
            }),
        ),
        (
            "prelu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[2, 3, 2, 2, 2], rng);
                let s = random(&[3], rng);
                check(vec![x, s], &[2, 3, 2, 2, 2], rng, |g, v| g.prelu(v[0], v[1]).unwrap())
            }),
        ),
        (
            "leaky_relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[4, 5], rng);
                check(vec![x], &[4, 5], rng, |g, v| g.leaky_relu(v[0], 0.01).unwrap())
            }),
        ),
        (
            "fully_connected",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[3, 5], rng);
                let w = random(&[4, 5], rng);
                let b = random(&[4], rng);
                check(vec![x, w, b], &[3, 4], rng, |g, v| g.linear(v[0], v[1], v[2]).unwrap())
            }),
        ),
        (
            "flatten",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[2, 2, 2, 1, 3], rng);
                check(vec![x], &[2, 12], rng, |g, v| g.reshape(v[0], &[2, 12]).unwrap())
            }),
        ),
        (
            "row_affine",
            Box::new(|rng: &mut ChaCha8Rng| {
                let x = random(&[3, 4], rng);
                let r = random(&[4], rng);
                let q = random(&[4], rng);
                check(vec![x, r, q], &[3, 4], rng, |g, v| {
                    let a = g.mul_row(v[0], v[1]).unwrap();
                    g.add_row(a, v[2]).unwrap()
                })
            }),
        ),
        (
            "focal_rows",
            Box::new(|rng: &mut ChaCha8Rng| {
                let d = random(&[6, 3], rng);
                let a = rng.gen_range(1.0..10.0);
                let c = rng.gen_range(0.1..1.5);
                check(vec![d], &[6], rng, move |g, v| g.focal_rows(v[0], a, c).unwrap())
            }),
        ),
        (
            "squared_norm",
            Box::new(|rng: &mut ChaCha8Rng| {
                let a = random(&[5, 3], rng);
                let b = random(&[5, 3], rng);
                check(vec![a, b], &[1], rng, |g, v| {
                    let d = g.sub(v[0], v[1]).unwrap();
                    let s = g.row_sq_norm(d).unwrap();
                    let s = g.scale(s, 0.7).unwrap();
                    g.mean(s).unwrap()
                })
            }),
        ),
        (
            "bce_with_logits",
            Box::new(|rng: &mut ChaCha8Rng| {
                let z = random(&[7], rng);
                let t: Vec<f64> = (0..7).map(|_| f64::from(rng.gen_range(0..2))).collect();
                check(vec![z], &[1], rng, move |g, v| g.bce_with_logits(v[0], &t).unwrap())
            }),
        ),
    ]
}
