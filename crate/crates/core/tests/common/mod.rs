//! Central finite-difference oracle for graph gradients.
#![allow(dead_code)]

pub mod suite;

use fovcast_core::neural::{Graph, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; below it the
/// difference quotient is dominated by rounding.
pub const FLOOR: f64 = 1e-6;
/// Coordinates probed per leaf; all of them when the leaf is smaller.
pub const PROBES: usize = 24;

/// Builds a scalar from `leaves` (in order) on `g`.
pub type Program<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w);
    g.sum(prod)
}

fn eval(leaves: &[Tensor], f: &Program, weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = project(&mut g, out, weights);
    g.value(loss).data()[0]
}

/// Worst relative error between analytic and numeric gradients of a random
/// projection of `f`'s output, over sampled coordinates of every leaf.
pub fn max_rel_error(leaves: &[Tensor], f: &Program, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let weights = Tensor::uniform(&shape, 1.0, &mut rng);
    let loss = project(&mut g, out, &weights);
    g.check().expect("finite forward");
    let grads = g.backward(loss);

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[li])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.len()]);
        let coords: Vec<usize> = if leaf.len() <= PROBES {
            (0..leaf.len()).collect()
        } else {
            sample(&mut rng, leaf.len(), PROBES).into_vec()
        };
        for i in coords {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += EPS;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= EPS;
            let numeric = (eval(&plus, f, &weights) - eval(&minus, f, &weights)) / (2.0 * EPS);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Runs `instances` random cases; `make` returns the leaves and program of one.
pub fn check_many(
    name: &str,
    instances: usize,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Program<'static>>),
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + k as u64);
        let (leaves, f) = make(&mut rng);
        let e = max_rel_error(&leaves, f.as_ref(), rng.random());
        assert!(e.is_finite(), "{name}: non-finite error on instance {k}");
        worst = worst.max(e);
    }
    worst
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero, for kinks such as relu.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}
