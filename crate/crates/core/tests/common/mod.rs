#![allow(dead_code)]

pub mod grad_cases;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tadtr_core::{Graph, Scalar, Tensor, Var};

pub const STEP: Scalar = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: Scalar, hi: Scalar) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: Scalar, n: Scalar, floor: Scalar) -> Scalar {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Contracts `y` with fixed random weights so every output entry matters.
fn probe_loss(g: &mut Graph, y: Var, probe: &Tensor) -> Var {
    let w = g.constant(probe.clone());
    let y = if g.shape(y) == probe.shape() {
        y
    } else {
        g.reshape(y, probe.shape()).unwrap()
    };
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

/// Worst relative error between analytic and central-difference gradients
/// of `sum(probe ⊙ build(inputs))` over every input entry.
pub fn max_grad_error<F>(inputs: &[Tensor], seed: u64, floor: Scalar, build: F) -> Scalar
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &leaves);
    let mut r = rng(seed ^ 0xfeed);
    let probe = random(&mut r, g.shape(y), -1.0, 1.0);
    let loss = probe_loss(&mut g, y, &probe);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &leaves);
        let l = probe_loss(&mut g, y, &probe);
        g.value(l).item().unwrap()
    };
    let mut worst: Scalar = 0.0;
    let mut values = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = orig - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric, floor));
        }
    }
    worst
}
