//! Seeded finite-difference cases for every differentiable primitive and for
//! a small end-to-end model. Each case returns the worst relative error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tadtr_core::model::{Ctx, ModelConfig, TadTr};
use tadtr_core::{Graph, RoiAlignSpec, Scalar, Tensor, Var};

use super::{max_grad_error, random, rel_err, rng, STEP};

/// Denominator floor, so entries whose true derivative is essentially zero
/// are compared absolutely.
pub const FLOOR: Scalar = 1e-6;

pub struct Case {
    pub group: &'static str,
    pub name: String,
    pub run: Box<dyn Fn(u64) -> Scalar>,
}

fn case(group: &'static str, name: impl Into<String>, run: impl Fn(u64) -> Scalar + 'static) -> Case {
    Case {
        group,
        name: name.into(),
        run: Box::new(run),
    }
}

fn dims(seed: u64) -> (usize, usize, usize, ChaCha8Rng) {
    let mut r = rng(seed);
    (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5), r)
}

/// Coordinates stay at least 1e-3 away from integers, where the
/// interpolation has kinks that central differences would straddle.
pub fn coords(r: &mut ChaCha8Rng, n: usize, lo: Scalar, hi: Scalar) -> Tensor {
    let data = (0..n)
        .map(|_| loop {
            let u: Scalar = r.gen_range(lo..hi);
            if (u - u.round()).abs() > 1e-3 {
                break u;
            }
        })
        .collect();
    Tensor::from_vec(data)
}

/// True when no sample position of the segment lies within 1e-3 of a frame
/// index, where linear interpolation is not differentiable.
pub fn clear_of_kinks(spec: RoiAlignSpec, rows: usize, center: Scalar, length: Scalar) -> bool {
    let scale = (rows - 1) as Scalar;
    (0..spec.bins).all(|b| {
        (0..spec.samples_per_bin).all(|s| {
            let frac = (b as Scalar + (s as Scalar + 0.5) / spec.samples_per_bin as Scalar) / spec.bins as Scalar;
            let u = (center + length * spec.expand * (frac - 0.5)) * scale;
            (u - u.round()).abs() > 1e-3
        })
    })
}

fn unary(name: &'static str, op: fn(&mut Graph, Var) -> Var, lo: Scalar, hi: Scalar) -> Case {
    case("unary", name, move |s| {
        let (m, n, _, mut r) = dims(s);
        let x = random(&mut r, &[m, n], lo, hi);
        max_grad_error(&[x], s, FLOOR, |g, v| op(g, v[0]))
    })
}

fn binary(name: &'static str, op: fn(&mut Graph, Var, Var) -> Var) -> Case {
    case("binary", name, move |s| {
        let (m, n, _, mut r) = dims(s);
        let a = random(&mut r, &[m, n], -2.0, 2.0);
        let b = random(&mut r, &[m, n], -2.0, 2.0);
        max_grad_error(&[a, b], s, FLOOR, |g, v| op(g, v[0], v[1]))
    })
}

/// Single-input shape op on a random `[m, n]` matrix.
fn reshaping(
    name: &'static str,
    build: fn(&mut ChaCha8Rng, usize, usize) -> Box<dyn Fn(&mut Graph, Var) -> Var>,
) -> Case {
    case("shape", name, move |s| {
        let (m, n, _, mut r) = dims(s);
        let x = random(&mut r, &[m, n], -1.0, 1.0);
        let op = build(&mut r, m, n);
        max_grad_error(&[x], s, FLOOR, |g, v| op(g, v[0]))
    })
}

pub fn primitive_cases() -> Vec<Case> {
    let mut cases = vec![
        case("matmul", "matmul", |s| {
            let (m, k, n, mut r) = dims(s);
            let a = random(&mut r, &[m, k], -1.0, 1.0);
            let b = random(&mut r, &[k, n], -1.0, 1.0);
            max_grad_error(&[a, b], s, FLOOR, |g, v| g.matmul(v[0], v[1]).unwrap())
        }),
        binary("add", |g, a, b| g.add(a, b).unwrap()),
        binary("sub", |g, a, b| g.sub(a, b).unwrap()),
        binary("mul", |g, a, b| g.mul(a, b).unwrap()),
        unary("scale", |g, x| g.scale(x, -1.7), -2.0, 2.0),
        unary("add_scalar", |g, x| g.add_scalar(x, 0.3), -2.0, 2.0),
        unary("relu", |g, x| g.relu(x), -2.0, 2.0),
        unary("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
        unary("inverse_sigmoid", |g, x| g.inverse_sigmoid(x), 0.05, 0.95),
        unary("log", |g, x| g.log(x), 0.2, 3.0),
        unary("abs", |g, x| g.abs(x), -2.0, 2.0),
        case("add_bias", "add_bias", |s| {
            let (m, n, _, mut r) = dims(s);
            let x = random(&mut r, &[m, n], -1.0, 1.0);
            let b = random(&mut r, &[n], -1.0, 1.0);
            max_grad_error(&[x, b], s, FLOOR, |g, v| g.add_bias(v[0], v[1]).unwrap())
        }),
        case("layer_norm", "layer_norm", |s| {
            let (m, n, _, mut r) = dims(s);
            let x = random(&mut r, &[m, n + 1], -2.0, 2.0);
            let gamma = random(&mut r, &[n + 1], 0.5, 1.5);
            let beta = random(&mut r, &[n + 1], -0.5, 0.5);
            max_grad_error(&[x, gamma, beta], s, FLOOR, |g, v| {
                g.layer_norm(v[0], v[1], v[2]).unwrap()
            })
        }),
        case("shape", "concat", |s| {
            let (m, n, k, mut r) = dims(s);
            let axis = (s % 2) as usize;
            let (sa, sb) = if axis == 0 { ([m, n], [k, n]) } else { ([m, n], [m, k]) };
            let a = random(&mut r, &sa, -1.0, 1.0);
            let b = random(&mut r, &sb, -1.0, 1.0);
            max_grad_error(&[a, b], s, FLOOR, |g, v| g.concat(&[v[0], v[1]], axis).unwrap())
        }),
        case("shape", "narrow", |s| {
            let (m, n, _, mut r) = dims(s);
            let x = random(&mut r, &[m, n + 2], -1.0, 1.0);
            let start = r.gen_range(0..=n);
            max_grad_error(&[x], s, FLOOR, |g, v| g.narrow(v[0], 1, start, 2).unwrap())
        }),
        reshaping("reshape", |_, m, n| {
            Box::new(move |g, x| g.reshape(x, &[n, m]).unwrap())
        }),
        reshaping("transpose", |_, _, _| Box::new(|g, x| g.transpose(x).unwrap())),
        reshaping("sum", |_, _, _| Box::new(|g, x| g.sum(x))),
        reshaping("mean", |_, _, _| Box::new(|g, x| g.mean(x))),
        reshaping("gather", |r, m, n| {
            let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..m * n)).collect();
            Box::new(move |g, x| g.gather(x, &idx).unwrap())
        }),
        reshaping("select_rows", |r, m, _| {
            let rows: Vec<usize> = (0..3).map(|_| r.gen_range(0..m)).collect();
            Box::new(move |g, x| g.select_rows(x, &rows).unwrap())
        }),
        reshaping("shift_rows", |r, _, _| {
            let offset = r.gen_range(-2..=2);
            Box::new(move |g, x| g.shift_rows(x, offset).unwrap())
        }),
        case("shape", "repeat_cols", |s| {
            let (m, n, _, mut r) = dims(s);
            let x = random(&mut r, &[m], -1.0, 1.0);
            max_grad_error(&[x], s, FLOOR, |g, v| g.repeat_cols(v[0], n))
        }),
        case("interp_sample", "interp_sample", |s| {
            let (t, c, q, mut r) = dims(s);
            let x = random(&mut r, &[t + 1, c], -1.0, 1.0);
            // Reaches one frame past each end so zero padding is exercised.
            let u = coords(&mut r, q, -1.5, t as Scalar + 1.5);
            max_grad_error(&[x, u], s, FLOOR, |g, v| g.interp_sample(v[0], v[1]).unwrap())
        }),
        case("deform_sample", "deform_sample", |s| {
            let mut r = rng(s);
            let (t, heads, points, q) = (
                r.gen_range(2..6),
                r.gen_range(1..3),
                r.gen_range(1..3),
                r.gen_range(1..4),
            );
            let c = heads * r.gen_range(1..3);
            let value = random(&mut r, &[t, c], -1.0, 1.0);
            let u = coords(&mut r, q * heads * points, -1.0, t as Scalar)
                .reshaped(&[q, heads * points])
                .unwrap();
            let w = random(&mut r, &[q, heads * points], 0.0, 1.0);
            max_grad_error(&[value, u, w], s, FLOOR, |g, v| {
                g.deform_sample(v[0], v[1], v[2], heads).unwrap()
            })
        }),
        case("roi_align", "roi_align", |s| {
            let mut r = rng(s);
            let (t, c, n) = (r.gen_range(4..8), r.gen_range(1..4), r.gen_range(1..3));
            let x = random(&mut r, &[t, c], -1.0, 1.0);
            let spec = RoiAlignSpec {
                bins: r.gen_range(1..5),
                expand: 1.5,
                samples_per_bin: 2,
            };
            let seg: Vec<Scalar> = (0..n)
                .flat_map(|_| loop {
                    let (c, l) = (r.gen_range(0.2..0.8), r.gen_range(0.1..0.6));
                    if clear_of_kinks(spec, t, c, l) {
                        break [c, l];
                    }
                })
                .collect();
            let segments = Tensor::new(&[n, 2], seg).unwrap();
            max_grad_error(&[x, segments], s, FLOOR, |g, v| g.roi_align(v[0], v[1], spec).unwrap())
        }),
        case("segment_iou", "segment_iou", |s| {
            let mut r = rng(s);
            let n = r.gen_range(1..4);
            let mut seg = || -> Vec<Scalar> {
                (0..n)
                    .flat_map(|_| [r.gen_range(0.3..0.7), r.gen_range(0.2..0.5)])
                    .collect()
            };
            let a = Tensor::new(&[n, 2], seg()).unwrap();
            let b = Tensor::new(&[n, 2], seg()).unwrap();
            max_grad_error(&[a, b], s, FLOOR, |g, v| g.segment_iou(v[0], v[1]).unwrap())
        }),
        case("composite", "five-op composite", |s| {
            let (m, k, n, mut r) = dims(s);
            let x = random(&mut r, &[m, k], -1.0, 1.0);
            let w = random(&mut r, &[k, n], -1.0, 1.0);
            let b = random(&mut r, &[n], -1.0, 1.0);
            max_grad_error(&[x, w, b], s, FLOOR, |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add_bias(h, v[2]).unwrap();
                let h = g.sigmoid(h);
                let sq = g.mul(h, h).unwrap();
                g.softmax(sq, 1).unwrap()
            })
        }),
    ];
    for axis in 0..3 {
        cases.push(case("softmax", format!("softmax axis {axis}"), move |s| {
            let (a, b, c, mut r) = dims(s);
            let x = random(&mut r, &[a, b + 1, c], -3.0, 3.0);
            max_grad_error(&[x], s, FLOOR, |g, v| g.softmax(v[0], axis).unwrap())
        }));
        cases.push(case("softmax", format!("log_softmax axis {axis}"), move |s| {
            let (a, b, c, mut r) = dims(s);
            let x = random(&mut r, &[a, b + 1, c], -3.0, 3.0);
            max_grad_error(&[x], s, FLOOR, |g, v| g.log_softmax(v[0], axis).unwrap())
        }));
    }
    cases
}

/// T=8, C=16, M=2, K=2, N_q=3, one encoder and one decoder layer.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        hidden_dim: 16,
        ffn_dim: 24,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        points: 2,
        queries: 3,
        num_classes: 2,
        roi_bins: 4,
        ..ModelConfig::default()
    }
}

/// Sum of last-layer logits, with all weights taken from `model.params`.
fn toy_logit_sum(model: &TadTr, features: &Tensor) -> (Scalar, Vec<Tensor>) {
    let mut ctx = Ctx::new(&model.params, true);
    let x = ctx.graph.constant(features.clone());
    let vars = model.forward(&mut ctx, x).unwrap();
    let logits = vars.layers.last().unwrap().logits;
    let loss = ctx.graph.sum(logits);
    ctx.graph.backward(loss).unwrap();
    let mut grads = model.params.zeros_like();
    ctx.binder.accumulate_grads(&ctx.graph, &mut grads, 1.0);
    (ctx.graph.value(loss).item().unwrap(), grads)
}

/// Checks `sample` random parameter entries of the toy model; `None` checks all.
pub fn toy_check(seed: u64, sample: Option<usize>) -> Scalar {
    let mut model = TadTr::new(toy_config(), seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    // Freshly initialized encoder offsets are whole frames, which puts every
    // sample on an interpolation kink. Jitter all weights to a generic point.
    for entry in model.params.iter_mut() {
        for v in entry.value.data_mut() {
            *v += r.gen_range(-0.05..0.05);
        }
    }
    let features = random(&mut r, &[8, 5], -1.0, 1.0);
    let (_, grads) = toy_logit_sum(&model, &features);
    let all: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, g)| (0..g.numel()).map(move |j| (p, j)))
        .collect();
    let picked: Vec<(usize, usize)> = match sample {
        None => all,
        Some(k) => (0..k).map(|_| all[r.gen_range(0..all.len())]).collect(),
    };
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst: Scalar = 0.0;
    for (p, j) in picked {
        let mut probe = model.clone();
        let orig = probe.params.get(ids[p]).data()[j];
        probe.params.get_mut(ids[p]).data_mut()[j] = orig + STEP;
        let up = toy_logit_sum(&probe, &features).0;
        probe.params.get_mut(ids[p]).data_mut()[j] = orig - STEP;
        let down = toy_logit_sum(&probe, &features).0;
        let numeric = (up - down) / (2.0 * STEP);
        let e = rel_err(grads[p].data()[j], numeric, FLOOR);
        if e > 1e-3 && std::env::var("GRAD_DEBUG").is_ok() {
            eprintln!(
                "{} [{j}] analytic {:e} numeric {:e}",
                model.params.names()[p],
                grads[p].data()[j],
                numeric
            );
        }
        worst = worst.max(e);
    }
    worst
}
