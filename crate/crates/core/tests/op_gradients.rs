//! Central-difference checks of every differentiable tape op on 100 random
//! small instances each. Each op's output is contracted with a fixed random
//! tensor so that every output entry contributes to the checked scalar.

use lvqa_core::tensor::{grad_check, Tape, Tensor, Var};
use lvqa_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

const INSTANCES: usize = 100;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, so ReLU kinks are never straddled.
fn off_kink(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(vec![n], |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values spaced 0.1 apart in random order (no near-ties for max).
fn spaced(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(vec![n], v).unwrap()
}

fn part(t: &mut Tape, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let n = shape.iter().product();
    let s = t.slice(x, 0, start, n)?;
    t.reshape(s, shape.to_vec())
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// One random instance of the named op: the flat input and the function.
fn instance(op: &str, rng: &mut ChaCha8Rng) -> (Tensor, OpFn) {
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            let x = random(vec![m * k + k * n], rng);
            (x, Box::new(move |t, x| {
                let a = part(t, x, 0, &[m, k])?;
                let b = part(t, x, m * k, &[k, n])?;
                t.matmul(a, b)
            }))
        }
        "batch_matmul" => {
            let (b, m, k, n) = (dim(rng), dim(rng), dim(rng), dim(rng));
            let x = random(vec![b * (m * k + k * n)], rng);
            (x, Box::new(move |t, x| {
                let l = part(t, x, 0, &[b, m, k])?;
                let r = part(t, x, b * m * k, &[b, k, n])?;
                t.batch_matmul(l, r)
            }))
        }
        "conv2d" => {
            let (n, c, o) = (rng.gen_range(1..=2), dim(rng), dim(rng));
            let k = rng.gen_range(1..=3);
            let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=1));
            let (h, w) = (rng.gen_range(k..=5), rng.gen_range(k..=5));
            let (ni, nw) = (n * c * h * w, o * c * k * k);
            let x = random(vec![ni + nw + o], rng);
            (x, Box::new(move |t, x| {
                let inp = part(t, x, 0, &[n, c, h, w])?;
                let wt = part(t, x, ni, &[o, c, k, k])?;
                let b = part(t, x, ni + nw, &[o])?;
                t.conv2d(inp, wt, Some(b), stride, pad)
            }))
        }
        "add" | "mul" => {
            let shape = vec![dim(rng), dim(rng)];
            let n: usize = shape.iter().product();
            let x = random(vec![2 * n], rng);
            let mul = op == "mul";
            (x, Box::new(move |t, x| {
                let a = part(t, x, 0, &shape)?;
                let b = part(t, x, n, &shape)?;
                if mul {
                    t.mul(a, b)
                } else {
                    t.add(a, b)
                }
            }))
        }
        "scale" => {
            let k = rng.gen_range(-3.0..3.0);
            (random(vec![dim(rng) * 3], rng), Box::new(move |t, x| Ok(t.scale(x, k))))
        }
        "add_bias" => {
            let (r, n) = (dim(rng), dim(rng));
            let x = random(vec![r * n + n], rng);
            (x, Box::new(move |t, x| {
                let a = part(t, x, 0, &[r, n])?;
                let b = part(t, x, r * n, &[n])?;
                t.add_bias(a, b)
            }))
        }
        "concat" => {
            let axis = rng.gen_range(0..2);
            let (r, c) = (dim(rng), dim(rng));
            let extra = dim(rng);
            let second = if axis == 0 { [extra, c] } else { [r, extra] };
            let x = random(vec![r * c + second[0] * second[1]], rng);
            (x, Box::new(move |t, x| {
                let a = part(t, x, 0, &[r, c])?;
                let b = part(t, x, r * c, &second)?;
                t.concat(&[a, b], axis)
            }))
        }
        "slice" => {
            let (r, c) = (dim(rng) + 1, dim(rng) + 1);
            let axis = rng.gen_range(0..2);
            let extent = if axis == 0 { r } else { c };
            let start = rng.gen_range(0..extent);
            let len = rng.gen_range(1..=extent - start);
            (random(vec![r * c], rng), Box::new(move |t, x| {
                let a = t.reshape(x, vec![r, c])?;
                t.slice(a, axis, start, len)
            }))
        }
        "relu" => (off_kink(dim(rng) * 4, rng), Box::new(|t, x| Ok(t.relu(x)))),
        "sigmoid" => (random(vec![dim(rng) * 4], rng), Box::new(|t, x| Ok(t.sigmoid(x)))),
        "tanh" => (random(vec![dim(rng) * 4], rng), Box::new(|t, x| Ok(t.tanh(x)))),
        "softmax" => {
            let shape = vec![dim(rng), dim(rng) + 1, dim(rng)];
            let axis = rng.gen_range(0..3);
            let n = shape.iter().product();
            (random(vec![n], rng), Box::new(move |t, x| {
                let a = t.reshape(x, shape.clone())?;
                t.softmax(a, axis)
            }))
        }
        "sum" => (random(vec![dim(rng) * 3], rng), Box::new(|t, x| Ok(t.sum(x)))),
        "mean" => (random(vec![dim(rng) * 3], rng), Box::new(|t, x| Ok(t.mean(x)))),
        "sum_axis" | "mean_axis" => {
            let shape = vec![dim(rng), dim(rng), dim(rng)];
            let axis = rng.gen_range(0..3);
            let n = shape.iter().product();
            let mean = op == "mean_axis";
            (random(vec![n], rng), Box::new(move |t, x| {
                let a = t.reshape(x, shape.clone())?;
                if mean {
                    t.mean_axis(a, axis)
                } else {
                    t.sum_axis(a, axis)
                }
            }))
        }
        "dropout" => {
            let seed = rng.gen::<u64>();
            let p = rng.gen_range(0.1..0.6);
            (random(vec![dim(rng) * 4], rng), Box::new(move |t, x| {
                // a fresh generator per evaluation keeps the mask fixed
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                t.dropout(x, p, true, &mut r)
            }))
        }
        "max_pool" | "nearest_down" => {
            let (c, k) = (dim(rng), rng.gen_range(1..=2));
            let (h, w) = (k * rng.gen_range(1..=3), k * rng.gen_range(1..=3));
            let n = c * h * w;
            let pool = op == "max_pool";
            (spaced(n, rng), Box::new(move |t, x| {
                let a = t.reshape(x, vec![c, h, w])?;
                if pool {
                    t.max_pool(a, k)
                } else {
                    t.nearest_down(a, k)
                }
            }))
        }
        "reshape" => {
            let (a, b) = (dim(rng), dim(rng));
            (random(vec![a * b], rng), Box::new(move |t, x| t.reshape(x, vec![b, a])))
        }
        "broadcast_to" => {
            let (r, k, c) = (dim(rng), dim(rng), dim(rng));
            (random(vec![r * c], rng), Box::new(move |t, x| {
                let a = t.reshape(x, vec![r, 1, c])?;
                t.broadcast_to(a, vec![r, k, c])
            }))
        }
        "swap_axes" => {
            let shape = vec![dim(rng), dim(rng), dim(rng)];
            let (d0, d1) = (rng.gen_range(0..3), rng.gen_range(0..3));
            let n = shape.iter().product();
            (random(vec![n], rng), Box::new(move |t, x| {
                let a = t.reshape(x, shape.clone())?;
                t.swap_axes(a, d0, d1)
            }))
        }
        "gather_rows" => {
            let (v, e) = (dim(rng) + 1, dim(rng));
            let ids: Vec<usize> = (0..dim(rng) + 2).map(|_| rng.gen_range(0..v)).collect();
            (random(vec![v * e], rng), Box::new(move |t, x| {
                let table = t.reshape(x, vec![v, e])?;
                t.gather_rows(table, &ids)
            }))
        }
        "cross_entropy" => {
            let (b, a) = (dim(rng), dim(rng) + 1);
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..a)).collect();
            (random(vec![b * a], rng), Box::new(move |t, x| {
                let logits = t.reshape(x, vec![b, a])?;
                t.cross_entropy(logits, &targets)
            }))
        }
        other => panic!("unknown op {other}"),
    }
}

const OPS: [&str; 25] = [
    "matmul", "batch_matmul", "conv2d", "add", "mul", "scale", "add_bias", "concat", "slice", "relu", "sigmoid",
    "tanh", "softmax", "sum", "mean", "sum_axis", "mean_axis", "dropout", "max_pool", "nearest_down", "reshape",
    "broadcast_to", "swap_axes", "gather_rows", "cross_entropy",
];

fn worst_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (x, f) = instance(op, &mut rng);
        let mut probe = Tape::new();
        let v = probe.constant(x.clone());
        let shape = {
            let y = f(&mut probe, v).unwrap();
            probe.shape(y).to_vec()
        };
        let weights = random(shape, &mut rng);
        let loss = move |t: &mut Tape, x: Var| -> Result<Var> {
            let y = f(t, x)?;
            let w = t.constant(weights.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        };
        let report = grad_check(loss, &x, 1e-5, 1e-4).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    let mut failures = Vec::new();
    for (i, op) in OPS.iter().enumerate() {
        let e = worst_error(op, 1000 + i as u64);
        if !(e < 1e-4) {
            failures.push(format!("{op}: {e:.2e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}
