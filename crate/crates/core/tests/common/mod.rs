//! Shared test oracles: central finite differences and a naive feature recount.
#![allow(dead_code)]

pub mod gradcheck;
pub mod metric_ref;

use wavenet_qoe::data::{Sample, SessionTrace};
use wavenet_qoe::nn::{Parameterized, Tensor};
use wavenet_qoe::rng::SplitMix64;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

pub fn range(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

/// `|a - n| / max(|a|, |n|, 1e-8)`, maximized over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences with step `1e-5 * max(1, |x|)`. `eval(i, v)` must
/// return the loss with entry `i` set to `v` and leave the entry as it was.
pub fn numeric_grad(x0: &[f64], mut eval: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    x0.iter()
        .enumerate()
        .map(|(i, &x)| {
            let h = 1e-5 * x.abs().max(1.0);
            let (xp, xm) = (x + h, x - h);
            (eval(i, xp) - eval(i, xm)) / (xp - xm)
        })
        .collect()
}

/// Numeric gradient of a single tensor reached through `slot`.
pub fn tensor_grad<T>(
    owner: &mut T,
    slot: impl Fn(&mut T) -> &mut Tensor,
    loss: impl Fn(&T) -> f64,
) -> Vec<f64> {
    let x0 = slot(owner).data().to_vec();
    numeric_grad(&x0, |i, v| {
        slot(owner).data_mut()[i] = v;
        let l = loss(owner);
        slot(owner).data_mut()[i] = x0[i];
        l
    })
}

/// Numeric gradient of every parameter of `model`, in `params()` order.
pub fn param_grads<M: Parameterized>(model: &mut M, loss: impl Fn(&M) -> f64) -> Vec<Vec<f64>> {
    let count = model.params().len();
    (0..count)
        .map(|p| tensor_grad(model, |m| m.params_mut().swap_remove(p), &loss))
        .collect()
}

/// Numeric gradient of `samples` seeded random parameter entries, as
/// `(tensor, entry, value)`.
pub fn sampled_param_grads<M: Parameterized>(
    model: &mut M,
    loss: impl Fn(&M) -> f64,
    samples: usize,
    rng: &mut SplitMix64,
) -> Vec<(usize, usize, f64)> {
    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    (0..samples)
        .map(|_| {
            let mut flat = rng.below(total as u64) as usize;
            let mut p = 0;
            while flat >= sizes[p] {
                flat -= sizes[p];
                p += 1;
            }
            let x0 = [model.params()[p].data()[flat]];
            let g = numeric_grad(&x0, |_, v| {
                model.params_mut()[p].data_mut()[flat] = v;
                let l = loss(model);
                model.params_mut()[p].data_mut()[flat] = x0[0];
                l
            });
            (p, flat, g[0])
        })
        .collect()
}

/// Redraws every parameter uniformly from [-1, 1]. Zero-initialized biases
/// can park a ReLU exactly on its kink, where finite differences are one-sided.
pub fn randomize<M: Parameterized + ?Sized>(model: &mut M, rng: &mut SplitMix64) {
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
    }
}

/// Redraws only the biases, from [-0.1, 0.1].
pub fn randomize_biases<M: Parameterized + ?Sized>(model: &mut M, rng: &mut SplitMix64) {
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            p.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.1, 0.1));
        }
    }
}

/// Worst relative error over all parameter tensors, with the name of the worst one.
pub fn worst_param(names: &[String], analytic: &[Tensor], numeric: &[Vec<f64>]) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, a), n) in names.iter().zip(analytic).zip(numeric) {
        let e = max_rel_err(a.data(), n);
        if e >= worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(nr, tr)` at every second, recounted from scratch for each `t`.
pub fn naive_rebuffer_features(pi: &[bool]) -> Vec<(f64, f64)> {
    (0..pi.len())
        .map(|t| {
            let events = (0..=t).filter(|&s| pi[s] && (s == 0 || !pi[s - 1])).count();
            let tr = if pi[t] {
                0
            } else {
                match (0..t).rev().find(|&s| pi[s]) {
                    Some(s) => t - s,
                    None => t + 1,
                }
            };
            (events as f64, tr as f64)
        })
        .collect()
}

pub fn random_pi(rng: &mut SplitMix64, len: usize) -> Vec<bool> {
    // mix of sparse and bursty sequences
    let p = rng.uniform(0.0, 1.0);
    let stick = rng.uniform(0.0, 0.95);
    let mut prev = false;
    (0..len)
        .map(|_| {
            prev = if rng.bernoulli(stick) { prev } else { rng.bernoulli(p) };
            prev
        })
        .collect()
}

pub fn trace_from(id: &str, stsq: &[f64], pi: &[bool], qoe: Option<&[f64]>) -> SessionTrace {
    let samples = stsq
        .iter()
        .zip(pi)
        .enumerate()
        .map(|(t, (&s, &p))| Sample {
            t: t as u32,
            stsq: s,
            pi: p,
            qoe: qoe.map(|q| q[t]),
        })
        .collect();
    SessionTrace::new(id, samples)
}
