//! Brute-force metric references: O(n^2) ranks and Neumaier compensated sums.

use wavenet_qoe::evaluation::{average_ranks, pcc, rmse, srocc};
use wavenet_qoe::rng::SplitMix64;

pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn ref_pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len() as f64;
    let mx = neumaier(x.iter().copied()) / n;
    let my = neumaier(y.iter().copied()) / n;
    let sxy = neumaier(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = neumaier(y.iter().map(|b| (b - my) * (b - my)));
    if x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]) {
        return (0.0, true);
    }
    (sxy / (sxx.sqrt() * syy.sqrt()), false)
}

/// Rank of each value: 1 + (number below) + (ties - 1) / 2.
pub fn ref_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn ref_rmse(x: &[f64], y: &[f64]) -> f64 {
    (neumaier(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b))) / x.len() as f64).sqrt()
}

pub fn sample(rng: &mut SplitMix64, case: usize) -> (Vec<f64>, Vec<f64>) {
    let n = 2 + rng.below(199) as usize;
    match case % 4 {
        // continuous, correlated
        0 => {
            let x: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 100.0)).collect();
            let y = x.iter().map(|v| 0.7 * v + rng.uniform(-30.0, 30.0)).collect();
            (x, y)
        }
        // tie-heavy: a handful of levels on both sides
        1 => {
            let levels = 1 + rng.below(4);
            let x = (0..n).map(|_| rng.below(levels) as f64).collect();
            let y = (0..n).map(|_| rng.below(3) as f64 * 10.0).collect();
            (x, y)
        }
        // QoE-like scale with duplicated values
        2 => {
            let x: Vec<f64> = (0..n).map(|_| (rng.uniform(0.0, 100.0) * 2.0).round() / 2.0).collect();
            let y = x.iter().map(|v| (v + rng.uniform(-5.0, 5.0)).round()).collect();
            (x, y)
        }
        // wide dynamic range
        _ => {
            let x = (0..n).map(|_| rng.uniform(-1.0, 1.0) * 10f64.powi(rng.below(6) as i32)).collect();
            let y = (0..n).map(|_| rng.uniform(-1e3, 1e3)).collect();
            (x, y)
        }
    }
}

/// Largest deviation of pcc, srocc and rmse from the references over
/// `pairs` seeded vector pairs, a description of the first mismatch in
/// rank or degenerate flag, and how many srocc cases were degenerate.
pub fn random_pairs(pairs: usize, seed: u64) -> (f64, Option<String>, usize) {
    let mut rng = SplitMix64::new(seed);
    let (mut worst, mut mismatch, mut degenerate) = (0.0f64, None, 0);
    for case in 0..pairs {
        let (x, y) = sample(&mut rng, case);

        let (p_ref, p_flag) = ref_pearson(&x, &y);
        let p = pcc(&x, &y).unwrap();
        worst = worst.max((p.value - p_ref).abs());

        let (rx, ry) = (ref_ranks(&x), ref_ranks(&y));
        let (s_ref, s_flag) = ref_pearson(&rx, &ry);
        let s = srocc(&x, &y).unwrap();
        worst = worst.max((s.value - s_ref).abs());
        degenerate += s_flag as usize;

        let r_ref = ref_rmse(&x, &y);
        worst = worst.max((rmse(&x, &y).unwrap() - r_ref).abs() / r_ref.max(1.0));

        if mismatch.is_none() && (p.degenerate != p_flag || s.degenerate != s_flag || average_ranks(&x) != rx) {
            mismatch = Some(format!("case {case}: ranks or degenerate flags differ"));
        }
    }
    (worst, mismatch, degenerate)
}

/// Worked examples with exact expected values; returns the ones that fail.
pub fn golden_failures() -> Vec<String> {
    let checks: [(&str, bool); 10] = [
        ("pcc linear", pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().value == 1.0),
        ("pcc negated", pcc(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap().value == -1.0),
        ("pcc 0.8", (pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().value - 0.8).abs() < 1e-15),
        ("srocc increasing", srocc(&[1.0, 2.0, 5.0, 9.0], &[0.1, 0.2, 0.3, 7.0]).unwrap().value == 1.0),
        ("srocc -0.5", (srocc(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap().value + 0.5).abs() < 1e-15),
        ("tied ranks", average_ranks(&[1.0, 1.0, 2.0]) == [1.5, 1.5, 3.0]),
        ("srocc ties", (srocc(&[1.0, 1.0, 2.0], &[5.0, 5.0, 9.0]).unwrap().value - 1.0).abs() < 1e-15),
        ("rmse equal", rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap() == 0.0),
        ("rmse sqrt2", rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap() == 2f64.sqrt()),
        ("rmse digits", format!("{:.5}", rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap()) == "1.41421"),
    ];
    checks.iter().filter(|c| !c.1).map(|c| c.0.to_string()).collect()
}
