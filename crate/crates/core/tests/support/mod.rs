//! Naive nested-loop references and random instance builders shared by the
//! integration tests. Nothing here calls the vectorised code paths.

#![allow(dead_code)]

use can_core::{KernelSpec, LabeledBatch, Matrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `Σ_m w_m exp(−‖x − y‖² / (2σ²_m))`, one scalar at a time.
pub fn naive_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    let mut d2 = 0.0;
    for k in 0..x.len() {
        d2 += (x[k] - y[k]) * (x[k] - y[k]);
    }
    let mut acc = 0.0;
    for (s, w) in spec.bandwidths().iter().zip(spec.weights()) {
        acc += w * (-d2 / (2.0 * s)).exp();
    }
    acc
}

fn row(m: &Matrix, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

pub fn naive_mmd(spec: &KernelSpec, s: &Matrix, t: &Matrix) -> f64 {
    let (ns, nt) = (s.nrows(), t.nrows());
    let mut ss = 0.0;
    for i in 0..ns {
        for j in 0..ns {
            ss += naive_kernel(spec, &row(s, i), &row(s, j));
        }
    }
    let mut tt = 0.0;
    for i in 0..nt {
        for j in 0..nt {
            tt += naive_kernel(spec, &row(t, i), &row(t, j));
        }
    }
    let mut st = 0.0;
    for i in 0..ns {
        for j in 0..nt {
            st += naive_kernel(spec, &row(s, i), &row(t, j));
        }
    }
    ss / (ns * ns) as f64 + tt / (nt * nt) as f64 - 2.0 * st / (ns * nt) as f64
}

fn mask(y: usize, y2: usize, c: usize, c2: usize) -> f64 {
    if y == c && y2 == c2 {
        1.0
    } else {
        0.0
    }
}

/// Class-conditional discrepancy written with label masks over the whole batch.
pub fn naive_pair(spec: &KernelSpec, s: &Matrix, ys: &[usize], t: &Matrix, yt: &[usize], c1: usize, c2: usize) -> f64 {
    let (mut n1, mut d1) = (0.0, 0.0);
    for i in 0..s.nrows() {
        for j in 0..s.nrows() {
            let m = mask(ys[i], ys[j], c1, c1);
            n1 += m * naive_kernel(spec, &row(s, i), &row(s, j));
            d1 += m;
        }
    }
    let (mut n2, mut d2) = (0.0, 0.0);
    for i in 0..t.nrows() {
        for j in 0..t.nrows() {
            let m = mask(yt[i], yt[j], c2, c2);
            n2 += m * naive_kernel(spec, &row(t, i), &row(t, j));
            d2 += m;
        }
    }
    let (mut n3, mut d3) = (0.0, 0.0);
    for i in 0..s.nrows() {
        for j in 0..t.nrows() {
            let m = mask(ys[i], yt[j], c1, c2);
            n3 += m * naive_kernel(spec, &row(s, i), &row(t, j));
            d3 += m;
        }
    }
    n1 / d1 + n2 / d2 - 2.0 * n3 / d3
}

/// Multi-layer CDD: per layer, mean intra-class discrepancy minus mean over ordered distinct pairs.
pub fn naive_cdd(specs: &[KernelSpec], b: &LabeledBatch) -> f64 {
    let classes = &b.class_set;
    let m = classes.len() as f64;
    let mut total = 0.0;
    for (l, spec) in specs.iter().enumerate() {
        let (s, t) = (&b.source_features[l], &b.target_features[l]);
        let mut intra = 0.0;
        for &c in classes {
            intra += naive_pair(spec, s, &b.source_labels, t, &b.target_labels, c, c);
        }
        let mut inter = 0.0;
        for &c1 in classes {
            for &c2 in classes {
                if c1 != c2 {
                    inter += naive_pair(spec, s, &b.source_labels, t, &b.target_labels, c1, c2);
                }
            }
        }
        total += intra / m;
        if classes.len() > 1 {
            total -= inter / (m * (m - 1.0));
        }
    }
    total
}

/// Labels covering every class in `classes` at least once, in shuffled order.
pub fn covering_labels(rng: &mut ChaCha8Rng, n: usize, classes: &[usize]) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n)
        .map(|i| classes.get(i).copied().unwrap_or_else(|| classes[rng.random_range(0..classes.len())]))
        .collect();
    for i in (1..n).rev() {
        y.swap(i, rng.random_range(0..=i));
    }
    y
}

/// Random valid batch: `n_s, n_t ≤ 8`, `M' ≤ 3` classes drawn from `0..5`, `d ≤ 4`, `layers` taps.
pub fn random_batch(rng: &mut ChaCha8Rng, layers: usize) -> LabeledBatch {
    let m = rng.random_range(1..=3);
    let mut classes: Vec<usize> = (0..5).collect();
    for i in (1..5).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    classes.truncate(m);
    classes.sort_unstable();
    let ns = rng.random_range(m..=8);
    let nt = rng.random_range(m..=8);
    let ys = covering_labels(rng, ns, &classes);
    let yt = covering_labels(rng, nt, &classes);
    let mut sf = Vec::new();
    let mut tf = Vec::new();
    for _ in 0..layers {
        let d = rng.random_range(1..=4);
        sf.push(uniform(rng, ns, d));
        tf.push(uniform(rng, nt, d));
    }
    LabeledBatch::new(sf, tf, ys, yt, classes).expect("valid by construction")
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> KernelSpec {
    let k = rng.random_range(1..=3);
    let bw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..3.0)).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = w.iter().sum();
    let mut w: Vec<f64> = w.iter().map(|v| v / sum).collect();
    // Absorb rounding so the weights sum to one exactly enough for validation.
    let rest: f64 = w[1..].iter().sum();
    w[0] = 1.0 - rest;
    KernelSpec::new(bw, w).expect("positive bandwidths")
}
