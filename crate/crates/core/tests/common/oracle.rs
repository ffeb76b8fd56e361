//! Literal double-loop reimplementations, written from the formulas without
//! the library's numerics (no log-sum-exp shifting, no shared helpers).

use dasc_core::centroid::{self, CentroidOptions, CentroidStatus};
use dasc_core::losses::{self, ConfidenceGroups, MemoryBank};
use dasc_core::Matrix;
use rand::Rng;

use super::{rng, stochastic_rows, unit_rows};

pub const TOL: f64 = 1e-9;

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn max_of(a: &[f64]) -> f64 {
    let mut m = a[0];
    for &v in a {
        if v > m {
            m = v;
        }
    }
    m
}

/// Weighted class centroids over the confident subset, temperature-scaled weights.
pub fn naive_centroids(z: &[Vec<f64>], pc: &[Vec<f64>], pb: &[Vec<f64>], tau: f64, tau_t: f64) -> Vec<Option<Vec<f64>>> {
    let k = pc[0].len();
    let d = z[0].len();
    let mut out = Vec::new();
    for c in 0..k {
        let mut sum = vec![0.0; d];
        for i in 0..z.len() {
            if !(max_of(&pc[i]) > tau && max_of(&pb[i]) > tau) {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..k {
                denom += (pc[i][j] / tau_t).exp();
            }
            let w = (pc[i][c] / tau_t).exp() / denom;
            for t in 0..d {
                sum[t] += w * z[i][t];
            }
        }
        let norm = dot(&sum, &sum).sqrt();
        out.push(if norm > 1e-12 { Some(sum.iter().map(|v| v / norm).collect()) } else { None });
    }
    out
}

pub fn naive_assignment(z: &[Vec<f64>], c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    z.iter()
        .map(|zi| {
            let mut denom = 0.0;
            for ck in c {
                denom += dot(zi, ck).exp();
            }
            c.iter().map(|ck| dot(zi, ck).exp() / denom).collect()
        })
        .collect()
}

pub fn naive_sbcl(z: &[Vec<f64>], labels: &[usize], high: &[bool], k: usize, t: f64) -> f64 {
    let mut size = vec![0usize; k];
    for i in 0..z.len() {
        if high[i] {
            size[labels[i]] += 1;
        }
    }
    let mut total = 0.0;
    let mut n_high = 0;
    for i in 0..z.len() {
        if !high[i] {
            continue;
        }
        n_high += 1;
        let mut denom = 0.0;
        for j in 0..k {
            if size[j] == 0 {
                continue;
            }
            let mut inner = 0.0;
            for m in 0..z.len() {
                if high[m] && labels[m] == j {
                    inner += (dot(&z[i], &z[m]) / t).exp();
                }
            }
            denom += inner / size[j] as f64;
        }
        let y = labels[i];
        let mut acc = 0.0;
        for p in 0..z.len() {
            if p != i && high[p] && labels[p] == y {
                acc += ((dot(&z[i], &z[p]) / t).exp() / denom).ln();
            }
        }
        total += -acc / size[y] as f64;
    }
    if n_high == 0 {
        0.0
    } else {
        total / n_high as f64
    }
}

pub fn naive_midl(q: &[Vec<f64>], p: &[Vec<f64>], bank: &[Vec<f64>], t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        let pos = (dot(&q[i], &p[i]) / t).exp();
        let mut neg = 0.0;
        for m in bank {
            neg += (dot(&q[i], m) / t).exp();
        }
        total += -(pos / (pos + neg)).ln();
    }
    total / q.len() as f64
}

pub fn naive_balanced_softmax(logits: &[Vec<f64>], targets: &[Vec<f64>], prior: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.len() {
        let mut denom = 0.0;
        for j in 0..prior.len() {
            denom += prior[j] as f64 * logits[i][j].exp();
        }
        for c in 0..prior.len() {
            let p = prior[c] as f64 * logits[i][c].exp() / denom;
            total -= targets[i][c] * p.ln();
        }
    }
    total / logits.len() as f64
}

/// `(name, largest absolute deviation over all instances)`.
pub fn suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 5];
    for seed in 0..instances {
        let mut r = rng(0x0_7ac1e ^ seed);
        let n = r.random_range(4..=50);
        let k = r.random_range(2..=5);
        let d = r.random_range(2..=6);
        let z = unit_rows(&mut r, n, d);
        let pc = stochastic_rows(&mut r, n, k, 8.0);
        let pb = stochastic_rows(&mut r, n, k, 8.0);
        let tau = r.random_range(0.0..0.6);
        let tau_t = r.random_range(0.05..1.0);

        let opts = CentroidOptions {
            tau_t,
            ..CentroidOptions::default()
        };
        let expect = naive_centroids(&rows(&z), &rows(&pc), &rows(&pb), tau, tau_t);
        if let Ok(set) = centroid::estimate_centroids(&z, &pc, &pb, tau, &opts, None) {
            for (c, e) in expect.iter().enumerate() {
                match (set.status[c], e) {
                    (CentroidStatus::Estimated, Some(v)) => {
                        for (a, b) in set.centroids.row(c).iter().zip(v) {
                            worst[0] = worst[0].max((a - b).abs());
                        }
                    }
                    (CentroidStatus::Undefined, None) => {}
                    _ => worst[0] = f64::INFINITY,
                }
            }
        } else if expect.iter().any(Option::is_some) {
            worst[0] = f64::INFINITY;
        }

        let cents = unit_rows(&mut r, k, d);
        let set = centroid::CentroidSet {
            centroids: cents.clone(),
            status: vec![CentroidStatus::Estimated; k],
            confident_mask: vec![true; n],
            tau_used: tau,
        };
        let gamma = centroid::assignment_probabilities(&z, &set).unwrap().gamma;
        for (g, e) in rows(&gamma).iter().zip(naive_assignment(&rows(&z), &rows(&cents))) {
            for (a, b) in g.iter().zip(&e) {
                worst[1] = worst[1].max((a - b).abs());
            }
        }

        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let high: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
        let tau_s = r.random_range(0.1..1.0);
        let groups = ConfidenceGroups::from_labels(&labels, &high, k);
        let got = losses::sbcl(&z, &groups, tau_s).unwrap().loss;
        worst[2] = worst[2].max((got - naive_sbcl(&rows(&z), &labels, &high, k, tau_s)).abs());

        let m = r.random_range(1..=40);
        let keys = unit_rows(&mut r, m, d);
        let bank = MemoryBank::restore(64, d, &keys).unwrap();
        let pos = unit_rows(&mut r, n, d);
        let tau_m = r.random_range(0.2..1.0);
        let got = losses::midl(&z, &pos, &bank, tau_m).unwrap().loss;
        worst[3] = worst[3].max((got - naive_midl(&rows(&z), &rows(&pos), &rows(&keys), tau_m)).abs());

        let logits = super::gaussian_matrix(&mut r, n, k, 3.0);
        let targets = stochastic_rows(&mut r, n, k, 2.0);
        let prior: Vec<usize> = (0..k).map(|_| r.random_range(1..500)).collect();
        let got = losses::balanced_softmax(&logits, &targets, &prior).unwrap().loss;
        worst[4] = worst[4].max((got - naive_balanced_softmax(&rows(&logits), &rows(&targets), &prior)).abs());
    }
    vec![
        ("estimate_centroids", worst[0]),
        ("assignment_probabilities", worst[1]),
        ("sbcl", worst[2]),
        ("midl", worst[3]),
        ("balanced_softmax", worst[4]),
    ]
}
