#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod props;

use dasc_core::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let mut m = gaussian_matrix(rng, rows, cols, 1.0);
    for i in 0..rows {
        let r = m.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        r.iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Random row-stochastic matrix; `peak` sharpens rows toward a random class.
pub fn stochastic_rows(rng: &mut impl Rng, rows: usize, cols: usize, peak: f64) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let hot = rng.random_range(0..cols);
        let r = m.row_mut(i);
        for (c, v) in r.iter_mut().enumerate() {
            *v = rng.random_range(0.01..1.0) + if c == hot { peak * rng.random::<f64>() } else { 0.0 };
        }
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

pub struct GmmRecovery {
    pub seed: u64,
    /// Largest distance between a fitted and a generating mean.
    pub mean_error: f64,
    pub accuracy: f64,
    /// Fitted log-likelihood minus that of the generating parameters.
    pub likelihood_gain: f64,
}

/// Two clusters at 0.1 and 0.9 with sd 0.02, 100 points each.
pub fn gmm_recovery(seed: u64) -> GmmRecovery {
    use dasc_core::select::{fit_gmm_1d, Gmm1d, GmmConfig};
    use rand_distr::{Distribution, Normal};
    let mut r = rng(0x6a3 ^ seed);
    let mut values = Vec::new();
    let mut high = Vec::new();
    for (mean, is_high) in [(0.1, false), (0.9, true)] {
        let d = Normal::new(mean, 0.02).unwrap();
        for _ in 0..100 {
            values.push(d.sample(&mut r));
            high.push(is_high);
        }
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut r);
    let values: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let high: Vec<bool> = order.iter().map(|&i| high[i]).collect();

    let fit = fit_gmm_1d(&values, &GmmConfig::default());
    let hi = fit.high_component();
    let lo = 1 - hi;
    let mean_error = (fit.means[lo] - 0.1).abs().max((fit.means[hi] - 0.9).abs());
    let correct = values
        .iter()
        .zip(&high)
        .filter(|(&v, &h)| (fit.posterior(v, hi) > 0.5) == h)
        .count();
    let truth = Gmm1d {
        weights: [0.5, 0.5],
        means: [0.1, 0.9],
        stds: [0.02, 0.02],
        log_likelihood: 0.0,
        history: Vec::new(),
        degenerate: false,
    };
    GmmRecovery {
        seed,
        mean_error,
        accuracy: correct as f64 / values.len() as f64,
        likelihood_gain: fit.log_likelihood_of(&values) - truth.log_likelihood_of(&values),
    }
}
