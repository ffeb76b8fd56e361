//! Invariant checks driven by proptest's runner so that the same suite can
//! back both `#[test]` functions and the acceptance report.

use dasc_core::centroid::{self, CentroidOptions, CentroidSet, CentroidStatus};
use dasc_core::data::{self, Dataset, GenSpec, NoiseMode, NoiseType, Split};
use dasc_core::eval::{self, ClassSetMode};
use dasc_core::losses::{self, ConfidenceGroups, MemoryBank};
use dasc_core::net::{Activation, ModelState, NetConfig};
use dasc_core::select::{self, GmmConfig};
use dasc_core::train::{run_training, RunOptions, TrainConfig, Trainer};
use dasc_core::Matrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::VecDeque;

use super::{gaussian_matrix, rng, stochastic_rows, unit_rows};

pub const CASES: u32 = 128;

pub type Outcome = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    let cfg = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Outcome {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

/// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
fn orthogonal(seed: u64, d: usize) -> Vec<Vec<f64>> {
    let m = gaussian_matrix(&mut rng(seed), d, d, 1.0);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = m.row(i).to_vec();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis
}

fn rotate(m: &Matrix<f64>, q: &[Vec<f64>]) -> Matrix<f64> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        for (j, qj) in q.iter().enumerate() {
            out.set(i, j, m.row(i).iter().zip(qj).map(|(a, b)| a * b).sum());
        }
    }
    out
}

pub fn contrastive_rotation_invariance() -> Outcome {
    run(CASES, (any::<u64>(), 2usize..24, 2usize..7, 2usize..5), |(seed, n, d, k)| {
        let mut r = rng(seed);
        let z = unit_rows(&mut r, n, d);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let high: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let groups = ConfidenceGroups::from_labels(&labels, &high, k);
        let pos = unit_rows(&mut r, n, d);
        let m = r.random_range(1..30);
        let keys = unit_rows(&mut r, m, d);
        let q = orthogonal(seed ^ 1, d);
        let tau_s = r.random_range(0.05..1.0);
        let tau_m = r.random_range(0.1..1.0);

        let a = losses::sbcl(&z, &groups, tau_s).unwrap().loss;
        let b = losses::sbcl(&rotate(&z, &q), &groups, tau_s).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-9, "sbcl {a} vs rotated {b}");

        let bank = MemoryBank::restore(64, d, &keys).unwrap();
        let bank_r = MemoryBank::restore(64, d, &rotate(&keys, &q)).unwrap();
        let a = losses::midl(&z, &pos, &bank, tau_m).unwrap().loss;
        let b = losses::midl(&rotate(&z, &q), &rotate(&pos, &q), &bank_r, tau_m).unwrap().loss;
        prop_assert!((a - b).abs() <= 1e-9, "midl {a} vs rotated {b}");
        Ok(())
    })
}

pub fn confident_subset_monotone_in_tau() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..60, 2usize..6, 0.0f64..1.0, 0.0f64..1.0), |(seed, n, k, t1, t2)| {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut r = rng(seed);
        let pc = stochastic_rows(&mut r, n, k, 6.0);
        let pb = stochastic_rows(&mut r, n, k, 6.0);
        let wide = centroid::confident_subset(&pc, &pb, lo);
        let narrow = centroid::confident_subset(&pc, &pb, hi);
        for (w, s) in wide.iter().zip(&narrow) {
            prop_assert!(!s || *w, "raising tau {lo} -> {hi} added a sample");
        }
        Ok(())
    })
}

pub fn temperature_weights_preserve_ranking() -> Outcome {
    run(CASES, (any::<u64>(), 2usize..8, 0.02f64..2.0, 0.5f64..0.99), |(seed, k, t, shrink)| {
        let mut r = rng(seed);
        let p = stochastic_rows(&mut r, 1, k, 4.0);
        let w = centroid::temperature_scale(&p, t).unwrap();
        let lower = centroid::temperature_scale(&p, t * shrink).unwrap();
        let row = p.row(0);
        for a in 0..k {
            for b in 0..k {
                if row[a] > row[b] {
                    prop_assert!(w.get(0, a) > w.get(0, b) || (w.get(0, a) - w.get(0, b)).abs() < 1e-15);
                }
            }
        }
        let max = |m: &Matrix<f64>| m.row(0).iter().copied().fold(f64::MIN, f64::max);
        let uniform = row.iter().all(|&v| (v - row[0]).abs() < 1e-12);
        if !uniform && max(&w) < 1.0 - 1e-12 {
            prop_assert!(max(&lower) > max(&w), "lowering tau_T did not sharpen");
        }
        Ok(())
    })
}

pub fn softmax_rows_sum_to_one() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..30, 1usize..8, 0.1f64..80.0), |(seed, n, k, scale)| {
        let mut r = rng(seed);
        let logits = gaussian_matrix(&mut r, n, k, scale);
        let z = unit_rows(&mut r, n, 3);
        let c = unit_rows(&mut r, k, 3);
        let set = CentroidSet {
            centroids: c,
            status: vec![CentroidStatus::Estimated; k],
            confident_mask: vec![true; n],
            tau_used: 0.0,
        };
        let gamma = centroid::assignment_probabilities(&z, &set).unwrap().gamma;
        let probs = stochastic_rows(&mut r, n, k, 2.0);
        let weights = centroid::temperature_scale(&probs, 0.1).unwrap();
        for m in [logits.softmax_rows(), gamma, weights] {
            for row in m.iter_rows() {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12, "row sums to {s}");
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        Ok(())
    })
}

pub fn bank_is_bounded_fifo() -> Outcome {
    let sizes = proptest::collection::vec(0usize..12, 1..12);
    run(CASES, (any::<u64>(), 1usize..20, 1usize..5, sizes), |(seed, cap, d, sizes)| {
        let mut r = rng(seed);
        let mut bank = MemoryBank::<f64>::new(cap, d);
        let mut expect: VecDeque<Vec<f64>> = VecDeque::new();
        for s in sizes {
            let batch = unit_rows(&mut r, s, d);
            bank.push(&batch).unwrap();
            for row in batch.iter_rows() {
                expect.push_back(row.to_vec());
                if expect.len() > cap {
                    expect.pop_front();
                }
            }
            prop_assert!(bank.len() <= cap);
            prop_assert_eq!(bank.len(), expect.len());
            for (got, want) in bank.keys().zip(&expect) {
                for (a, b) in got.iter().zip(want) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
        Ok(())
    })
}

pub fn auc_invariant_to_monotone_transform() -> Outcome {
    let scores = proptest::collection::vec((0u8..40, any::<bool>()), 2..80);
    run(CASES, (scores, 0.1f64..5.0, -3.0f64..3.0), |(pairs, a, b)| {
        // coarse scores so that ties occur
        let s: Vec<f64> = pairs.iter().map(|(v, _)| *v as f64 / 40.0).collect();
        let y: Vec<bool> = pairs.iter().map(|(_, p)| *p).collect();
        let moved: Vec<f64> = s.iter().map(|&v| a * (3.0 * v).exp() + v * v * v + b).collect();
        let before = eval::roc_auc(&s, &y);
        let after = eval::roc_auc(&moved, &y);
        match (before, after) {
            (Some(x), Some(z)) => prop_assert!((x - z).abs() < 1e-12, "{x} vs {z}"),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
        Ok(())
    })
}

pub fn regime_accuracies_recombine() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..9, 1usize..120), |(seed, k, n)| {
        let mut r = rng(seed);
        let probs = stochastic_rows(&mut r, n, k, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let counts: Vec<usize> = (0..k).map(|_| r.random_range(1..300)).collect();
        let sets = eval::class_sets(&counts, ClassSetMode::Thirds);
        let acc = eval::accuracy_breakdown(&probs, &labels, &sets);
        let mut weighted = 0.0;
        for (a, &size) in [acc.many, acc.medium, acc.few].iter().zip(&acc.regime_sizes) {
            if let Some(a) = a {
                prop_assert!((0.0..=1.0).contains(a));
                weighted += a * size as f64;
            } else {
                prop_assert_eq!(size, 0);
            }
        }
        prop_assert!((weighted / n as f64 - acc.overall).abs() <= 1e-9);
        prop_assert_eq!(&acc, &eval::accuracy_breakdown(&probs, &labels, &sets));
        Ok(())
    })
}

pub fn uniform_prior_balanced_softmax_is_ce() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..20, 1usize..7, 1usize..1000), |(seed, n, k, count)| {
        let mut r = rng(seed);
        let logits = gaussian_matrix(&mut r, n, k, 5.0);
        let targets = stochastic_rows(&mut r, n, k, 2.0);
        let ce = losses::cross_entropy(&logits, &targets).unwrap();
        let bs = losses::balanced_softmax(&logits, &targets, &vec![count; k]).unwrap();
        prop_assert!((ce.loss - bs.loss).abs() <= 1e-12);
        for (a, b) in ce.grad.as_slice().iter().zip(bs.grad.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn midl_monotone_in_negative_similarity() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..6, 2usize..6, 1usize..20, 0.001f64..1.0), |(seed, n, d, m, eps)| {
        let mut r = rng(seed);
        let q = unit_rows(&mut r, n, d);
        let p = unit_rows(&mut r, n, d);
        let keys = unit_rows(&mut r, m, d);
        let pick = r.random_range(0..m);
        let tau = r.random_range(0.1..1.0);
        // shifting a key along the query raises exactly one similarity
        let single_q = q.select_rows(&[0]);
        let single_p = p.select_rows(&[0]);
        let mut moved = keys.clone();
        for (v, &qv) in moved.row_mut(pick).iter_mut().zip(q.row(0)) {
            *v += eps * qv;
        }
        let before = losses::midl(&single_q, &single_p, &MemoryBank::restore(64, d, &keys).unwrap(), tau).unwrap();
        let after = losses::midl(&single_q, &single_p, &MemoryBank::restore(64, d, &moved).unwrap(), tau).unwrap();
        prop_assert!(after.loss >= before.loss - 1e-15, "{} < {}", after.loss, before.loss);
        Ok(())
    })
}

pub fn gmm_em_never_decreases() -> Outcome {
    let vals = proptest::collection::vec(0.0f64..1.0, 2..200);
    run(CASES, vals, |values| {
        let fit = select::fit_gmm_1d(&values, &GmmConfig::default());
        for w in fit.history.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10, "log-likelihood fell {} -> {}", w[0], w[1]);
        }
        Ok(())
    })
}

pub fn selection_is_suffix_and_deterministic() -> Outcome {
    run(CASES, (any::<u64>(), 2usize..5, 4usize..80), |(seed, k, n)| {
        let mut r = rng(seed);
        let gamma = eval_gamma(&mut r, n, k);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let cfg = GmmConfig {
            fixed_std: Some(0.1),
            ..GmmConfig::default()
        };
        let sel = select::select_clean(&gamma, &labels, &cfg).unwrap();
        prop_assert_eq!(&sel, &select::select_clean(&gamma, &labels, &cfg).unwrap());
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let mut order = idx.clone();
            order.sort_by(|&a, &b| sel.gamma_label[a].partial_cmp(&sel.gamma_label[b]).unwrap());
            // once a clean sample appears in ascending order, every later one is clean
            let mut seen_clean = false;
            for &i in &order {
                if sel.clean_mask[i] {
                    seen_clean = true;
                } else if seen_clean {
                    let v = sel.gamma_label[i];
                    let tie = order.iter().any(|&j| sel.clean_mask[j] && sel.gamma_label[j] == v);
                    prop_assert!(tie, "class {c}: noisy sample above a clean one");
                }
            }
        }
        Ok(())
    })
}

fn eval_gamma(r: &mut impl Rng, n: usize, k: usize) -> centroid::AssignmentMatrix<f64> {
    centroid::AssignmentMatrix {
        gamma: stochastic_rows(r, n, k, 4.0),
    }
}

pub fn longtail_counts_shape() -> Outcome {
    run(CASES, (2usize..30, 1usize..5000, 0.001f64..1.0), |(k, n_max, rho)| {
        let spec = GenSpec {
            num_classes: k,
            n_max,
            rho,
            ..GenSpec::default()
        };
        let counts = data::make_longtail_counts(&spec).unwrap();
        prop_assert_eq!(counts.len(), k);
        for w in counts.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert_eq!(counts[0], n_max);
        let last = counts[k - 1] as f64;
        prop_assert!((last - (rho * n_max as f64).max(1.0)).abs() <= 0.5 + 1e-9);
        Ok(())
    })
}

pub fn noise_keeps_true_labels() -> Outcome {
    run(CASES, (any::<u64>(), 2usize..8, 1usize..200, 0.0f64..0.95, any::<bool>()), |(seed, k, n, ratio, exact)| {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, n, 2, 1.0);
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let ds = Dataset::new(x, y.clone(), Some(y.clone()), k, Split::Train).unwrap();
        let mode = if exact { NoiseMode::ExactQuota } else { NoiseMode::Bernoulli };
        for t in [NoiseType::Symmetric, NoiseType::Asymmetric] {
            let noisy = data::inject_noise(&ds, t, ratio, seed, mode).unwrap();
            prop_assert_eq!(noisy.len(), n);
            prop_assert_eq!(noisy.true_labels().unwrap(), &y[..]);
            prop_assert_eq!(noisy.features(), ds.features());
        }
        Ok(())
    })
}

pub fn forward_is_pure() -> Outcome {
    run(CASES, (any::<u64>(), 1usize..10, any::<bool>()), |(seed, n, tanh)| {
        let cfg = NetConfig {
            d_in: 3,
            hidden: vec![6],
            d_embed: 5,
            d_proj: 4,
            num_classes: 3,
            activation: if tanh { Activation::Tanh } else { Activation::Relu },
        };
        let mut net = ModelState::<f64>::new(cfg, seed).unwrap();
        let x = gaussian_matrix(&mut rng(seed), n, 3, 2.0);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert_eq!(&a.projections, &b.projections);
        prop_assert_eq!(&a.logits_c, &b.logits_c);
        prop_assert_eq!(&a.logits_b, &b.logits_b);
        // all-zero weights give zero pre-normalisation projections; the guard keeps them finite
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let z = net.forward(&x).unwrap();
        prop_assert!(z.projections.is_finite());
        Ok(())
    })
}

pub fn estimator_ignores_label_order() -> Outcome {
    // The estimator has no label input; permuting rows permutes nothing but the sum order.
    run(CASES, (any::<u64>(), 2usize..40, 2usize..5), |(seed, n, k)| {
        let mut r = rng(seed);
        let z = unit_rows(&mut r, n, 3);
        let pc = stochastic_rows(&mut r, n, k, 6.0);
        let pb = stochastic_rows(&mut r, n, k, 6.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let opts = CentroidOptions::default();
        let a = centroid::estimate_centroids(&z, &pc, &pb, 0.0, &opts, None).unwrap();
        let b = centroid::estimate_centroids(&z.select_rows(&perm), &pc.select_rows(&perm), &pb.select_rows(&perm), 0.0, &opts, None)
            .unwrap();
        for (x, y) in a.centroids.as_slice().iter().zip(b.centroids.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        Ok(())
    })
}

fn canary_config(seed: u64) -> (TrainConfig, NetConfig) {
    let cfg = TrainConfig {
        epochs: 3,
        warmup: 1,
        sbcl_warmup: 0,
        batch_size: 16,
        bank_capacity: 32,
        ramp_epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    let net = NetConfig {
        d_in: 3,
        hidden: vec![8],
        d_embed: 6,
        d_proj: 4,
        num_classes: 3,
        activation: Activation::Relu,
    };
    (cfg, net)
}

/// Training with shuffled true labels must produce bit-identical parameters.
pub fn true_labels_do_not_leak() -> Outcome {
    run(CASES, any::<u64>(), |seed| {
        let spec = GenSpec {
            num_classes: 3,
            dim: 3,
            n_max: 24,
            rho: 0.5,
            noise_ratio: 0.3,
            seed,
            ..GenSpec::default()
        };
        let (train, test) = data::generate_benchmark::<f64>(&spec, 4).unwrap();
        let mut shuffled = train.true_labels().unwrap().to_vec();
        shuffled.shuffle(&mut rng(seed ^ 0xca7));
        let decoy = train.with_true_labels(Some(shuffled)).unwrap();
        let (cfg, net) = canary_config(seed);
        let mut params = Vec::new();
        for ds in [&train, &decoy] {
            let mut t = Trainer::new(cfg.clone(), net.clone(), &ds.train_view()).unwrap();
            run_training(&mut t, ds, &test, &RunOptions::default()).unwrap();
            let (a, b) = t.nets();
            params.push((a.params().to_vec(), b.params().to_vec()));
        }
        prop_assert!(params[0] == params[1], "parameters depend on true labels");
        Ok(())
    })
}

pub fn all() -> Vec<(&'static str, Outcome)> {
    vec![
        ("contrastive rotation invariance", contrastive_rotation_invariance()),
        ("confident subset monotone in tau", confident_subset_monotone_in_tau()),
        ("temperature weights keep ranking", temperature_weights_preserve_ranking()),
        ("softmax rows sum to one", softmax_rows_sum_to_one()),
        ("bank is a bounded FIFO", bank_is_bounded_fifo()),
        ("AUC invariant to monotone transforms", auc_invariant_to_monotone_transform()),
        ("regime accuracies recombine", regime_accuracies_recombine()),
        ("uniform-prior balanced softmax is CE", uniform_prior_balanced_softmax_is_ce()),
        ("MIDL monotone in negative similarity", midl_monotone_in_negative_similarity()),
        ("EM never decreases likelihood", gmm_em_never_decreases()),
        ("selection is a suffix and deterministic", selection_is_suffix_and_deterministic()),
        ("long-tail counts shape", longtail_counts_shape()),
        ("noise keeps true labels", noise_keeps_true_labels()),
        ("forward is pure", forward_is_pure()),
        ("centroids ignore row order", estimator_ignores_label_order()),
        ("true-label canary", true_labels_do_not_leak()),
    ]
}
