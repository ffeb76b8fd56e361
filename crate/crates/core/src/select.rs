//! Clean/noisy partition from a two-component 1-D Gaussian mixture fitted,
//! per class, to the assignment probabilities of the samples carrying that
//! class as their (noisy) label. The higher-mean component is "clean".

use std::io::Write;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::centroid::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    pub std_floor: f64,
    /// Hold both standard deviations at this value instead of fitting them.
    pub fixed_std: Option<f64>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            std_floor: 1e-4,
            fixed_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm1d<T> {
    pub weights: [T; 2],
    pub means: [T; 2],
    pub stds: [T; 2],
    pub log_likelihood: T,
    /// Log-likelihood after initialisation and after every EM iteration.
    pub history: Vec<T>,
    /// Fewer than two values, or both components coincide.
    pub degenerate: bool,
}

fn log_normal<T: Scalar>(x: T, mean: T, std: T) -> T {
    let z = (x - mean) / std;
    -(T::lit(0.5) * z * z) - std.ln() - T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

impl<T: Scalar> Gmm1d<T> {
    fn component_logs(&self, x: T) -> [T; 2] {
        [0, 1].map(|j| self.weights[j].ln() + log_normal(x, self.means[j], self.stds[j]))
    }

    /// Posterior responsibility of component `j` for `x`.
    pub fn posterior(&self, x: T, j: usize) -> T {
        let l = self.component_logs(x);
        let m = l[0].max(l[1]);
        let e0 = (l[0] - m).exp();
        let e1 = (l[1] - m).exp();
        let e = if j == 0 { e0 } else { e1 };
        e / (e0 + e1)
    }

    pub fn log_likelihood_of(&self, values: &[T]) -> T {
        values
            .iter()
            .map(|&x| {
                let l = self.component_logs(x);
                crate::scalar::log_sum_exp(&l)
            })
            .sum()
    }

    /// Index of the component with the larger mean (ties resolve to 1).
    pub fn high_component(&self) -> usize {
        usize::from(self.means[1] >= self.means[0])
    }
}

/// Linear-interpolation percentile of sorted data.
fn percentile<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// EM for a two-component mixture, initialised at the 25th/75th percentiles
/// with equal weights and the pooled standard deviation.
pub fn fit_gmm_1d<T: Scalar>(values: &[T], cfg: &GmmConfig) -> Gmm1d<T> {
    let floor = T::lit(cfg.std_floor);
    if values.len() < 2 {
        let m = values.first().copied().unwrap_or(T::zero());
        let s = cfg.fixed_std.map_or(floor, T::lit);
        let mut g = Gmm1d {
            weights: [T::lit(0.5); 2],
            means: [m; 2],
            stds: [s; 2],
            log_likelihood: T::zero(),
            history: Vec::new(),
            degenerate: true,
        };
        g.log_likelihood = g.log_likelihood_of(values);
        g.history.push(g.log_likelihood);
        return g;
    }
    let n = T::from_usize_lossy(values.len());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let pooled = cfg.fixed_std.map_or(var.sqrt().max(floor), T::lit);
    let mut g = Gmm1d {
        weights: [T::lit(0.5); 2],
        means: [percentile(&sorted, 0.25), percentile(&sorted, 0.75)],
        stds: [pooled; 2],
        log_likelihood: T::zero(),
        history: Vec::new(),
        degenerate: false,
    };
    g.log_likelihood = g.log_likelihood_of(values);
    g.history.push(g.log_likelihood);

    let mut resp = vec![T::zero(); values.len()];
    for _ in 0..cfg.max_iter {
        for (r, &x) in resp.iter_mut().zip(values) {
            *r = g.posterior(x, 1);
        }
        let n1: T = resp.iter().copied().sum();
        let n0 = n - n1;
        let mut next = g.clone();
        for (j, nj) in [(0usize, n0), (1usize, n1)] {
            if !(nj > T::lit(1e-300)) {
                continue;
            }
            let w = |r: T| if j == 1 { r } else { T::one() - r };
            let mu = values.iter().zip(&resp).map(|(&x, &r)| w(r) * x).sum::<T>() / nj;
            next.means[j] = mu;
            next.weights[j] = nj / n;
            next.stds[j] = match cfg.fixed_std {
                Some(s) => T::lit(s),
                None => {
                    let v = values
                        .iter()
                        .zip(&resp)
                        .map(|(&x, &r)| w(r) * (x - mu) * (x - mu))
                        .sum::<T>()
                        / nj;
                    v.sqrt().max(floor)
                }
            };
        }
        // keep the weights exactly complementary
        next.weights[1] = T::one() - next.weights[0];
        let ll = next.log_likelihood_of(values);
        let gain = ll - g.log_likelihood;
        next.log_likelihood = ll;
        g = next;
        g.history.push(ll);
        if gain < T::lit(cfg.tol) {
            break;
        }
    }
    g.degenerate = g.means[0] == g.means[1] && g.stds[0] == g.stds[1];
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFitStatus {
    Fitted,
    /// Fewer than two labelled samples; all marked clean.
    TooFew,
    /// Both components coincide; all marked clean.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGmm<T> {
    pub fit: Gmm1d<T>,
    pub clean_component: usize,
    pub status: ClassFitStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T> {
    pub clean_mask: Vec<bool>,
    pub clean_posterior: Vec<T>,
    /// `gamma[i, noisy_label(i)]`, the value each sample was scored on.
    pub gamma_label: Vec<T>,
    pub gmm: Vec<ClassGmm<T>>,
    pub per_class_clean_counts: Vec<usize>,
}

impl<T: Scalar> SelectionResult<T> {
    pub fn clean_count(&self) -> usize {
        self.clean_mask.iter().filter(|&&c| c).count()
    }

    pub fn clean_indices(&self) -> Vec<usize> {
        (0..self.clean_mask.len()).filter(|&i| self.clean_mask[i]).collect()
    }

    pub fn noisy_indices(&self) -> Vec<usize> {
        (0..self.clean_mask.len()).filter(|&i| !self.clean_mask[i]).collect()
    }

    /// Clean counts floored at one, the class prior of the balanced softmax.
    pub fn class_prior(&self) -> Vec<usize> {
        self.per_class_clean_counts.iter().map(|&c| c.max(1)).collect()
    }

    /// Everything marked clean; used before selection starts.
    pub fn all_clean(noisy_labels: &[usize], num_classes: usize) -> Self {
        let n = noisy_labels.len();
        Self {
            clean_mask: vec![true; n],
            clean_posterior: vec![T::one(); n],
            gamma_label: vec![T::one(); n],
            gmm: Vec::new(),
            per_class_clean_counts: crate::data::count_labels(noisy_labels, num_classes),
        }
    }
}

pub fn select_clean<T: Scalar>(
    gamma: &AssignmentMatrix<T>,
    noisy_labels: &[usize],
    cfg: &GmmConfig,
) -> Result<SelectionResult<T>> {
    let n = gamma.len();
    let k = gamma.num_classes();
    if noisy_labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} assignment rows",
            noisy_labels.len()
        )));
    }
    if let Some(&y) = noisy_labels.iter().find(|&&y| y >= k) {
        return Err(Error::Config(format!("label {y} outside [0, {k})")));
    }
    let gamma_label: Vec<T> = noisy_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| gamma.gamma.get(i, y))
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in noisy_labels.iter().enumerate() {
        members[y].push(i);
    }
    let mut clean_posterior = vec![T::zero(); n];
    let mut gmm = Vec::with_capacity(k);
    for (class, idx) in members.iter().enumerate() {
        let values: Vec<T> = idx.iter().map(|&i| gamma_label[i]).collect();
        let fit = fit_gmm_1d(&values, cfg);
        let status = if values.len() < 2 {
            ClassFitStatus::TooFew
        } else if fit.degenerate {
            ClassFitStatus::Degenerate
        } else {
            ClassFitStatus::Fitted
        };
        let clean_component = fit.high_component();
        match status {
            ClassFitStatus::Fitted => {
                for (&i, &v) in idx.iter().zip(&values) {
                    clean_posterior[i] = fit.posterior(v, clean_component);
                }
            }
            _ => {
                debug!("class {class}: {status:?} with {} samples, all kept clean", values.len());
                for &i in idx {
                    clean_posterior[i] = T::one();
                }
            }
        }
        gmm.push(ClassGmm {
            fit,
            clean_component,
            status,
        });
    }
    let threshold = T::lit(0.5);
    let clean_mask: Vec<bool> = clean_posterior.iter().map(|&p| p > threshold).collect();
    let mut per_class_clean_counts = vec![0; k];
    for (i, &y) in noisy_labels.iter().enumerate() {
        if clean_mask[i] {
            per_class_clean_counts[y] += 1;
        }
    }
    Ok(SelectionResult {
        clean_mask,
        clean_posterior,
        gamma_label,
        gmm,
        per_class_clean_counts,
    })
}

/// `selection_epoch{t}.csv` with columns
/// `id,gamma_label,clean_posterior,clean_flag,noisy_label[,true_label]`.
pub fn dump_selection<T: Scalar>(
    dir: &Path,
    epoch: usize,
    sel: &SelectionResult<T>,
    noisy_labels: &[usize],
    true_labels: Option<&[usize]>,
) -> Result<()> {
    let path = dir.join(format!("selection_epoch{epoch}.csv"));
    write_selection_csv(&path, sel, noisy_labels, true_labels)
}

pub fn write_selection_csv<T: Scalar>(
    path: &Path,
    sel: &SelectionResult<T>,
    noisy_labels: &[usize],
    true_labels: Option<&[usize]>,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut header = String::from("id,gamma_label,clean_posterior,clean_flag,noisy_label");
    if true_labels.is_some() {
        header.push_str(",true_label");
    }
    writeln!(f, "{header}").map_err(io)?;
    for i in 0..sel.clean_mask.len() {
        write!(
            f,
            "{},{:?},{:?},{},{}",
            i,
            sel.gamma_label[i].to_f64_lossy(),
            sel.clean_posterior[i].to_f64_lossy(),
            u8::from(sel.clean_mask[i]),
            noisy_labels[i]
        )
        .map_err(io)?;
        if let Some(t) = true_labels {
            write!(f, ",{}", t[i]).map_err(io)?;
        }
        writeln!(f).map_err(io)?;
    }
    f.flush().map_err(io)
}
