//! Distribution-aware class centroids.
//!
//! Each centroid is a confidence-weighted average over *all* confident
//! samples, regardless of their (noisy) label:
//!
//! ```text
//! c_k = normalize( sum_{i in D^I} softmax(p^c(i) / tau_T)_k * z'(i) )
//! D^I = { i : max_k p^c_k(i) > tau  and  max_k p^b_k(i) > tau }
//! ```
//!
//! Sums run sequentially in sample order so results are bit-reproducible.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};

const NORM_FLOOR: f64 = 1e-12;
const THRESHOLD_CAP: f64 = 0.999;

/// Confidence threshold `min(phi^t * tau_hat, 0.999)`.
pub fn threshold_schedule(epoch: usize, phi: f64, tau_hat: f64) -> f64 {
    (phi.powf(epoch as f64) * tau_hat).min(THRESHOLD_CAP)
}

/// Default base threshold `1 / K`.
pub fn base_threshold(num_classes: usize) -> f64 {
    1.0 / num_classes as f64
}

/// Row-wise softmax of `preds / tau_t`. The inputs are probabilities, not logits.
pub fn temperature_scale<T: Scalar>(preds: &Matrix<T>, tau_t: T) -> Result<Matrix<T>> {
    if !(tau_t > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau_t}")));
    }
    Ok(preds.map(|p| p / tau_t).softmax_rows())
}

/// Membership in the confident subset: both heads' top probability above `tau`.
pub fn confident_subset<T: Scalar>(preds_c: &Matrix<T>, preds_b: &Matrix<T>, tau: T) -> Vec<bool> {
    preds_c
        .iter_rows()
        .zip(preds_b.iter_rows())
        .map(|(c, b)| {
            let mc = c.iter().copied().fold(T::neg_infinity(), T::max);
            let mb = b.iter().copied().fold(T::neg_infinity(), T::max);
            mc > tau && mb > tau
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidStatus {
    Estimated,
    /// Weighted sum was degenerate; the fallback centroid was reused.
    Fallback,
    Undefined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet<T> {
    pub centroids: Matrix<T>,
    pub status: Vec<CentroidStatus>,
    pub confident_mask: Vec<bool>,
    pub tau_used: f64,
}

impl<T: Scalar> CentroidSet<T> {
    pub fn num_classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn all_defined(&self) -> bool {
        self.status.iter().all(|s| *s != CentroidStatus::Undefined)
    }

    pub fn confident_count(&self) -> usize {
        self.confident_mask.iter().filter(|&&m| m).count()
    }
}

/// Knobs of the estimator; the defaults are the full method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentroidOptions {
    pub tau_t: f64,
    /// Apply the temperature softmax to the weights; otherwise raw probabilities.
    pub temperature_scaling: bool,
    /// Restrict the sum to the confident subset; otherwise every sample.
    pub use_confident_subset: bool,
}

impl Default for CentroidOptions {
    fn default() -> Self {
        Self {
            tau_t: 0.1,
            temperature_scaling: true,
            use_confident_subset: true,
        }
    }
}

fn check_shapes<T: Scalar>(projections: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if projections.rows() != a.rows() || a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "projections {}x{}, preds_c {}x{}, preds_b {}x{} do not agree",
            projections.rows(),
            projections.cols(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn finish<T: Scalar>(
    sums: Matrix<T>,
    fallback: Option<&Matrix<T>>,
    confident_mask: Vec<bool>,
    tau: f64,
) -> Result<CentroidSet<T>> {
    let k = sums.rows();
    let mut centroids = sums;
    let mut status = vec![CentroidStatus::Estimated; k];
    for c in 0..k {
        let row = centroids.row_mut(c);
        let n = scalar::l2_norm(row);
        if n >= T::lit(NORM_FLOOR) && n.is_finite() {
            for v in row.iter_mut() {
                *v = *v / n;
            }
            continue;
        }
        match fallback {
            Some(f) => {
                row.copy_from_slice(f.row(c));
                status[c] = CentroidStatus::Fallback;
            }
            None => status[c] = CentroidStatus::Undefined,
        }
    }
    if status.iter().all(|s| *s == CentroidStatus::Undefined) {
        return Err(Error::NoConfidentSamples { tau });
    }
    Ok(CentroidSet {
        centroids,
        status,
        confident_mask,
        tau_used: tau,
    })
}

/// Distribution-aware centroid estimate. `fallback` supplies per-class
/// centroids (previous epoch, or label means) for classes whose weighted sum
/// degenerates. Noisy labels are not an input.
pub fn estimate_centroids<T: Scalar>(
    projections: &Matrix<T>,
    preds_c: &Matrix<T>,
    preds_b: &Matrix<T>,
    tau: f64,
    opts: &CentroidOptions,
    fallback: Option<&Matrix<T>>,
) -> Result<CentroidSet<T>> {
    check_shapes(projections, preds_c, preds_b)?;
    let weights = if opts.temperature_scaling {
        temperature_scale(preds_c, T::lit(opts.tau_t))?
    } else {
        preds_c.clone()
    };
    let mask = if opts.use_confident_subset {
        confident_subset(preds_c, preds_b, T::lit(tau))
    } else {
        vec![true; projections.rows()]
    };
    let k = preds_c.cols();
    let mut sums = Matrix::zeros(k, projections.cols());
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let z = projections.row(i);
        let w = weights.row(i);
        for c in 0..k {
            let wc = w[c];
            for (s, &zv) in sums.row_mut(c).iter_mut().zip(z) {
                *s = *s + wc * zv;
            }
        }
    }
    finish(sums, fallback, mask, tau)
}

/// Baseline estimator: for class k, the normalised mean of samples labelled
/// k whose predicted probability for k exceeds `tau`.
pub fn per_class_centroids<T: Scalar>(
    projections: &Matrix<T>,
    preds_c: &Matrix<T>,
    noisy_labels: &[usize],
    tau: f64,
    fallback: Option<&Matrix<T>>,
) -> Result<CentroidSet<T>> {
    if projections.rows() != preds_c.rows() || noisy_labels.len() != preds_c.rows() {
        return Err(Error::Shape("per-class centroid inputs disagree in length".into()));
    }
    let k = preds_c.cols();
    let t = T::lit(tau);
    let mask: Vec<bool> = noisy_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| preds_c.get(i, y) > t)
        .collect();
    let mut sums = Matrix::zeros(k, projections.cols());
    for (i, &y) in noisy_labels.iter().enumerate() {
        if mask[i] {
            for (s, &zv) in sums.row_mut(y).iter_mut().zip(projections.row(i)) {
                *s = *s + zv;
            }
        }
    }
    finish(sums, fallback, mask, tau)
}

/// Normalised noisy-label class means over all samples; the first-epoch
/// fallback when no previous centroids exist.
pub fn label_mean_centroids<T: Scalar>(projections: &Matrix<T>, labels: &[usize], num_classes: usize) -> Matrix<T> {
    let mut sums = Matrix::zeros(num_classes, projections.cols());
    for (i, &y) in labels.iter().enumerate() {
        for (s, &zv) in sums.row_mut(y).iter_mut().zip(projections.row(i)) {
            *s = *s + zv;
        }
    }
    sums.normalized_rows()
}

/// Row-stochastic `N x K` matrix of centroid assignment probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T> {
    pub gamma: Matrix<T>,
}

impl<T: Scalar> AssignmentMatrix<T> {
    pub fn num_classes(&self) -> usize {
        self.gamma.cols()
    }

    pub fn len(&self) -> usize {
        self.gamma.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.rows() == 0
    }
}

/// `gamma[i, k] = softmax_k(z'(i) . c_k)`.
pub fn assignment_probabilities<T: Scalar>(
    projections: &Matrix<T>,
    centroids: &CentroidSet<T>,
) -> Result<AssignmentMatrix<T>> {
    if let Some(k) = centroids.status.iter().position(|s| *s == CentroidStatus::Undefined) {
        return Err(Error::UndefinedCentroid(k));
    }
    let c = &centroids.centroids;
    if c.cols() != projections.cols() {
        return Err(Error::Shape(format!(
            "centroids have {} columns, projections {}",
            c.cols(),
            projections.cols()
        )));
    }
    let mut gamma = Matrix::zeros(projections.rows(), c.rows());
    let mut sims = vec![T::zero(); c.rows()];
    for i in 0..projections.rows() {
        let z = projections.row(i);
        for (s, cr) in sims.iter_mut().zip(c.iter_rows()) {
            *s = scalar::dot(z, cr);
        }
        scalar::softmax_into(&sims, gamma.row_mut(i));
    }
    Ok(AssignmentMatrix { gamma })
}

fn write_rows<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{:?}", v.to_f64_lossy())).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// `centroids_epoch{t}.csv`: K rows of d_proj values.
pub fn dump_centroids<T: Scalar>(dir: &Path, epoch: usize, set: &CentroidSet<T>) -> Result<()> {
    write_rows(&dir.join(format!("centroids_epoch{epoch}.csv")), &set.centroids)
}

/// `gamma_epoch{t}.csv`: N rows of K assignment probabilities.
pub fn dump_gamma<T: Scalar>(dir: &Path, epoch: usize, gamma: &AssignmentMatrix<T>) -> Result<()> {
    write_rows(&dir.join(format!("gamma_epoch{epoch}.csv")), &gamma.gamma)
}
