//! Long-tailed noisy-label datasets: synthetic generation, label-noise
//! injection and the line-oriented text format.
//!
//! Training code never sees a [`Dataset`] directly; it receives a
//! [`TrainView`], which carries features and noisy labels only.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    None,
    Symmetric,
    Asymmetric,
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseType::None),
            "sym" | "symmetric" => Ok(NoiseType::Symmetric),
            "asym" | "asymmetric" => Ok(NoiseType::Asymmetric),
            other => Err(Error::Config(format!(
                "unknown noise type `{other}` (expected none|sym|asym)"
            ))),
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseType::None => "none",
            NoiseType::Symmetric => "sym",
            NoiseType::Asymmetric => "asym",
        })
    }
}

/// How flips are drawn: independent Bernoulli trials per sample, or an exact
/// number `round(ratio * N)` of flipped samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Bernoulli,
    ExactQuota,
}

/// Parameters of a synthetic long-tailed benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Samples in the largest class.
    pub n_max: usize,
    /// Imbalance ratio `min_k N_k / max_k N_k`, in `(0, 1]`.
    pub rho: f64,
    pub class_sep: f64,
    pub intra_std: f64,
    /// Gaussian sub-clusters per class, each around its own prototype.
    pub modes: usize,
    pub noise_type: NoiseType,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            n_max: 600,
            rho: 0.1,
            class_sep: 1.0,
            intra_std: 0.35,
            modes: 1,
            noise_type: NoiseType::Symmetric,
            noise_ratio: 0.4,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "K must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.modes == 0 {
            return Err(Error::Config("modes must be at least 1".into()));
        }
        if !(self.class_sep > 0.0) || !(self.intra_std > 0.0) {
            return Err(Error::Config("class_sep and intra_std must be positive".into()));
        }
        check_noise_ratio(self.noise_ratio)
    }
}

fn check_noise_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "ratio must lie in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

/// Per-class sample counts `round(n_max * rho^((k-1)/(K-1)))`, floored at 1.
pub fn make_longtail_counts(spec: &GenSpec) -> Result<Vec<usize>> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "K must be at least 2, got {}",
            spec.num_classes
        )));
    }
    if spec.n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    let last = (spec.num_classes - 1) as f64;
    Ok((0..spec.num_classes)
        .map(|k| {
            let n = spec.n_max as f64 * spec.rho.powf(k as f64 / last);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Labelled feature matrix. `true_labels` is `None` when the source file
/// carried `-1` placeholders, which disables evaluation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    features: Matrix<T>,
    noisy_labels: Vec<usize>,
    true_labels: Option<Vec<usize>>,
    num_classes: usize,
    class_counts: Vec<usize>,
    split: Split,
}

/// Read-only slice of a dataset that training code is allowed to see.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a, T> {
    pub features: &'a Matrix<T>,
    pub noisy_labels: &'a [usize],
    pub num_classes: usize,
    pub class_counts: &'a [usize],
}

impl<'a, T: Scalar> TrainView<'a, T> {
    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }
}

pub fn count_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        features: Matrix<T>,
        noisy_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::Shape("dataset needs N > 0 and d > 0".into()));
        }
        if num_classes == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if noisy_labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                noisy_labels.len(),
                features.rows()
            )));
        }
        let check = |labels: &[usize], what: &str| -> Result<()> {
            if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::Config(format!(
                    "{what} label {y} at row {i} is outside [0, {num_classes})"
                )));
            }
            Ok(())
        };
        check(&noisy_labels, "noisy")?;
        if let Some(t) = &true_labels {
            if t.len() != noisy_labels.len() {
                return Err(Error::Shape("true/noisy label lengths differ".into()));
            }
            check(t, "true")?;
        }
        let class_counts = count_labels(&noisy_labels, num_classes);
        Ok(Self {
            features,
            noisy_labels,
            true_labels,
            num_classes,
            class_counts,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    /// Evaluation-only ground truth.
    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    /// Counts under the noisy labels.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn train_view(&self) -> TrainView<'_, T> {
        TrainView {
            features: &self.features,
            noisy_labels: &self.noisy_labels,
            num_classes: self.num_classes,
            class_counts: &self.class_counts,
        }
    }

    /// Copy with replaced ground truth; used by the true-label canary tests.
    pub fn with_true_labels(&self, true_labels: Option<Vec<usize>>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.noisy_labels.clone(),
            true_labels,
            self.num_classes,
            self.split,
        )
    }

    /// Fraction of samples whose noisy label differs from the true one.
    pub fn noise_rate(&self) -> Option<f64> {
        let t = self.true_labels.as_ref()?;
        let flips = t.iter().zip(&self.noisy_labels).filter(|(a, b)| a != b).count();
        Some(flips as f64 / t.len() as f64)
    }
}

/// Deterministic generator: every class owns `modes` prototypes, random
/// directions scaled to norm `class_sep`; samples pick a mode uniformly and
/// add isotropic Gaussian noise of scale `intra_std`.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    spec: GenSpec,
    prototypes: Vec<Vec<Vec<f64>>>,
}

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SyntheticGenerator {
    pub fn new(spec: &GenSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_stream(spec.seed, STREAM_PROTOTYPES);
        let mut direction = || {
            let mut v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x *= spec.class_sep / n;
            }
            v
        };
        let prototypes = (0..spec.num_classes)
            .map(|_| (0..spec.modes).map(|_| direction()).collect())
            .collect();
        Ok(Self {
            spec: spec.clone(),
            prototypes,
        })
    }

    /// `prototypes()[class][mode]`.
    pub fn prototypes(&self) -> &[Vec<Vec<f64>>] {
        &self.prototypes
    }

    /// Class of the prototype nearest to `x` over all modes.
    pub fn nearest_class(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, modes) in self.prototypes.iter().enumerate() {
            for p in modes {
                let d: f64 = x.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
        }
        best.1
    }

    fn sample<T: Scalar>(&self, counts: &[usize], rng: &mut ChaCha8Rng, split: Split) -> Result<Dataset<T>> {
        let n: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(n * self.spec.dim);
        let mut labels = Vec::with_capacity(n);
        for (k, &nk) in counts.iter().enumerate() {
            for _ in 0..nk {
                let mode = if self.spec.modes > 1 {
                    rng.random_range(0..self.spec.modes)
                } else {
                    0
                };
                for &p in &self.prototypes[k][mode] {
                    let e: f64 = StandardNormal.sample(rng);
                    data.push(T::lit(p + self.spec.intra_std * e));
                }
                labels.push(k);
            }
        }
        let features = Matrix::from_vec(n, self.spec.dim, data)?;
        Dataset::new(features, labels.clone(), Some(labels), self.spec.num_classes, split)
    }

    /// Noise-free long-tailed training set.
    pub fn train<T: Scalar>(&self) -> Result<Dataset<T>> {
        let counts = make_longtail_counts(&self.spec)?;
        let mut rng = rng_stream(self.spec.seed, STREAM_TRAIN);
        self.sample(&counts, &mut rng, Split::Train)
    }

    /// Balanced clean test set drawn from the same prototypes.
    pub fn test<T: Scalar>(&self, per_class: usize) -> Result<Dataset<T>> {
        if per_class == 0 {
            return Err(Error::Config("test set needs at least one sample per class".into()));
        }
        let counts = vec![per_class; self.spec.num_classes];
        let mut rng = rng_stream(self.spec.seed, STREAM_TEST);
        self.sample(&counts, &mut rng, Split::Test)
    }
}

/// Noise-free synthetic training set (`noisy_labels == true_labels`).
pub fn generate_synthetic<T: Scalar>(spec: &GenSpec) -> Result<Dataset<T>> {
    SyntheticGenerator::new(spec)?.train()
}

/// Training set with the spec's label noise applied, plus its clean test set.
pub fn generate_benchmark<T: Scalar>(spec: &GenSpec, test_per_class: usize) -> Result<(Dataset<T>, Dataset<T>)> {
    let generator = SyntheticGenerator::new(spec)?;
    let clean = generator.train()?;
    let train = inject_noise(
        &clean,
        spec.noise_type,
        spec.noise_ratio,
        spec.seed ^ 0x6e6f_6973_6500,
        NoiseMode::Bernoulli,
    )?;
    Ok((train, generator.test(test_per_class)?))
}

/// Flip labels away from the ground truth. Symmetric flips pick uniformly
/// among the other `K - 1` classes; asymmetric flips map `k -> (k + 1) mod K`.
pub fn inject_noise<T: Scalar>(
    ds: &Dataset<T>,
    noise_type: NoiseType,
    noise_ratio: f64,
    seed: u64,
    mode: NoiseMode,
) -> Result<Dataset<T>> {
    check_noise_ratio(noise_ratio)?;
    let base: Vec<usize> = ds.true_labels().unwrap_or(ds.noisy_labels()).to_vec();
    let k = ds.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base.len();
    let flip: Vec<bool> = match (noise_type, mode) {
        (NoiseType::None, _) => vec![false; n],
        (_, NoiseMode::Bernoulli) => (0..n).map(|_| rng.random::<f64>() < noise_ratio).collect(),
        (_, NoiseMode::ExactQuota) => {
            let quota = (noise_ratio * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut f = vec![false; n];
            for &i in &order[..quota.min(n)] {
                f[i] = true;
            }
            f
        }
    };
    let noisy = base
        .iter()
        .zip(&flip)
        .map(|(&y, &f)| {
            if !f {
                return y;
            }
            match noise_type {
                NoiseType::None => y,
                NoiseType::Symmetric => {
                    let r = rng.random_range(0..k - 1);
                    if r >= y {
                        r + 1
                    } else {
                        r
                    }
                }
                NoiseType::Asymmetric => (y + 1) % k,
            }
        })
        .collect();
    Dataset::new(
        ds.features().clone(),
        noisy,
        ds.true_labels.clone(),
        k,
        ds.split(),
    )
}

/// Write the text format: header `N K d`, then `id noisy true f_1 .. f_d`.
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {} {}", ds.len(), ds.num_classes(), ds.dim()).map_err(io)?;
    for i in 0..ds.len() {
        let t = ds.true_labels().map_or(-1, |t| t[i] as i64);
        write!(w, "{} {} {}", i, ds.noisy_labels()[i], t).map_err(io)?;
        for &v in ds.features().row(i) {
            write!(w, " {:?}", v.to_f64_lossy()).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset<T: Scalar>(path: &Path, split: Split) -> Result<Dataset<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, split)
}

pub fn parse_dataset<T: Scalar>(text: &str, path: &Path, split: Split) -> Result<Dataset<T>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "no header".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(err(hline + 1, format!("malformed header `{header}` (expected `N K d`)")));
    }
    let parse_dim = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| err(hline + 1, format!("malformed header: {what} = `{s}`")))
    };
    let n = parse_dim(head[0], "N")?;
    let k = parse_dim(head[1], "K")?;
    let d = parse_dim(head[2], "d")?;
    if n == 0 || k == 0 || d == 0 {
        return Err(err(hline + 1, "malformed header: N, K and d must be positive".into()));
    }

    let mut features = Vec::with_capacity(n * d);
    let mut noisy = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut missing_truth = false;
    for (lineno, line) in lines {
        let lineno = lineno + 1;
        if noisy.len() == n {
            return Err(err(lineno, format!("more than the {n} rows declared in the header")));
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != d + 3 {
            return Err(err(
                lineno,
                format!("row has {} fields, expected {}", cols.len(), d + 3),
            ));
        }
        cols[0]
            .parse::<u64>()
            .map_err(|_| err(lineno, format!("bad id `{}`", cols[0])))?;
        let y: usize = cols[1]
            .parse()
            .map_err(|_| err(lineno, format!("bad noisy label `{}`", cols[1])))?;
        if y >= k {
            return Err(err(lineno, format!("noisy label {y} out of range for K = {k}")));
        }
        let t: i64 = cols[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad true label `{}`", cols[2])))?;
        if t == -1 {
            missing_truth = true;
            truth.push(0);
        } else if t < 0 || t as usize >= k {
            return Err(err(lineno, format!("true label {t} out of range for K = {k}")));
        } else {
            truth.push(t as usize);
        }
        noisy.push(y);
        for c in &cols[3..] {
            let v: f64 = c
                .parse()
                .map_err(|_| err(lineno, format!("bad feature value `{c}`")))?;
            features.push(T::lit(v));
        }
    }
    if noisy.len() != n {
        return Err(err(
            text.lines().count().max(1),
            format!("header declares {n} rows but file has {}", noisy.len()),
        ));
    }
    let features = Matrix::from_vec(n, d, features)?;
    let truth = if missing_truth { None } else { Some(truth) };
    Dataset::new(features, noisy, truth, k, split)
}
