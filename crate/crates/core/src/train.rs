//! Two-network training: a warm-up phase on the noisy labels, then per-epoch
//! centroid estimation, clean-sample selection and MixMatch-style
//! co-training with the two contrastive terms.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centroid::{
    self, AssignmentMatrix, CentroidOptions, CentroidSet,
};
use crate::data::{Dataset, TrainView};
use crate::error::{Error, Result};
use crate::eval::{self, AucScore, ClassSetMode, MetricsRecord};
use crate::losses::{self, ConfidenceGroups, Head, LossParts, LossWeights, MemoryBank};
use crate::matrix::Matrix;
use crate::net::{ModelState, NetConfig, OutputGrads};
use crate::scalar::Scalar;
use crate::select::{self, GmmConfig, SelectionResult};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $what:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($text),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected {})",
                        $what,
                        other,
                        Self::NAMES.join("|")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// `ce` trains every epoch like the warm-up, without selection or contrastive terms.
    Method, "method" { Dasc => "dasc", Ce => "ce" }
);
string_enum!(CentroidMode, "centroid estimator" { Dacc => "dacc", PerClass => "per-class" });
string_enum!(BankKeys, "bank key type" { Mixup => "mixup", Plain => "plain" });
string_enum!(BankPush, "bank push policy" { Low => "low", All => "all" });
string_enum!(
    /// `cross`: each network trains on the partner's partition.
    CoMode, "co-training mode" { Cross => "cross", Own => "self" }
);
string_enum!(Representation, "representation source" { Projector => "projector", Backbone => "backbone" });
string_enum!(PredictionSource, "prediction source" { Conventional => "conventional", Balanced => "balanced" });
string_enum!(LrSchedule, "learning-rate schedule" { Constant => "constant", Cosine => "cosine" });
string_enum!(Phase, "phase" { Warmup => "warmup", Main => "main" });

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Weak-view noise, in units of the mean feature standard deviation.
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub dropout: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise: 0.02,
            strong_noise: 0.1,
            dropout: 0.1,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            weak_noise: 0.0,
            strong_noise: 0.0,
            dropout: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub sbcl_warmup: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau_c: f64,
    pub tau_t: f64,
    pub tau_s: f64,
    pub tau_m: f64,
    pub lambda_sbcl: f64,
    pub lambda_midl: f64,
    pub phi: f64,
    /// Base threshold; `None` means `1/K`.
    pub tau_hat: Option<f64>,
    pub alpha_mixup: f64,
    pub bank_capacity: usize,
    pub sharpen_t: f64,
    pub lambda_u_max: f64,
    pub ramp_epochs: usize,
    pub method: Method,
    pub centroid: CentroidMode,
    pub temperature_scaling: bool,
    pub confident_subset: bool,
    pub use_sbcl: bool,
    pub use_midl: bool,
    pub bank_keys: BankKeys,
    pub bank_push: BankPush,
    pub co_mode: CoMode,
    pub representation: Representation,
    pub prediction_source: PredictionSource,
    pub augment: AugmentConfig,
    pub gmm: GmmConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup: 30,
            sbcl_warmup: 10,
            batch_size: 64,
            lr: 0.02,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            weight_decay: 1e-4,
            tau_c: 0.9,
            tau_t: 0.1,
            tau_s: 0.1,
            tau_m: 0.5,
            lambda_sbcl: 0.5,
            lambda_midl: 0.3,
            phi: 1.005,
            tau_hat: None,
            alpha_mixup: 4.0,
            bank_capacity: 1024,
            sharpen_t: 0.5,
            lambda_u_max: 25.0,
            ramp_epochs: 16,
            method: Method::Dasc,
            centroid: CentroidMode::Dacc,
            temperature_scaling: true,
            confident_subset: true,
            use_sbcl: true,
            use_midl: true,
            bank_keys: BankKeys::Mixup,
            bank_push: BankPush::Low,
            co_mode: CoMode::Cross,
            representation: Representation::Projector,
            prediction_source: PredictionSource::Conventional,
            augment: AugmentConfig::default(),
            gmm: GmmConfig::default(),
            seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.sbcl_warmup > self.warmup || self.warmup >= self.epochs {
            return Err(Error::Config(format!(
                "need sbcl_warmup <= warmup < epochs, got {} / {} / {}",
                self.sbcl_warmup, self.warmup, self.epochs
            )));
        }
        if self.batch_size == 0 || self.bank_capacity == 0 {
            return Err(Error::Config("batch_size and bank_capacity must be at least 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("tau_t", self.tau_t),
            ("tau_s", self.tau_s),
            ("tau_m", self.tau_m),
            ("phi", self.phi),
            ("alpha_mixup", self.alpha_mixup),
            ("sharpen_t", self.sharpen_t),
        ] {
            positive(name, v)?;
        }
        if !(self.tau_c > 0.0 && self.tau_c < 1.0) {
            return Err(Error::Config(format!("tau_c must lie in (0, 1), got {}", self.tau_c)));
        }
        if let Some(t) = self.tau_hat {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("tau_hat must lie in (0, 1), got {t}")));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_sbcl", self.lambda_sbcl),
            ("lambda_midl", self.lambda_midl),
            ("lambda_u_max", self.lambda_u_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let a = &self.augment;
        if a.weak_noise < 0.0 || a.strong_noise < 0.0 || !(0.0..1.0).contains(&a.dropout) || a.scale_min > a.scale_max {
            return Err(Error::Config("invalid augmentation settings".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = (epoch.saturating_sub(1)) as f64 / self.epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn threshold(&self, epoch: usize, num_classes: usize) -> f64 {
        let tau_hat = self.tau_hat.unwrap_or_else(|| centroid::base_threshold(num_classes));
        centroid::threshold_schedule(epoch, self.phi, tau_hat)
    }

    pub fn contrastive_on(&self, epoch: usize) -> bool {
        self.method == Method::Dasc && self.use_sbcl && epoch > self.sbcl_warmup
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_sbcl: self.lambda_sbcl,
            lambda_midl: self.lambda_midl,
        }
    }
}

/// Hex SHA-256 of the canonical JSON of both configs.
pub fn config_hash(cfg: &TrainConfig, net: &NetConfig) -> String {
    let json = serde_json::to_string(&(cfg, net)).expect("configs serialise");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const PURPOSE_WARMUP: u64 = 1;
const PURPOSE_PSEUDO: u64 = 2;
const PURPOSE_BATCH: u64 = 3;

/// Independent stream per (seed, epoch, network, purpose), so no generator
/// state needs to survive a checkpoint.
fn stream_rng(seed: u64, epoch: usize, net: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | ((net as u64) << 4) | purpose);
    rng
}

fn init_seed(seed: u64, net: usize) -> u64 {
    let mut z = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(net as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean per-column standard deviation; the unit for augmentation noise.
pub fn feature_scale<T: Scalar>(features: &Matrix<T>) -> f64 {
    let (n, d) = (features.rows(), features.cols());
    if n < 2 || d == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| features.get(i, j).to_f64_lossy()).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (features.get(i, j).to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        total += var.sqrt();
    }
    let s = total / d as f64;
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Weak,
    Strong,
}

/// Weak: isotropic Gaussian noise. Strong: per-coordinate scaling, larger
/// noise, then coordinate dropout. `scale` converts the relative noise levels
/// into feature units.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    features: &Matrix<T>,
    policy: Policy,
    cfg: &AugmentConfig,
    scale: f64,
    rng: &mut R,
) -> Matrix<T> {
    let mut out = features.clone();
    match policy {
        Policy::Weak => {
            let sigma = cfg.weak_noise * scale;
            for v in out.as_mut_slice() {
                let n: f64 = rng.sample(StandardNormal);
                *v = *v + T::lit(sigma * n);
            }
        }
        Policy::Strong => {
            let sigma = cfg.strong_noise * scale;
            for v in out.as_mut_slice() {
                let s = if cfg.scale_max > cfg.scale_min {
                    rng.random_range(cfg.scale_min..cfg.scale_max)
                } else {
                    cfg.scale_min
                };
                let n: f64 = rng.sample(StandardNormal);
                let drop = rng.random::<f64>() < cfg.dropout;
                *v = if drop {
                    T::zero()
                } else {
                    *v * T::lit(s) + T::lit(sigma * n)
                };
            }
        }
    }
    out
}

/// The four inputs of one batch: a weak view, two strong views and their
/// row-wise mixup with coefficients `lambdas`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews<T> {
    pub weak: Matrix<T>,
    pub strong1: Matrix<T>,
    pub strong2: Matrix<T>,
    pub mix: Matrix<T>,
    pub lambdas: Vec<T>,
}

impl<T: Scalar> AugmentedViews<T> {
    pub fn build<R: Rng + ?Sized>(
        features: &Matrix<T>,
        cfg: &AugmentConfig,
        scale: f64,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weak = augment(features, Policy::Weak, cfg, scale, rng);
        let strong1 = augment(features, Policy::Strong, cfg, scale, rng);
        let strong2 = augment(features, Policy::Strong, cfg, scale, rng);
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
        let lambdas: Vec<T> = (0..features.rows()).map(|_| T::lit(beta.sample(rng))).collect();
        let mut mix = strong1.clone();
        for (i, &l) in lambdas.iter().enumerate() {
            let b = strong2.row(i);
            for (m, &bv) in mix.row_mut(i).iter_mut().zip(b) {
                *m = l * *m + (T::one() - l) * bv;
            }
        }
        Ok(Self {
            weak,
            strong1,
            strong2,
            mix,
            lambdas,
        })
    }
}

/// `p^(1/t) / sum p^(1/t)`.
pub fn sharpen<T: Scalar>(p: &[T], t: T) -> Vec<T> {
    let inv = T::one() / t;
    let mut out: Vec<T> = p.iter().map(|&v| v.powf(inv)).collect();
    let sum: T = out.iter().copied().sum();
    if sum > T::zero() && sum.is_finite() {
        for v in &mut out {
            *v = *v / sum;
        }
    } else {
        let u = T::one() / T::from_usize_lossy(p.len());
        out.iter_mut().for_each(|v| *v = u);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels<T> {
    pub y_hat: Matrix<T>,
    /// `true` for refined (clean) rows, `false` for guessed ones.
    pub refined: Vec<bool>,
}

const EVAL_CHUNK: usize = 1024;

fn chunked<T: Scalar>(
    net: &ModelState<T>,
    x: &Matrix<T>,
    mut f: impl FnMut(usize, &crate::net::ForwardRecord<T>),
) -> Result<()> {
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let rec = net.forward(&x.select_rows(&idx))?;
        f(start, &rec);
        start = end;
    }
    Ok(())
}

fn class_probs<T: Scalar>(net: &ModelState<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), net.config().num_classes);
    chunked(net, x, |start, rec| {
        let p = rec.logits_c.softmax_rows();
        for i in 0..p.rows() {
            out.row_mut(start + i).copy_from_slice(p.row(i));
        }
    })?;
    Ok(out)
}

/// Refine labels of clean rows with the weak-view predictions of both
/// networks; guess noisy rows from both networks on both strong views.
pub fn generate_pseudo_labels<T: Scalar>(
    net_a: &ModelState<T>,
    net_b: &ModelState<T>,
    views: &AugmentedViews<T>,
    clean_mask: &[bool],
    clean_posterior: &[T],
    noisy_labels: &[usize],
    sharpen_t: f64,
) -> Result<PseudoLabels<T>> {
    let n = views.weak.rows();
    if clean_mask.len() != n || clean_posterior.len() != n || noisy_labels.len() != n {
        return Err(Error::Shape("pseudo-label inputs disagree in length".into()));
    }
    let k = net_a.config().num_classes;
    let t = T::lit(sharpen_t);
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    let wa = class_probs(net_a, &views.weak)?;
    let wb = class_probs(net_b, &views.weak)?;
    let s = [
        class_probs(net_a, &views.strong1)?,
        class_probs(net_a, &views.strong2)?,
        class_probs(net_b, &views.strong1)?,
        class_probs(net_b, &views.strong2)?,
    ];
    let mut y_hat = Matrix::zeros(n, k);
    let mut mixed = vec![T::zero(); k];
    for i in 0..n {
        if clean_mask[i] {
            let w = clean_posterior[i];
            for c in 0..k {
                let onehot = if c == noisy_labels[i] { T::one() } else { T::zero() };
                mixed[c] = w * onehot + (T::one() - w) * half * (wa.get(i, c) + wb.get(i, c));
            }
        } else {
            for c in 0..k {
                mixed[c] = quarter * s.iter().map(|m| m.get(i, c)).sum::<T>();
            }
        }
        y_hat.row_mut(i).copy_from_slice(&sharpen(&mixed, t));
    }
    Ok(PseudoLabels {
        y_hat,
        refined: clean_mask.to_vec(),
    })
}

/// High iff the largest pseudo-label probability strictly exceeds `tau_c`.
pub fn confidence_split<T: Scalar>(pseudo: &PseudoLabels<T>, tau_c: f64) -> ConfidenceGroups {
    ConfidenceGroups::from_distributions(&pseudo.y_hat, T::lit(tau_c))
}

/// Representations and both classifiers' probabilities over a full set.
#[derive(Clone, Debug)]
pub struct FullPass<T> {
    pub representations: Matrix<T>,
    pub preds_c: Matrix<T>,
    pub preds_b: Matrix<T>,
}

pub fn full_pass<T: Scalar>(net: &ModelState<T>, x: &Matrix<T>, rep: Representation) -> Result<FullPass<T>> {
    let k = net.config().num_classes;
    let d = match rep {
        Representation::Projector => net.config().d_proj,
        Representation::Backbone => net.config().d_embed,
    };
    let mut out = FullPass {
        representations: Matrix::zeros(x.rows(), d),
        preds_c: Matrix::zeros(x.rows(), k),
        preds_b: Matrix::zeros(x.rows(), k),
    };
    chunked(net, x, |start, rec| {
        let z = match rep {
            Representation::Projector => rec.projections.clone(),
            Representation::Backbone => rec.embeddings().normalized_rows(),
        };
        let pc = rec.logits_c.softmax_rows();
        let pb = rec.logits_b.softmax_rows();
        for i in 0..z.rows() {
            out.representations.row_mut(start + i).copy_from_slice(z.row(i));
            out.preds_c.row_mut(start + i).copy_from_slice(pc.row(i));
            out.preds_b.row_mut(start + i).copy_from_slice(pb.row(i));
        }
    })?;
    Ok(out)
}

/// One centroid estimate plus the selection it induces.
#[derive(Clone, Debug)]
pub struct SelectionPass<T> {
    pub centroids: CentroidSet<T>,
    pub gamma: AssignmentMatrix<T>,
    pub selection: SelectionResult<T>,
}

pub fn selection_pass<T: Scalar>(
    net: &ModelState<T>,
    view: &TrainView<'_, T>,
    tau: f64,
    cfg: &TrainConfig,
    fallback: Option<&Matrix<T>>,
) -> Result<SelectionPass<T>> {
    let pass = full_pass(net, view.features, cfg.representation)?;
    let label_means;
    let fallback = match fallback {
        Some(f) => f,
        None => {
            label_means = centroid::label_mean_centroids(&pass.representations, view.noisy_labels, view.num_classes);
            &label_means
        }
    };
    let (weights, other) = match cfg.prediction_source {
        PredictionSource::Conventional => (&pass.preds_c, &pass.preds_b),
        PredictionSource::Balanced => (&pass.preds_b, &pass.preds_c),
    };
    let centroids = match cfg.centroid {
        CentroidMode::Dacc => {
            let opts = CentroidOptions {
                tau_t: cfg.tau_t,
                temperature_scaling: cfg.temperature_scaling,
                use_confident_subset: cfg.confident_subset,
            };
            centroid::estimate_centroids(&pass.representations, weights, other, tau, &opts, Some(fallback))?
        }
        CentroidMode::PerClass => {
            centroid::per_class_centroids(&pass.representations, weights, view.noisy_labels, tau, Some(fallback))?
        }
    };
    let gamma = centroid::assignment_probabilities(&pass.representations, &centroids)?;
    let selection = select::select_clean(&gamma, view.noisy_labels, &cfg.gmm)?;
    Ok(SelectionPass {
        centroids,
        gamma,
        selection,
    })
}

fn check_loss<T: Scalar>(loss: T, epoch: usize, batch: usize) -> Result<f64> {
    let v = loss.to_f64_lossy();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {batch}")))
    }
}

fn add_rows<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, rows: &[usize], src_offset: usize, w: T) {
    for (j, &r) in rows.iter().enumerate() {
        for (d, &s) in dst.row_mut(r).iter_mut().zip(src.row(src_offset + j)) {
            *d = *d + w * s;
        }
    }
}

/// Warm-up: cross-entropy on the conventional head, balanced softmax with
/// the noisy-label class counts on the other, plus the balanced contrastive
/// term once `epoch > sbcl_warmup`. Returns the mean batch loss.
pub fn warmup_epoch<T: Scalar>(
    net: &mut ModelState<T>,
    view: &TrainView<'_, T>,
    epoch: usize,
    net_index: usize,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<f64> {
    let n = view.len();
    let k = view.num_classes;
    let mut rng = stream_rng(cfg.seed, epoch, net_index, PURPOSE_WARMUP);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let prior: Vec<usize> = view.class_counts.to_vec();
    let contrastive = cfg.contrastive_on(epoch);
    let tau_s = T::lit(cfg.tau_s);
    let w_sbcl = T::lit(cfg.lambda_sbcl);
    let lr = T::lit(cfg.lr_at(epoch));
    let mut total = 0.0;
    let mut batches = 0;
    for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
        let x = view.features.select_rows(rows);
        let labels: Vec<usize> = rows.iter().map(|&i| view.noisy_labels[i]).collect();
        let targets = losses::one_hot::<T>(&labels, k);
        let weak = augment(&x, Policy::Weak, &cfg.augment, scale, &mut rng);
        let rec = net.forward(&weak)?;
        let ce = losses::cross_entropy(&rec.logits_c, &targets)?;
        let bs = losses::balanced_softmax(&rec.logits_b, &targets, &prior)?;
        let mut grad = vec![T::zero(); net.num_params()];
        net.backward_accumulate(
            &rec,
            &OutputGrads {
                logits_c: Some(ce.grad),
                logits_b: Some(bs.grad),
                ..Default::default()
            },
            &mut grad,
        )?;
        let mut loss = ce.loss + bs.loss;
        if contrastive {
            let s1 = augment(&x, Policy::Strong, &cfg.augment, scale, &mut rng);
            let s2 = augment(&x, Policy::Strong, &cfg.augment, scale, &mut rng);
            let r1 = net.forward(&s1)?;
            let r2 = net.forward(&s2)?;
            let preds = rec.logits_c.softmax_rows();
            let groups = ConfidenceGroups::from_distributions(&preds.vstack(&preds)?, T::lit(cfg.tau_c));
            let z = r1.projections.vstack(&r2.projections)?;
            let out = losses::sbcl(&z, &groups, tau_s)?;
            loss = loss + w_sbcl * out.loss;
            let m = rows.len();
            let mut g1 = Matrix::zeros(m, z.cols());
            let mut g2 = Matrix::zeros(m, z.cols());
            let local: Vec<usize> = (0..m).collect();
            add_rows(&mut g1, &out.grad, &local, 0, w_sbcl);
            add_rows(&mut g2, &out.grad, &local, m, w_sbcl);
            for (r, g) in [(&r1, g1), (&r2, g2)] {
                net.backward_accumulate(
                    r,
                    &OutputGrads {
                        projections: Some(g),
                        ..Default::default()
                    },
                    &mut grad,
                )?;
            }
        }
        total += check_loss(loss, epoch, b)?;
        batches += 1;
        net.sgd_step(&grad, lr, T::lit(cfg.momentum), T::lit(cfg.weight_decay))?;
    }
    Ok(total / batches.max(1) as f64)
}

/// Per-epoch output of [`Trainer::step`], consumed by evaluation and dumps.
#[derive(Clone, Debug)]
pub struct EpochReport<T> {
    pub epoch: usize,
    pub phase: Phase,
    pub tau: f64,
    pub mean_loss: f64,
    /// Network A's centroids and selection (main phase only).
    pub selection: Option<SelectionPass<T>>,
    /// Pseudo-labels and groups of the pass that trained network A.
    pub pseudo: Option<(PseudoLabels<T>, ConfidenceGroups)>,
}

struct PartitionOutcome<T> {
    loss: f64,
    pseudo: PseudoLabels<T>,
    groups: ConfidenceGroups,
}

/// One main-phase epoch for one network on a given clean/noisy partition.
#[allow(clippy::too_many_arguments)]
fn train_on_partition<T: Scalar>(
    net: &mut ModelState<T>,
    partner: &ModelState<T>,
    net_index: usize,
    bank: &mut MemoryBank<T>,
    view: &TrainView<'_, T>,
    sel: &SelectionResult<T>,
    epoch: usize,
    cfg: &TrainConfig,
    scale: f64,
) -> Result<PartitionOutcome<T>> {
    let k = view.num_classes;
    let mut rng = stream_rng(cfg.seed, epoch, net_index, PURPOSE_PSEUDO);
    let views = AugmentedViews::build(view.features, &cfg.augment, scale, cfg.alpha_mixup, &mut rng)?;
    let (first, second) = if net_index == 0 { (&*net, partner) } else { (partner, &*net) };
    let pseudo = generate_pseudo_labels(
        first,
        second,
        &views,
        &sel.clean_mask,
        &sel.clean_posterior,
        view.noisy_labels,
        cfg.sharpen_t,
    )?;
    let groups = confidence_split(&pseudo, cfg.tau_c);
    let mut high = vec![false; view.len()];
    for &i in &groups.high_idx {
        high[i] = true;
    }

    let mut clean = sel.clean_indices();
    let mut noisy = sel.noisy_indices();
    if clean.is_empty() {
        warn!("epoch {epoch}: network {net_index} has no clean samples, skipping its update");
        return Ok(PartitionOutcome {
            loss: 0.0,
            pseudo,
            groups,
        });
    }
    let mut rng = stream_rng(cfg.seed, epoch, net_index, PURPOSE_BATCH);
    clean.shuffle(&mut rng);
    noisy.shuffle(&mut rng);

    let b = cfg.batch_size;
    let steps = clean.len().div_ceil(b);
    let prior = sel.class_prior();
    let lambda_u = T::lit(losses::ramp_weight(
        (epoch - cfg.warmup) as f64,
        cfg.ramp_epochs as f64,
        cfg.lambda_u_max,
    ));
    let lr = T::lit(cfg.lr_at(epoch));
    let weights = cfg.loss_weights();
    let (w_sbcl, w_midl) = (T::lit(cfg.lambda_sbcl), T::lit(cfg.lambda_midl));
    let use_sbcl = cfg.contrastive_on(epoch);
    let use_midl = cfg.method == Method::Dasc && cfg.use_midl;
    let mut total = 0.0;

    for step in 0..steps {
        let li: Vec<usize> = (0..b).map(|j| clean[(step * b + j) % clean.len()]).collect();
        let ui: Vec<usize> = if noisy.is_empty() {
            Vec::new()
        } else {
            (0..b).map(|j| noisy[(step * b + j) % noisy.len()]).collect()
        };
        let rows: Vec<usize> = li.iter().chain(&ui).copied().collect();
        let (nl, m) = (li.len(), rows.len());
        let av = AugmentedViews::build(&view.features.select_rows(&rows), &cfg.augment, scale, cfg.alpha_mixup, &mut rng)?;
        let targets = pseudo.y_hat.select_rows(&rows);

        // [strong1 L; strong2 L; strong1 U; strong2 U], labelled rows first
        let order: Vec<usize> = (0..nl)
            .chain(m..m + nl)
            .chain(nl..m)
            .chain(m + nl..2 * m)
            .collect();
        let inputs = av.strong1.vstack(&av.strong2)?.select_rows(&order);
        let tgts = targets.vstack(&targets)?.select_rows(&order);
        let mut perm: Vec<usize> = (0..order.len()).collect();
        perm.shuffle(&mut rng);
        let lam = losses::sample_mixup_lambda(cfg.alpha_mixup, &mut rng)?;
        let lam = T::lit(lam.max(1.0 - lam));
        let mixed_x = losses::mix(&inputs, &inputs.select_rows(&perm), lam)?;
        let mixed_t = losses::mix(&tgts, &tgts.select_rows(&perm), lam)?;
        let rec = net.forward(&mixed_x)?;
        let mm = losses::mixmatch_losses(&rec.logits_c, &mixed_t, 2 * nl, &Head::Conventional, lambda_u)?;
        let bmm = losses::mixmatch_losses(&rec.logits_b, &mixed_t, 2 * nl, &Head::Balanced(prior.clone()), lambda_u)?;
        let mut grad = vec![T::zero(); net.num_params()];
        net.backward_accumulate(
            &rec,
            &OutputGrads {
                logits_c: Some(mm.grad),
                logits_b: Some(bmm.grad),
                ..Default::default()
            },
            &mut grad,
        )?;
        let mut parts = LossParts {
            mixmatch: mm.loss,
            bmixmatch: bmm.loss,
            ..Default::default()
        };

        if use_sbcl || use_midl {
            let r1 = net.forward(&av.strong1)?;
            let r2 = net.forward(&av.strong2)?;
            let dp = r1.projections.cols();
            let mut g1 = Matrix::zeros(m, dp);
            let mut g2 = Matrix::zeros(m, dp);
            let local: Vec<usize> = (0..m).collect();
            if use_sbcl {
                let labels: Vec<usize> = rows.iter().map(|&i| groups.hard_labels[i]).collect();
                let flags: Vec<bool> = rows.iter().map(|&i| high[i]).collect();
                let g = ConfidenceGroups::from_labels(
                    &[labels.as_slice(), labels.as_slice()].concat(),
                    &[flags.as_slice(), flags.as_slice()].concat(),
                    k,
                );
                let z = r1.projections.vstack(&r2.projections)?;
                let out = losses::sbcl(&z, &g, T::lit(cfg.tau_s))?;
                parts.sbcl = out.loss;
                add_rows(&mut g1, &out.grad, &local, 0, w_sbcl);
                add_rows(&mut g2, &out.grad, &local, m, w_sbcl);
            }
            if use_midl {
                let low: Vec<usize> = (0..m).filter(|&j| !high[rows[j]]).collect();
                if !low.is_empty() {
                    let q = r1.projections.select_rows(&low);
                    let p = r2.projections.select_rows(&low);
                    let out = losses::midl(&q, &p, bank, T::lit(cfg.tau_m))?;
                    parts.midl = out.loss;
                    add_rows(&mut g1, &out.grad_query, &low, 0, w_midl);
                    add_rows(&mut g2, &out.grad_positive, &low, 0, w_midl);
                }
                let push: Vec<usize> = match cfg.bank_push {
                    BankPush::Low => low,
                    BankPush::All => local.clone(),
                };
                if !push.is_empty() {
                    let keys = match cfg.bank_keys {
                        BankKeys::Mixup => net.forward(&av.mix.select_rows(&push))?.projections,
                        BankKeys::Plain => r1.projections.select_rows(&push),
                    };
                    bank.push(&keys)?;
                }
            }
            for (r, g) in [(&r1, g1), (&r2, g2)] {
                net.backward_accumulate(
                    r,
                    &OutputGrads {
                        projections: Some(g),
                        ..Default::default()
                    },
                    &mut grad,
                )?;
            }
        }
        total += check_loss(losses::total_loss(&parts, &weights), epoch, step)?;
        net.sgd_step(&grad, lr, T::lit(cfg.momentum), T::lit(cfg.weight_decay))?;
    }
    Ok(PartitionOutcome {
        loss: total / steps as f64,
        pseudo,
        groups,
    })
}

/// Average of both heads of both networks.
pub fn predict<T: Scalar>(net_a: &ModelState<T>, net_b: &ModelState<T>, features: &Matrix<T>) -> Result<Matrix<T>> {
    let mut p = net_a.predict_proba(features)?;
    p.add_assign(&net_b.predict_proba(features)?);
    p.scale(T::lit(0.5));
    Ok(p)
}

/// Both networks plus what must persist between epochs.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    nets: [ModelState<T>; 2],
    banks: [MemoryBank<T>; 2],
    prev_centroids: [Option<Matrix<T>>; 2],
    epoch: usize,
    scale: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, net_cfg: NetConfig, view: &TrainView<'_, T>) -> Result<Self> {
        cfg.validate()?;
        net_cfg.validate()?;
        check_view(&net_cfg, view)?;
        let nets = [
            ModelState::new(net_cfg.clone(), init_seed(cfg.seed, 0))?,
            ModelState::new(net_cfg.clone(), init_seed(cfg.seed, 1))?,
        ];
        let dim = rep_dim(&cfg, &net_cfg);
        Ok(Self {
            banks: [MemoryBank::new(cfg.bank_capacity, dim), MemoryBank::new(cfg.bank_capacity, dim)],
            prev_centroids: [None, None],
            epoch: 0,
            scale: feature_scale(view.features),
            nets,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net_config(&self) -> &NetConfig {
        self.nets[0].config()
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn nets(&self) -> (&ModelState<T>, &ModelState<T>) {
        (&self.nets[0], &self.nets[1])
    }

    pub fn bank(&self, net: usize) -> &MemoryBank<T> {
        &self.banks[net]
    }

    pub fn previous_centroids(&self, net: usize) -> Option<&Matrix<T>> {
        self.prev_centroids[net].as_ref()
    }

    pub fn predict(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        predict(&self.nets[0], &self.nets[1], features)
    }

    /// Run the next epoch.
    pub fn step(&mut self, view: &TrainView<'_, T>) -> Result<EpochReport<T>> {
        if self.is_finished() {
            return Err(Error::Config(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        check_view(self.net_config(), view)?;
        let t = self.epoch + 1;
        let report = if self.cfg.method == Method::Ce || t <= self.cfg.warmup {
            self.warmup_phase(view, t)?
        } else {
            self.main_phase(view, t)?
        };
        self.epoch = t;
        Ok(report)
    }

    fn warmup_phase(&mut self, view: &TrainView<'_, T>, t: usize) -> Result<EpochReport<T>> {
        let mut loss = 0.0;
        for (i, net) in self.nets.iter_mut().enumerate() {
            loss += warmup_epoch(net, view, t, i, &self.cfg, self.scale)?;
        }
        Ok(EpochReport {
            epoch: t,
            phase: Phase::Warmup,
            tau: self.cfg.threshold(t, view.num_classes),
            mean_loss: loss / 2.0,
            selection: None,
            pseudo: None,
        })
    }

    fn main_phase(&mut self, view: &TrainView<'_, T>, t: usize) -> Result<EpochReport<T>> {
        let tau = self.cfg.threshold(t, view.num_classes);
        let mut passes = Vec::with_capacity(2);
        for i in 0..2 {
            let pass = selection_pass(&self.nets[i], view, tau, &self.cfg, self.prev_centroids[i].as_ref())?;
            debug!(
                "epoch {t} net {i}: {} confident, {} clean",
                pass.centroids.confident_count(),
                pass.selection.clean_count()
            );
            passes.push(pass);
        }
        for (prev, pass) in self.prev_centroids.iter_mut().zip(&passes) {
            *prev = Some(pass.centroids.centroids.clone());
        }
        let mut loss = 0.0;
        let mut pseudo_a = None;
        for i in 0..2 {
            let source = match self.cfg.co_mode {
                CoMode::Cross => 1 - i,
                CoMode::Own => i,
            };
            let (left, right) = self.nets.split_at_mut(1);
            let (net, partner) = if i == 0 {
                (&mut left[0], &right[0])
            } else {
                (&mut right[0], &left[0])
            };
            let out = train_on_partition(
                net,
                partner,
                i,
                &mut self.banks[i],
                view,
                &passes[source].selection,
                t,
                &self.cfg,
                self.scale,
            )?;
            loss += out.loss;
            if i == 0 {
                pseudo_a = Some((out.pseudo, out.groups));
            }
        }
        Ok(EpochReport {
            epoch: t,
            phase: Phase::Main,
            tau,
            mean_loss: loss / 2.0,
            selection: passes.into_iter().next(),
            pseudo: pseudo_a,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.nets[0].save(&dir.join("net_a.bin"))?;
        self.nets[1].save(&dir.join("net_b.bin"))?;
        let state = TrainerState {
            format: 1,
            epoch: self.epoch,
            config_hash: config_hash(&self.cfg, self.net_config()),
            banks: self
                .banks
                .iter()
                .map(|b| BankState {
                    capacity: b.capacity(),
                    keys: MatrixBits::from_matrix(&b.to_matrix()),
                })
                .collect(),
            prev_centroids: self.prev_centroids.iter().map(|c| c.as_ref().map(MatrixBits::from_matrix)).collect(),
        };
        let path = dir.join("trainer.json");
        let json = serde_json::to_string_pretty(&state)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Restore a checkpoint written with the same configuration.
    pub fn load_checkpoint(dir: &Path, cfg: TrainConfig, view: &TrainView<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if state.format != 1 {
            return Err(Error::Checkpoint(format!("unsupported trainer state format {}", state.format)));
        }
        let net_a = ModelState::load(&dir.join("net_a.bin"))?;
        let net_b = ModelState::load(&dir.join("net_b.bin"))?;
        if net_a.config() != net_b.config() {
            return Err(Error::Checkpoint("networks in checkpoint disagree in shape".into()));
        }
        let hash = config_hash(&cfg, net_a.config());
        if hash != state.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with a different configuration ({} vs {})",
                &state.config_hash[..12.min(state.config_hash.len())],
                &hash[..12]
            )));
        }
        check_view(net_a.config(), view)?;
        if state.banks.len() != 2 || state.prev_centroids.len() != 2 {
            return Err(Error::Checkpoint("trainer state must describe two networks".into()));
        }
        let dim = rep_dim(&cfg, net_a.config());
        let mut banks = Vec::with_capacity(2);
        for b in &state.banks {
            let keys = b.keys.to_matrix()?;
            banks.push(MemoryBank::restore(b.capacity, dim, &keys).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        let mut prev = Vec::with_capacity(2);
        for c in &state.prev_centroids {
            prev.push(c.as_ref().map(MatrixBits::to_matrix).transpose()?);
        }
        let [b0, b1]: [MemoryBank<T>; 2] = banks.try_into().expect("two banks");
        let [c0, c1]: [Option<Matrix<T>>; 2] = prev.try_into().expect("two centroid sets");
        Ok(Self {
            nets: [net_a, net_b],
            banks: [b0, b1],
            prev_centroids: [c0, c1],
            epoch: state.epoch,
            scale: feature_scale(view.features),
            cfg,
        })
    }
}

fn rep_dim(cfg: &TrainConfig, net: &NetConfig) -> usize {
    match cfg.representation {
        Representation::Projector => net.d_proj,
        Representation::Backbone => net.d_embed,
    }
}

fn check_view<T: Scalar>(net: &NetConfig, view: &TrainView<'_, T>) -> Result<()> {
    if view.features.cols() != net.d_in || view.num_classes != net.num_classes {
        return Err(Error::Shape(format!(
            "data has d={} K={}, network expects d={} K={}",
            view.features.cols(),
            view.num_classes,
            net.d_in,
            net.num_classes
        )));
    }
    if view.is_empty() {
        return Err(Error::Shape("training set is empty".into()));
    }
    Ok(())
}

/// Matrix with values stored as IEEE bit patterns so JSON round-trips exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MatrixBits {
    rows: usize,
    cols: usize,
    bits: Vec<u64>,
}

impl MatrixBits {
    fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            bits: m.as_slice().iter().map(|v| v.to_f64_lossy().to_bits()).collect(),
        }
    }

    fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        let data = self.bits.iter().map(|&b| T::lit(f64::from_bits(b))).collect();
        Matrix::from_vec(self.rows, self.cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankState {
    capacity: usize,
    keys: MatrixBits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    format: u32,
    epoch: usize,
    config_hash: String,
    banks: Vec<BankState>,
    prev_centroids: Vec<Option<MatrixBits>>,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Where `metrics.jsonl`, checkpoints and dumps go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every k epochs (0: only after the last epoch).
    pub checkpoint_every: usize,
    /// Stop after this epoch even if more remain.
    pub stop_after: Option<usize>,
    /// Write centroid, assignment and selection dumps every k epochs (0: never).
    pub dump_every: usize,
    pub class_sets: ClassSetMode,
    pub auc_score: AucScore,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            checkpoint_every: 0,
            stop_after: None,
            dump_every: 0,
            class_sets: ClassSetMode::Thirds,
            auc_score: AucScore::Posterior,
        }
    }
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("ckpt_epoch{epoch}"))
}

/// Latest `ckpt_epoch{t}` directory under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(out_dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let t: usize = name.strip_prefix("ckpt_epoch")?.parse().ok()?;
            e.path().join("trainer.json").is_file().then(|| (t, e.path()))
        })
        .max_by_key(|(t, _)| *t)
}

/// Keep only records for epochs `<= keep` (used when resuming).
fn truncate_metrics(path: &Path, keep: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let records = MetricsRecord::read_all(path)?;
    let mut text = String::new();
    for r in records.iter().filter(|r| r.epoch <= keep) {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train to completion (or `stop_after`), evaluating after every epoch.
/// Training sees only `train.train_view()`; true labels are read by the
/// evaluation side alone.
pub fn run_training<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    opts: &RunOptions,
) -> Result<Vec<MetricsRecord>> {
    let view = train.train_view();
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let Some(p) = &metrics_path {
        truncate_metrics(p, trainer.epoch())?;
    }
    let total = trainer.config().epochs;
    let mut records = Vec::new();
    while !trainer.is_finished() {
        let report = trainer.step(&view)?;
        let t = report.epoch;
        let (a, b) = trainer.nets();
        let record = eval::evaluate(a, b, test, train, &report, opts.class_sets, opts.auc_score)?;
        info!("{}", record.summary_line());
        if let Some(p) = &metrics_path {
            record.append_to(p)?;
        }
        if let Some(dir) = &opts.out_dir {
            if opts.dump_every > 0 && t % opts.dump_every == 0 {
                if let Some(pass) = &report.selection {
                    centroid::dump_centroids(dir, t, &pass.centroids)?;
                    centroid::dump_gamma(dir, t, &pass.gamma)?;
                    select::dump_selection(dir, t, &pass.selection, train.noisy_labels(), train.true_labels())?;
                }
            }
            let stopping = opts.stop_after == Some(t);
            if t == total || stopping || (opts.checkpoint_every > 0 && t % opts.checkpoint_every == 0) {
                trainer.save_checkpoint(&checkpoint_dir(dir, t))?;
            }
        }
        records.push(record);
        if opts.stop_after == Some(t) {
            break;
        }
    }
    Ok(records)
}
