//! Diagnostics: accuracy by class regime, noisy-label detection AUC,
//! selection precision/recall and pseudo-label accuracy per confidence group.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ConfidenceGroups;
use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};
use crate::net::ModelState;
use crate::select::SelectionResult;
use crate::train::{self, EpochReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSetMode {
    /// Contiguous thirds by training frequency (sizes ceil(K/3), then halves).
    Thirds,
    /// Many: more than 100 samples, Few: fewer than 20.
    Absolute,
}

impl FromStr for ClassSetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thirds" => Ok(ClassSetMode::Thirds),
            "absolute" => Ok(ClassSetMode::Absolute),
            other => Err(Error::Config(format!("unknown class-set mode `{other}` (thirds|absolute)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Many,
    Medium,
    Few,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSets {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
    regime: Vec<Regime>,
}

impl ClassSets {
    pub fn regime(&self, class: usize) -> Regime {
        self.regime[class]
    }
}

/// Partition classes into Many/Medium/Few by training frequency. Ties in
/// frequency are broken by class index; fewer than three classes all go to Many.
pub fn class_sets(counts: &[usize], mode: ClassSetMode) -> ClassSets {
    let k = counts.len();
    let mut regime = vec![Regime::Many; k];
    match mode {
        ClassSetMode::Thirds if k >= 3 => {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let many = k.div_ceil(3);
            let medium = (k - many).div_ceil(2);
            for (rank, &c) in order.iter().enumerate() {
                regime[c] = if rank < many {
                    Regime::Many
                } else if rank < many + medium {
                    Regime::Medium
                } else {
                    Regime::Few
                };
            }
        }
        ClassSetMode::Thirds => {}
        ClassSetMode::Absolute => {
            for (c, &n) in counts.iter().enumerate() {
                regime[c] = if n > 100 {
                    Regime::Many
                } else if n >= 20 {
                    Regime::Medium
                } else {
                    Regime::Few
                };
            }
        }
    }
    let pick = |r: Regime| (0..k).filter(|&c| regime[c] == r).collect();
    ClassSets {
        many: pick(Regime::Many),
        medium: pick(Regime::Medium),
        few: pick(Regime::Few),
        regime,
    }
}

/// Mann-Whitney AUC: probability a positive outscores a negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc<T: Scalar>(scores: &[T], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoAccuracy {
    pub all: Option<f64>,
    pub high: Option<f64>,
    pub low: Option<f64>,
}

fn hit_rate(idx: &[usize], hits: &[bool]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    Some(idx.iter().filter(|&&i| hits[i]).count() as f64 / idx.len() as f64)
}

/// Fraction of rows whose pseudo-label argmax equals the true label, overall
/// and within each confidence group.
pub fn pseudo_accuracy<T: Scalar>(pseudo: &Matrix<T>, true_labels: &[usize], groups: &ConfidenceGroups) -> PseudoAccuracy {
    let hits: Vec<bool> = pseudo
        .iter_rows()
        .zip(true_labels)
        .map(|(r, &y)| scalar::argmax(r) == y)
        .collect();
    let all: Vec<usize> = (0..hits.len()).collect();
    PseudoAccuracy {
        all: hit_rate(&all, &hits),
        high: hit_rate(&groups.high_idx, &hits),
        low: hit_rate(&groups.low_idx, &hits),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyBreakdown {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Test samples per regime, for recombining the regime accuracies.
    pub regime_sizes: [usize; 3],
}

pub fn accuracy_breakdown<T: Scalar>(probs: &Matrix<T>, true_labels: &[usize], sets: &ClassSets) -> AccuracyBreakdown {
    let k = probs.cols();
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (row, &y) in probs.iter_rows().zip(true_labels) {
        total[y] += 1;
        if scalar::argmax(row) == y {
            correct[y] += 1;
        }
    }
    let rate = |classes: &[usize]| -> (Option<f64>, usize) {
        let c: usize = classes.iter().map(|&k| correct[k]).sum();
        let t: usize = classes.iter().map(|&k| total[k]).sum();
        ((t > 0).then(|| c as f64 / t as f64), t)
    };
    let (many, nm) = rate(&sets.many);
    let (medium, nd) = rate(&sets.medium);
    let (few, nf) = rate(&sets.few);
    let all: usize = total.iter().sum();
    AccuracyBreakdown {
        overall: correct.iter().sum::<usize>() as f64 / all.max(1) as f64,
        many,
        medium,
        few,
        per_class: (0..k)
            .map(|c| (total[c] > 0).then(|| correct[c] as f64 / total[c] as f64))
            .collect(),
        regime_sizes: [nm, nd, nf],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AucScore {
    /// Clean-component GMM posterior.
    Posterior,
    /// Raw assignment probability of the labelled class.
    Gamma,
}

impl FromStr for AucScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(AucScore::Posterior),
            "gamma" => Ok(AucScore::Gamma),
            other => Err(Error::Config(format!("unknown AUC score `{other}` (posterior|gamma)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub auc: Option<f64>,
    pub auc_few: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub clean_fraction: f64,
}

/// Detection quality of a clean/noisy split; "positive" means correctly labelled.
pub fn selection_metrics<T: Scalar>(
    sel: &SelectionResult<T>,
    noisy_labels: &[usize],
    true_labels: &[usize],
    sets: &ClassSets,
    score: AucScore,
) -> SelectionMetrics {
    let clean_truth: Vec<bool> = noisy_labels.iter().zip(true_labels).map(|(a, b)| a == b).collect();
    let scores = match score {
        AucScore::Posterior => &sel.clean_posterior,
        AucScore::Gamma => &sel.gamma_label,
    };
    let few_idx: Vec<usize> = (0..noisy_labels.len())
        .filter(|&i| sets.regime(noisy_labels[i]) == Regime::Few)
        .collect();
    let few_scores: Vec<T> = few_idx.iter().map(|&i| scores[i]).collect();
    let few_truth: Vec<bool> = few_idx.iter().map(|&i| clean_truth[i]).collect();

    let selected = sel.clean_count();
    let true_clean = clean_truth.iter().filter(|&&c| c).count();
    let tp = sel.clean_mask.iter().zip(&clean_truth).filter(|(&s, &c)| s && c).count();
    SelectionMetrics {
        auc: roc_auc(scores, &clean_truth),
        auc_few: if few_idx.is_empty() {
            None
        } else {
            roc_auc(&few_scores, &few_truth)
        },
        precision: (selected > 0).then(|| tp as f64 / selected as f64),
        recall: (true_clean > 0).then(|| tp as f64 / true_clean as f64),
        clean_fraction: selected as f64 / sel.clean_mask.len().max(1) as f64,
    }
}

/// Fill a record from the test predictions of both networks and the epoch's
/// training artifacts. Class sets follow the training true-label
/// frequencies (noisy counts when true labels are absent).
pub fn evaluate<T: Scalar>(
    net_a: &ModelState<T>,
    net_b: &ModelState<T>,
    test: &Dataset<T>,
    train: &Dataset<T>,
    report: &EpochReport<T>,
    mode: ClassSetMode,
    score: AucScore,
) -> Result<MetricsRecord> {
    let k = train.num_classes();
    let train_true = train.true_labels();
    let counts = match train_true {
        Some(t) => crate::data::count_labels(t, k),
        None => train.class_counts().to_vec(),
    };
    let sets = class_sets(&counts, mode);
    let probs = train::predict(net_a, net_b, test.features())?;
    let test_labels = test.true_labels().unwrap_or(test.noisy_labels());
    let acc = accuracy_breakdown(&probs, test_labels, &sets);

    let mut record = MetricsRecord {
        epoch: report.epoch,
        phase: report.phase.to_string(),
        tau: report.tau,
        train_loss: report.mean_loss,
        overall_acc: Some(acc.overall),
        many_acc: acc.many,
        medium_acc: acc.medium,
        few_acc: acc.few,
        per_class_acc: acc.per_class,
        ..Default::default()
    };
    if let Some(pass) = &report.selection {
        record.clean_fraction = Some(pass.selection.clean_count() as f64 / train.len().max(1) as f64);
        if let Some(truth) = train_true {
            let m = selection_metrics(&pass.selection, train.noisy_labels(), truth, &sets, score);
            record.selection_auc = m.auc;
            record.selection_auc_few = m.auc_few;
            record.selection_precision = m.precision;
            record.selection_recall = m.recall;
        }
    }
    if let (Some((pseudo, groups)), Some(truth)) = (&report.pseudo, train_true) {
        let p = pseudo_accuracy(&pseudo.y_hat, truth, groups);
        record.pseudo_acc_all = p.all;
        record.pseudo_acc_high = p.high;
        record.pseudo_acc_low = p.low;
    }
    Ok(record)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: String,
    pub tau: f64,
    pub train_loss: f64,
    pub overall_acc: Option<f64>,
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub selection_auc: Option<f64>,
    pub selection_auc_few: Option<f64>,
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub clean_fraction: Option<f64>,
    pub pseudo_acc_all: Option<f64>,
    pub pseudo_acc_high: Option<f64>,
    pub pseudo_acc_low: Option<f64>,
    pub per_class_acc: Vec<Option<f64>>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.to_json_line()).map_err(|e| Error::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(Self::from_json_line)
            .collect()
    }

    pub fn summary_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x));
        format!(
            "epoch {:>3} {:<6} tau {:.4} loss {:.4} acc {} many {} med {} few {} auc {} clean {}",
            self.epoch,
            self.phase,
            self.tau,
            self.train_loss,
            f(self.overall_acc),
            f(self.many_acc),
            f(self.medium_acc),
            f(self.few_acc),
            f(self.selection_auc),
            f(self.clean_fraction)
        )
    }
}
