//! Loss functions with gradients with respect to network outputs, and the
//! FIFO memory bank of negative keys.
//!
//! Every loss returns its value together with `dL/d(output)` so the caller
//! can push it through [`ModelState::backward`](crate::net::ModelState::backward).

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Matrix<T>,
}

fn check_same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn soft_ce_with_offsets<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>, offsets: Option<&[T]>) -> Result<LossOutput<T>> {
    check_same_shape(logits, targets, "logits/targets")?;
    let b = logits.rows();
    let k = logits.cols();
    let mut grad = Matrix::zeros(b, k);
    if b == 0 {
        return Ok(LossOutput { loss: T::zero(), grad });
    }
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut adjusted = vec![T::zero(); k];
    let mut probs = vec![T::zero(); k];
    let mut loss = T::zero();
    for i in 0..b {
        for (c, a) in adjusted.iter_mut().enumerate() {
            *a = logits.get(i, c) + offsets.map_or(T::zero(), |o| o[c]);
        }
        let lse = scalar::log_sum_exp(&adjusted);
        scalar::softmax_into(&adjusted, &mut probs);
        let t = targets.row(i);
        let t_sum: T = t.iter().copied().sum();
        for c in 0..k {
            loss = loss - t[c] * (adjusted[c] - lse);
            grad.set(i, c, (probs[c] * t_sum - t[c]) * inv_b);
        }
    }
    Ok(LossOutput { loss: loss * inv_b, grad })
}

/// Mean soft-label cross-entropy `-sum_k t_k log softmax(logits)_k`.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<LossOutput<T>> {
    soft_ce_with_offsets(logits, targets, None)
}

/// Balanced softmax: cross-entropy on `logits + log n`, with `n` the class
/// prior (counts, each at least 1).
pub fn balanced_softmax<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>, prior: &[usize]) -> Result<LossOutput<T>> {
    if prior.len() != logits.cols() {
        return Err(Error::Shape(format!(
            "prior has {} classes, logits {}",
            prior.len(),
            logits.cols()
        )));
    }
    let offsets: Vec<T> = prior.iter().map(|&n| T::from_usize_lossy(n.max(1)).ln()).collect();
    soft_ce_with_offsets(logits, targets, Some(&offsets))
}

/// One-hot rows for hard labels.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, T::one());
    }
    m
}

/// High/low confidence partition of a batch, with the high group bucketed
/// by hard label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceGroups {
    pub high_idx: Vec<usize>,
    pub low_idx: Vec<usize>,
    /// Argmax of each row's pseudo-label.
    pub hard_labels: Vec<usize>,
    /// `buckets[j]`: high-confidence rows whose hard label is `j`.
    pub buckets: Vec<Vec<usize>>,
}

impl ConfidenceGroups {
    /// `high` iff the row's largest entry strictly exceeds `tau_c`.
    pub fn from_distributions<T: Scalar>(pseudo: &Matrix<T>, tau_c: T) -> Self {
        let hard: Vec<usize> = pseudo.iter_rows().map(scalar::argmax).collect();
        let high: Vec<bool> = pseudo
            .iter_rows()
            .zip(&hard)
            .map(|(r, &y)| r[y] > tau_c)
            .collect();
        Self::from_labels(&hard, &high, pseudo.cols())
    }

    pub fn from_labels(hard_labels: &[usize], high: &[bool], num_classes: usize) -> Self {
        let mut high_idx = Vec::new();
        let mut low_idx = Vec::new();
        let mut buckets = vec![Vec::new(); num_classes];
        for (i, (&y, &h)) in hard_labels.iter().zip(high).enumerate() {
            if h {
                high_idx.push(i);
                buckets[y].push(i);
            } else {
                low_idx.push(i);
            }
        }
        Self {
            high_idx,
            low_idx,
            hard_labels: hard_labels.to_vec(),
            buckets,
        }
    }

    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }
}

fn check_temperature(t: f64, what: &str) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("{what} must be positive, got {t}")));
    }
    Ok(())
}

/// Balanced supervised contrastive loss over the high-confidence rows of `z`.
///
/// For a high-confidence row `i` with hard label `y`:
///
/// ```text
/// L(i) = -1/|B_y| * sum_{p in B_y \ {i}} log( exp(z_i.z_p/t) / D_i )
/// D_i  = sum_j 1/|B_j| * sum_{k in B_j} exp(z_i.z_k/t)
/// ```
///
/// `D_i` includes `i` itself. The loss is the mean of `L(i)` over the whole
/// high group; rows without positives contribute zero. The returned gradient
/// covers every row of `z` (zero outside the high group).
pub fn sbcl<T: Scalar>(z: &Matrix<T>, groups: &ConfidenceGroups, tau_s: T) -> Result<LossOutput<T>> {
    check_temperature(tau_s.to_f64_lossy(), "tau_s")?;
    if groups.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} grouped rows for {} projections",
            groups.len(),
            z.rows()
        )));
    }
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let high = &groups.high_idx;
    if high.is_empty() {
        return Ok(LossOutput { loss: T::zero(), grad });
    }
    let inv_t = T::one() / tau_s;
    let inv_h = T::one() / T::from_usize_lossy(high.len());
    let bucket_w: Vec<T> = groups
        .buckets
        .iter()
        .map(|b| {
            if b.is_empty() {
                T::zero()
            } else {
                T::one() / T::from_usize_lossy(b.len())
            }
        })
        .collect();

    let mut sims = vec![T::zero(); high.len()];
    let mut loss = T::zero();
    for &i in high {
        let y = groups.hard_labels[i];
        let bucket = &groups.buckets[y];
        let positives = bucket.len() - 1;
        if positives == 0 {
            continue;
        }
        let zi = z.row(i);
        for (s, &k) in sims.iter_mut().zip(high) {
            *s = scalar::dot(zi, z.row(k)) * inv_t;
        }
        let m = sims.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (&s, &k) in sims.iter().zip(high) {
            denom = denom + bucket_w[groups.hard_labels[k]] * (s - m).exp();
        }
        let log_d = m + denom.ln();
        let inv_n = T::one() / T::from_usize_lossy(bucket.len());

        // dL/ds_ik accumulated into per-pair coefficients
        let pos_coef = -(inv_n * inv_h);
        let den_scale = T::from_usize_lossy(positives) * inv_n * inv_h / denom;
        for (pos, &k) in high.iter().enumerate() {
            let mut c = den_scale * bucket_w[groups.hard_labels[k]] * (sims[pos] - m).exp();
            if k != i && groups.hard_labels[k] == y {
                loss = loss - inv_n * (sims[pos] - log_d);
                c = c + pos_coef;
            }
            if c == T::zero() {
                continue;
            }
            let c = c * inv_t;
            // s_ik = z_i . z_k / t contributes to both rows
            let zk: Vec<T> = z.row(k).to_vec();
            for (g, &v) in grad.row_mut(i).iter_mut().zip(&zk) {
                *g = *g + c * v;
            }
            for (g, &v) in grad.row_mut(k).iter_mut().zip(zi) {
                *g = *g + c * v;
            }
        }
    }
    Ok(LossOutput { loss: loss * inv_h, grad })
}

/// Convex combination `lambda * a + (1 - lambda) * b` of inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPair<T> {
    pub lambda: T,
    pub mixed_input: Matrix<T>,
    pub mixed_target: Option<Matrix<T>>,
}

pub fn sample_mixup_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    check_temperature(alpha, "mixup alpha")?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
    Ok(beta.sample(rng))
}

pub fn mix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, lambda: T) -> Result<Matrix<T>> {
    check_same_shape(a, b, "mixup operands")?;
    let mut out = a.clone();
    let one_minus = T::one() - lambda;
    for (o, &bv) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o = lambda * *o + one_minus * bv;
    }
    Ok(out)
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`, one draw for the pair.
pub fn mixup<T: Scalar, R: Rng + ?Sized>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    targets: Option<(&Matrix<T>, &Matrix<T>)>,
    alpha: f64,
    rng: &mut R,
) -> Result<MixupPair<T>> {
    let lambda = T::lit(sample_mixup_lambda(alpha, rng)?);
    mixup_with_lambda(a, b, targets, lambda)
}

pub fn mixup_with_lambda<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    targets: Option<(&Matrix<T>, &Matrix<T>)>,
    lambda: T,
) -> Result<MixupPair<T>> {
    let mixed_input = mix(a, b, lambda)?;
    let mixed_target = match targets {
        Some((ta, tb)) => Some(mix(ta, tb, lambda)?),
        None => None,
    };
    Ok(MixupPair {
        lambda,
        mixed_input,
        mixed_target,
    })
}

/// Fixed-capacity FIFO of detached, unit-norm negative keys.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    queue: VecDeque<Vec<T>>,
    capacity: usize,
    dim: usize,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Oldest first.
    pub fn keys(&self) -> impl Iterator<Item = &[T]> {
        self.queue.iter().map(Vec::as_slice)
    }

    /// Append every row of `keys` (renormalised), evicting the oldest entries
    /// beyond capacity.
    pub fn push(&mut self, keys: &Matrix<T>) -> Result<()> {
        if keys.rows() > 0 && keys.cols() != self.dim {
            return Err(Error::Shape(format!(
                "bank stores {}-d keys, got {}",
                self.dim,
                keys.cols()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for row in keys.iter_rows() {
            let n = scalar::l2_norm(row).max(T::lit(1e-12));
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(row.iter().map(|&v| v / n).collect());
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        let data = self.queue.iter().flatten().copied().collect();
        Matrix::from_vec(self.queue.len(), self.dim, data).expect("bank rows share one width")
    }

    pub fn from_keys(capacity: usize, dim: usize, keys: &Matrix<T>) -> Result<Self> {
        let mut b = Self::new(capacity, dim);
        b.push(keys)?;
        Ok(b)
    }

    /// Rebuild a bank from keys exactly as stored (no renormalisation), as
    /// needed to resume bit-for-bit.
    pub fn restore(capacity: usize, dim: usize, keys: &Matrix<T>) -> Result<Self> {
        if keys.rows() > capacity || (keys.rows() > 0 && keys.cols() != dim) {
            return Err(Error::Shape(format!(
                "{}x{} keys do not fit a bank of {capacity} {dim}-d slots",
                keys.rows(),
                keys.cols()
            )));
        }
        let mut b = Self::new(capacity, dim);
        b.queue.extend(keys.iter_rows().map(<[T]>::to_vec));
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MidlOutput<T> {
    pub loss: T,
    pub grad_query: Matrix<T>,
    pub grad_positive: Matrix<T>,
}

/// Instance discrimination against the bank:
///
/// ```text
/// L(i) = -log( e^{q_i.p_i/t} / (e^{q_i.p_i/t} + sum_{m in M} e^{q_i.m/t}) )
/// ```
///
/// averaged over the query rows. Bank keys are constants.
pub fn midl<T: Scalar>(queries: &Matrix<T>, positives: &Matrix<T>, bank: &MemoryBank<T>, tau_m: T) -> Result<MidlOutput<T>> {
    check_temperature(tau_m.to_f64_lossy(), "tau_m")?;
    check_same_shape(queries, positives, "queries/positives")?;
    let n = queries.rows();
    let mut grad_query = Matrix::zeros(n, queries.cols());
    let mut grad_positive = Matrix::zeros(n, queries.cols());
    if n == 0 || bank.is_empty() {
        return Ok(MidlOutput {
            loss: T::zero(),
            grad_query,
            grad_positive,
        });
    }
    if bank.dim() != queries.cols() {
        return Err(Error::Shape("bank key width differs from query width".into()));
    }
    let inv_t = T::one() / tau_m;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut logits = vec![T::zero(); bank.len() + 1];
    let mut probs = vec![T::zero(); bank.len() + 1];
    let mut loss = T::zero();
    for i in 0..n {
        let q = queries.row(i);
        let p = positives.row(i);
        logits[0] = scalar::dot(q, p) * inv_t;
        for (l, m) in logits[1..].iter_mut().zip(bank.keys()) {
            *l = scalar::dot(q, m) * inv_t;
        }
        loss = loss + scalar::log_sum_exp(&logits) - logits[0];
        scalar::softmax_into(&logits, &mut probs);
        let cp = (probs[0] - T::one()) * inv_t * inv_n;
        {
            let gq = grad_query.row_mut(i);
            for (g, &pv) in gq.iter_mut().zip(p) {
                *g = *g + cp * pv;
            }
            for (&pm, m) in probs[1..].iter().zip(bank.keys()) {
                let c = pm * inv_t * inv_n;
                for (g, &mv) in gq.iter_mut().zip(m) {
                    *g = *g + c * mv;
                }
            }
        }
        for (g, &qv) in grad_positive.row_mut(i).iter_mut().zip(q) {
            *g = *g + cp * qv;
        }
    }
    Ok(MidlOutput {
        loss: loss * inv_n,
        grad_query,
        grad_positive,
    })
}

/// Which classifier head a MixMatch term trains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    Conventional,
    /// Balanced softmax with this class prior on the supervised part.
    Balanced(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixMatchOutput<T> {
    pub loss: T,
    pub supervised: T,
    pub unsupervised: T,
    /// Gradient for all rows, labelled rows first.
    pub grad: Matrix<T>,
}

/// Simplified MixMatch objective on mixed logits. The first `n_labeled` rows
/// are the labelled part (cross-entropy or balanced softmax against mixed
/// refined targets); the rest get `lambda_u * mean((softmax - target)^2)`
/// over all unlabelled entries.
pub fn mixmatch_losses<T: Scalar>(
    logits: &Matrix<T>,
    targets: &Matrix<T>,
    n_labeled: usize,
    head: &Head,
    lambda_u: T,
) -> Result<MixMatchOutput<T>> {
    check_same_shape(logits, targets, "mixmatch logits/targets")?;
    if n_labeled > logits.rows() {
        return Err(Error::Shape("more labelled rows than logits".into()));
    }
    let k = logits.cols();
    let lab: Vec<usize> = (0..n_labeled).collect();
    let unl: Vec<usize> = (n_labeled..logits.rows()).collect();
    let (ll, lt) = (logits.select_rows(&lab), targets.select_rows(&lab));
    let sup = match head {
        Head::Conventional => cross_entropy(&ll, &lt)?,
        Head::Balanced(prior) => balanced_softmax(&ll, &lt, prior)?,
    };
    let mut grad = Matrix::zeros(logits.rows(), k);
    for i in 0..n_labeled {
        grad.row_mut(i).copy_from_slice(sup.grad.row(i));
    }
    let mut unsup = T::zero();
    if !unl.is_empty() && lambda_u != T::zero() {
        let scale = T::one() / T::from_usize_lossy(unl.len() * k);
        let mut p = vec![T::zero(); k];
        let mut dp = vec![T::zero(); k];
        for &i in &unl {
            scalar::softmax_into(logits.row(i), &mut p);
            let t = targets.row(i);
            for c in 0..k {
                let diff = p[c] - t[c];
                unsup = unsup + diff * diff;
                dp[c] = T::lit(2.0) * lambda_u * scale * diff;
            }
            let along = scalar::dot(&dp, &p);
            for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g = p[c] * (dp[c] - along);
            }
        }
        unsup = unsup * scale;
    }
    Ok(MixMatchOutput {
        loss: sup.loss + lambda_u * unsup,
        supervised: sup.loss,
        unsupervised: unsup,
        grad,
    })
}

/// Linear ramp of the unlabelled weight, `0 -> lambda_u_max` over `ramp_epochs`.
pub fn ramp_weight(epochs_since_warmup: f64, ramp_epochs: f64, lambda_u_max: f64) -> f64 {
    if ramp_epochs <= 0.0 {
        return lambda_u_max;
    }
    (epochs_since_warmup / ramp_epochs).clamp(0.0, 1.0) * lambda_u_max
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub mixmatch: T,
    pub bmixmatch: T,
    pub sbcl: T,
    pub midl: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_sbcl: f64,
    pub lambda_midl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sbcl: 0.5,
            lambda_midl: 0.3,
        }
    }
}

/// `mixmatch + bmixmatch + lambda_sbcl * sbcl + lambda_midl * midl`.
pub fn total_loss<T: Scalar>(parts: &LossParts<T>, w: &LossWeights) -> T {
    parts.mixmatch + parts.bmixmatch + T::lit(w.lambda_sbcl) * parts.sbcl + T::lit(w.lambda_midl) * parts.midl
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn balanced_softmax_two_class_example() {
        let out = balanced_softmax(&m(&[&[0.0, 0.0]]), &m(&[&[0.0, 1.0]]), &[9, 1]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        assert!((out.loss - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn uniform_prior_matches_cross_entropy() {
        let logits = m(&[&[0.3, -1.0, 2.0], &[0.0, 0.5, -0.5]]);
        let t = m(&[&[0.2, 0.3, 0.5], &[1.0, 0.0, 0.0]]);
        let a = balanced_softmax(&logits, &t, &[7, 7, 7]).unwrap();
        let b = cross_entropy(&logits, &t).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sbcl_pair_example() {
        let tau = 0.1;
        let z = m(&[&unit(&[1.0, 0.2]), &unit(&[0.3, 1.0])]);
        let s: f64 = z.row(0).iter().zip(z.row(1)).map(|(a, b)| a * b).sum();
        let groups = ConfidenceGroups::from_labels(&[0, 0], &[true, true], 2);
        let out = sbcl(&z, &groups, tau).unwrap();
        let per = -(((s / tau).exp()) / (0.5 * ((1.0 / tau).exp() + (s / tau).exp()))).ln();
        // one positive per row, prefactor 1/|B_y| = 1/2
        assert!((out.loss - 0.5 * per).abs() < 1e-12, "{} vs {}", out.loss, 0.5 * per);
    }

    #[test]
    fn sbcl_empty_and_singletons() {
        let z = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let none = ConfidenceGroups::from_labels(&[0, 1], &[false, false], 2);
        let out = sbcl(&z, &none, 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
        let singles = ConfidenceGroups::from_labels(&[0, 1], &[true, true], 2);
        assert_eq!(sbcl(&z, &singles, 0.1).unwrap().loss, 0.0);
        assert!(sbcl(&z, &singles, 0.0).is_err());
    }

    #[test]
    fn mixup_edges() {
        let a = m(&[&[1.0, 2.0]]);
        let b = m(&[&[-1.0, -2.0]]);
        assert_eq!(mixup_with_lambda(&a, &b, None, 1.0).unwrap().mixed_input, a);
        let half = mixup_with_lambda(&a, &b, None, 0.5).unwrap();
        assert!(half.mixed_input.as_slice().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mixup(&a, &b, None, 0.0, &mut rng).is_err());
    }

    #[test]
    fn midl_examples() {
        let q = m(&[&[1.0, 0.0]]);
        let p = m(&[&unit(&[1.0, 1.0])]);
        let empty = MemoryBank::<f64>::new(4, 2);
        assert_eq!(midl(&q, &p, &empty, 0.5).unwrap().loss, 0.0);
        let bank = MemoryBank::from_keys(4, 2, &m(&[&unit(&[1.0, -1.0])])).unwrap();
        let out = midl(&q, &p, &bank, 0.5).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert!(midl(&q, &p, &bank, -1.0).is_err());
    }

    #[test]
    fn bank_fifo_and_normalisation() {
        let mut bank = MemoryBank::<f64>::new(2, 2);
        bank.push(&m(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(bank.to_matrix(), m(&[&[0.0, 1.0], &[0.6, 0.8]]));
        assert!(bank.push(&m(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let parts = LossParts { mixmatch: 1.0f64, bmixmatch: 1.0, sbcl: 2.0, midl: 2.0 };
        assert!((total_loss(&parts, &w) - 3.6).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::<f64>::default(), &w), 0.0);
        let zero = LossWeights { lambda_sbcl: 0.0, lambda_midl: 0.0 };
        assert_eq!(total_loss(&parts, &zero), 2.0);
    }

    #[test]
    fn mixmatch_pieces() {
        let logits = m(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let mut t = logits.softmax_rows();
        t.set(0, 0, 0.7);
        t.set(0, 1, 0.3);
        let out = mixmatch_losses(&logits, &t, 1, &Head::Conventional, 25.0).unwrap();
        assert!(out.unsupervised.abs() < 1e-15);
        let no_u = mixmatch_losses(&logits, &t, 1, &Head::Conventional, 0.0).unwrap();
        let ce = cross_entropy(&logits.select_rows(&[0]), &t.select_rows(&[0])).unwrap();
        assert_eq!(no_u.loss, ce.loss);
    }

    #[test]
    fn mixmatch_hand_computed() {
        // labelled row: logits (0, ln 3) -> p = (1/4, 3/4), target (1, 0): CE = ln 4
        // unlabelled row: logits (0, 0) -> p = (1/2, 1/2), target (1, 0):
        //   mean squared error over 2 entries = (1/4 + 1/4) / 2 = 1/4
        let logits = m(&[&[0.0, 3f64.ln()], &[0.0, 0.0]]);
        let t = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let out = mixmatch_losses(&logits, &t, 1, &Head::Conventional, 2.0).unwrap();
        assert!((out.supervised - 4f64.ln()).abs() < 1e-12);
        assert!((out.unsupervised - 0.25).abs() < 1e-12);
        assert!((out.loss - (4f64.ln() + 0.5)).abs() < 1e-12);
        // balanced head with prior (1, 3) on the labelled row: adjusted logits
        // (0, 2 ln 3) -> -log(1 / (1 + 9)) = ln 10
        let out = mixmatch_losses(&logits, &t, 1, &Head::Balanced(vec![1, 3]), 0.0).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ramp() {
        assert_eq!(ramp_weight(0.0, 16.0, 25.0), 0.0);
        assert_eq!(ramp_weight(8.0, 16.0, 25.0), 12.5);
        assert_eq!(ramp_weight(40.0, 16.0, 25.0), 25.0);
    }

    #[test]
    fn confidence_groups_strict_threshold() {
        let p = m(&[&[0.9, 0.1], &[0.95, 0.05], &[0.5, 0.5], &[0.0, 1.0]]);
        let g = ConfidenceGroups::from_distributions(&p, 0.9);
        assert_eq!(g.high_idx, vec![1, 3]);
        assert_eq!(g.low_idx, vec![0, 2]);
        assert_eq!(g.buckets, vec![vec![1], vec![3]]);
    }
}
