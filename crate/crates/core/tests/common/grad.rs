use dasc_core::losses::{self, ConfidenceGroups, Head, MemoryBank};
use dasc_core::net::{Activation, ModelState, NetConfig, OutputGrads};
use dasc_core::Matrix;
use rand::Rng;

use super::{gaussian_matrix, rng, stochastic_rows, unit_rows};

pub const RTOL: f64 = 1e-3;
pub const ATOL: f64 = 1e-7;
pub const STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    BalancedSoftmax,
    Sbcl,
    Midl,
    MixMatch,
    BalancedMixMatch,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::CrossEntropy,
        LossKind::BalancedSoftmax,
        LossKind::Sbcl,
        LossKind::Midl,
        LossKind::MixMatch,
        LossKind::BalancedMixMatch,
        LossKind::Total,
    ];
}

pub fn tiny_config() -> NetConfig {
    NetConfig {
        d_in: 4,
        hidden: vec![5],
        d_embed: 4,
        d_proj: 3,
        num_classes: 3,
        activation: Activation::Tanh,
    }
}

/// Everything a loss needs besides the parameters.
pub struct Problem {
    pub x1: Matrix<f64>,
    pub x2: Matrix<f64>,
    pub targets: Matrix<f64>,
    pub prior: Vec<usize>,
    pub groups: ConfidenceGroups,
    pub bank: MemoryBank<f64>,
    pub n_labeled: usize,
    pub lambda_u: f64,
}

impl Problem {
    pub fn random(seed: u64, batch: usize) -> Self {
        let cfg = tiny_config();
        let k = cfg.num_classes;
        let mut r = rng(seed ^ 0x5eed);
        let x1 = gaussian_matrix(&mut r, batch, cfg.d_in, 1.5);
        let x2 = gaussian_matrix(&mut r, batch, cfg.d_in, 1.5);
        let targets = stochastic_rows(&mut r, batch, k, 3.0);
        let prior = (0..k).map(|_| r.random_range(1..60)).collect();
        // Two views stacked: hard labels repeat so every high row has a positive.
        let base: Vec<usize> = (0..batch).map(|_| r.random_range(0..k)).collect();
        let mut hard = base.clone();
        hard.extend(&base);
        let mut high: Vec<bool> = (0..batch).map(|_| r.random_bool(0.7)).collect();
        high.extend(high.clone());
        let groups = ConfidenceGroups::from_labels(&hard, &high, k);
        let mut bank = MemoryBank::new(8, cfg.d_proj);
        bank.push(&unit_rows(&mut r, 6, cfg.d_proj)).unwrap();
        Self {
            x1,
            x2,
            targets,
            prior,
            groups,
            bank,
            n_labeled: batch / 2,
            lambda_u: r.random_range(0.5..5.0),
        }
    }
}

fn add_proj(g: &mut OutputGrads<f64>, mut m: Matrix<f64>, w: f64) {
    m.scale(w);
    match g.projections.as_mut() {
        Some(e) => e.add_assign(&m),
        None => g.projections = Some(m),
    }
}

/// Loss value and analytic parameter gradient.
pub fn evaluate(net: &ModelState<f64>, p: &Problem, kind: LossKind) -> (f64, Vec<f64>) {
    let r1 = net.forward(&p.x1).unwrap();
    let r2 = net.forward(&p.x2).unwrap();
    let b = p.x1.rows();
    let mut g1 = OutputGrads::default();
    let mut g2 = OutputGrads::default();
    let mut loss = 0.0;
    let want = |k: LossKind| kind == k || kind == LossKind::Total;
    if kind == LossKind::CrossEntropy {
        let o = losses::cross_entropy(&r1.logits_c, &p.targets).unwrap();
        loss += o.loss;
        g1.logits_c = Some(o.grad);
    }
    if kind == LossKind::BalancedSoftmax {
        let o = losses::balanced_softmax(&r1.logits_b, &p.targets, &p.prior).unwrap();
        loss += o.loss;
        g1.logits_b = Some(o.grad);
    }
    if want(LossKind::MixMatch) {
        let o = losses::mixmatch_losses(&r1.logits_c, &p.targets, p.n_labeled, &Head::Conventional, p.lambda_u).unwrap();
        loss += o.loss;
        g1.logits_c = Some(o.grad);
    }
    if want(LossKind::BalancedMixMatch) {
        let head = Head::Balanced(p.prior.clone());
        let o = losses::mixmatch_losses(&r1.logits_b, &p.targets, p.n_labeled, &head, p.lambda_u).unwrap();
        loss += o.loss;
        g1.logits_b = Some(o.grad);
    }
    if want(LossKind::Sbcl) {
        let w = if kind == LossKind::Total { 0.5 } else { 1.0 };
        let z = r1.projections.vstack(&r2.projections).unwrap();
        let o = losses::sbcl(&z, &p.groups, 0.1).unwrap();
        loss += w * o.loss;
        let top: Vec<usize> = (0..b).collect();
        let bottom: Vec<usize> = (b..2 * b).collect();
        add_proj(&mut g1, o.grad.select_rows(&top), w);
        add_proj(&mut g2, o.grad.select_rows(&bottom), w);
    }
    if want(LossKind::Midl) {
        let w = if kind == LossKind::Total { 0.3 } else { 1.0 };
        let o = losses::midl(&r1.projections, &r2.projections, &p.bank, 0.5).unwrap();
        loss += w * o.loss;
        add_proj(&mut g1, o.grad_query, w);
        add_proj(&mut g2, o.grad_positive, w);
    }
    let mut grad = net.backward(&r1, &g1).unwrap();
    net.backward_accumulate(&r2, &g2, &mut grad).unwrap();
    (loss, grad)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub kind: LossKind,
    pub seed: u64,
    /// Largest `|a - n| / (rtol * max(|a|,|n|) + atol)`; at most 1 passes.
    pub worst_ratio: f64,
    pub worst_index: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

pub fn check(kind: LossKind, seed: u64) -> GradReport {
    let net = ModelState::<f64>::new(tiny_config(), seed).unwrap();
    assert!(net.num_params() <= 200);
    let problem = Problem::random(seed, 8);
    let (_, analytic) = evaluate(&net, &problem, kind);
    let mut worst = (0.0, 0);
    for j in 0..net.num_params() {
        let mut plus = net.clone();
        plus.params_mut()[j] += STEP;
        let mut minus = net.clone();
        minus.params_mut()[j] -= STEP;
        let numeric = (evaluate(&plus, &problem, kind).0 - evaluate(&minus, &problem, kind).0) / (2.0 * STEP);
        let a = analytic[j];
        let ratio = (a - numeric).abs() / (RTOL * a.abs().max(numeric.abs()) + ATOL);
        if !(ratio <= worst.0) {
            worst = (ratio, j);
        }
    }
    GradReport {
        kind,
        seed,
        worst_ratio: worst.0,
        worst_index: worst.1,
    }
}

/// Every loss kind over `seeds` seeds.
pub fn suite(seeds: u64) -> Vec<GradReport> {
    LossKind::ALL
        .iter()
        .flat_map(|&k| (0..seeds).map(move |s| check(k, s)))
        .collect()
}
