//! Fixed-architecture network with hand-written reverse mode.
//!
//! ```text
//! x ─ backbone f (MLP) ─┬─ projector q (2-layer MLP, l2-normalised) ─ z
//!                       ├─ conventional classifier g^c (linear)     ─ logits_c
//!                       └─ balanced classifier g^b (linear)         ─ logits_b
//! ```
//!
//! All parameters live in one flat vector; [`ParamLayout`] records where each
//! layer's weights (row-major `out x in`) and biases sit.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output<T: Scalar>(self, out: T) -> T {
        match self {
            Activation::Relu => {
                if out > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - out * out,
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}` (relu|tanh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_in: usize,
    /// Hidden widths of the backbone; the backbone ends in a `d_embed` layer.
    pub hidden: Vec<usize>,
    pub d_embed: usize,
    pub d_proj: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.d_in >= 1
            && self.d_embed >= 1
            && self.d_proj >= 1
            && self.num_classes >= 1
            && self.hidden.iter().all(|&h| h >= 1);
        if !dims_ok {
            return Err(Error::Config("all network dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Projector,
    ClassifierC,
    ClassifierB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl Linear {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn bias(&self) -> Range<usize> {
        let start = self.offset + self.n_in * self.n_out;
        start..start + self.n_out
    }

    fn end(&self) -> usize {
        self.offset + (self.n_in + 1) * self.n_out
    }
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    backbone: Vec<Linear>,
    proj_hidden: Linear,
    proj_out: Linear,
    classifier_c: Linear,
    classifier_b: Linear,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &NetConfig) -> Self {
        let mut offset = 0;
        let mut next = |n_in, n_out| {
            let l = Linear { n_in, n_out, offset };
            offset = l.end();
            l
        };
        let mut dims = vec![cfg.d_in];
        dims.extend(&cfg.hidden);
        dims.push(cfg.d_embed);
        let backbone = dims.windows(2).map(|w| next(w[0], w[1])).collect();
        let proj_hidden = next(cfg.d_embed, cfg.d_embed);
        let proj_out = next(cfg.d_embed, cfg.d_proj);
        let classifier_c = next(cfg.d_embed, cfg.num_classes);
        let classifier_b = next(cfg.d_embed, cfg.num_classes);
        Self {
            backbone,
            proj_hidden,
            proj_out,
            classifier_c,
            classifier_b,
            total: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn group(&self, group: ParamGroup) -> Range<usize> {
        match group {
            ParamGroup::Backbone => 0..self.backbone.last().map_or(0, Linear::end),
            ParamGroup::Projector => self.proj_hidden.offset..self.proj_out.end(),
            ParamGroup::ClassifierC => self.classifier_c.offset..self.classifier_c.end(),
            ParamGroup::ClassifierB => self.classifier_b.offset..self.classifier_b.end(),
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .iter()
            .chain([&self.proj_hidden, &self.proj_out, &self.classifier_c, &self.classifier_b])
    }
}

/// Parameters, momentum buffers and step counter of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    config: NetConfig,
    layout: ParamLayout,
    params: Vec<T>,
    momentum: Vec<T>,
    step_count: u64,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord<T> {
    inputs: Matrix<T>,
    backbone_outputs: Vec<Matrix<T>>,
    proj_hidden: Matrix<T>,
    proj_norms: Vec<T>,
    pub projections: Matrix<T>,
    pub logits_c: Matrix<T>,
    pub logits_b: Matrix<T>,
    num_params: usize,
    step_count: u64,
}

impl<T: Scalar> ForwardRecord<T> {
    /// Backbone output `f(x)`.
    pub fn embeddings(&self) -> &Matrix<T> {
        self.backbone_outputs.last().expect("backbone has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

/// Loss gradients with respect to the network outputs. `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads<T> {
    pub embeddings: Option<Matrix<T>>,
    pub projections: Option<Matrix<T>>,
    pub logits_c: Option<Matrix<T>>,
    pub logits_b: Option<Matrix<T>>,
}

fn linear_forward<T: Scalar>(x: &Matrix<T>, params: &[T], l: &Linear, act: Option<Activation>) -> Matrix<T> {
    let w = &params[l.weights()];
    let b = &params[l.bias()];
    let mut out = Matrix::zeros(x.rows(), l.n_out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (o, (wrow, &bias)) in oi.iter_mut().zip(w.chunks_exact(l.n_in).zip(b)) {
            let mut acc = bias;
            for (&wv, &xv) in wrow.iter().zip(xi) {
                acc = acc + wv * xv;
            }
            *o = match act {
                Some(a) => a.apply(acc),
                None => acc,
            };
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad` and returns `dL/dx` when asked.
fn linear_backward<T: Scalar>(
    x: &Matrix<T>,
    params: &[T],
    l: &Linear,
    dy: &Matrix<T>,
    grad: &mut [T],
    want_dx: bool,
) -> Option<Matrix<T>> {
    {
        let (gw, gb) = grad[l.offset..l.end()].split_at_mut(l.n_in * l.n_out);
        for i in 0..x.rows() {
            let xi = x.row(i);
            for (o, &d) in dy.row(i).iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                gb[o] = gb[o] + d;
                for (g, &xv) in gw[o * l.n_in..(o + 1) * l.n_in].iter_mut().zip(xi) {
                    *g = *g + d * xv;
                }
            }
        }
    }
    if !want_dx {
        return None;
    }
    let w = &params[l.weights()];
    let mut dx = Matrix::zeros(x.rows(), l.n_in);
    for i in 0..x.rows() {
        let dxi = dx.row_mut(i);
        for (o, &d) in dy.row(i).iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            for (g, &wv) in dxi.iter_mut().zip(&w[o * l.n_in..(o + 1) * l.n_in]) {
                *g = *g + d * wv;
            }
        }
    }
    Some(dx)
}

fn activation_backward<T: Scalar>(act: Activation, out: &Matrix<T>, d: &mut Matrix<T>) {
    for (g, &o) in d.as_mut_slice().iter_mut().zip(out.as_slice()) {
        *g = *g * act.grad_from_output(o);
    }
}

impl<T: Scalar> ModelState<T> {
    /// Uniform fan-in initialisation `U(-1/sqrt(n_in), 1/sqrt(n_in))` for
    /// weights and biases, drawn layer by layer from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.len()];
        for l in layout.all_layers() {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.offset..l.end()] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
        let momentum = vec![T::zero(); layout.len()];
        Ok(Self {
            config,
            layout,
            params,
            momentum,
            step_count: 0,
        })
    }

    pub fn from_parts(config: NetConfig, params: Vec<T>, momentum: Vec<T>, step_count: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() || momentum.len() != layout.len() {
            return Err(Error::Shape(format!(
                "network needs {} parameters, got {} (momentum {})",
                layout.len(),
                params.len(),
                momentum.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            momentum,
            step_count,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn momentum(&self) -> &[T] {
        &self.momentum
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, batch: &Matrix<T>) -> Result<ForwardRecord<T>> {
        if batch.cols() != self.config.d_in {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.config.d_in
            )));
        }
        let act = self.config.activation;
        let mut backbone_outputs = Vec::with_capacity(self.layout.backbone.len());
        for l in &self.layout.backbone {
            let input = backbone_outputs.last().unwrap_or(batch);
            let out = linear_forward(input, &self.params, l, Some(act));
            backbone_outputs.push(out);
        }
        let emb = backbone_outputs.last().expect("non-empty backbone");
        let proj_hidden = linear_forward(emb, &self.params, &self.layout.proj_hidden, Some(act));
        let mut projections = linear_forward(&proj_hidden, &self.params, &self.layout.proj_out, None);
        let mut proj_norms = Vec::with_capacity(projections.rows());
        for i in 0..projections.rows() {
            let r = projections.row_mut(i);
            let n = crate::scalar::l2_norm(r).max(T::lit(NORM_FLOOR));
            for v in r.iter_mut() {
                *v = *v / n;
            }
            proj_norms.push(n);
        }
        let logits_c = linear_forward(emb, &self.params, &self.layout.classifier_c, None);
        let logits_b = linear_forward(emb, &self.params, &self.layout.classifier_b, None);
        Ok(ForwardRecord {
            inputs: batch.clone(),
            backbone_outputs,
            proj_hidden,
            proj_norms,
            projections,
            logits_c,
            logits_b,
            num_params: self.params.len(),
            step_count: self.step_count,
        })
    }

    /// Gradient of the loss with respect to every parameter.
    pub fn backward(&self, record: &ForwardRecord<T>, grads: &OutputGrads<T>) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.params.len()];
        self.backward_accumulate(record, grads, &mut out)?;
        Ok(out)
    }

    /// Like [`backward`](Self::backward) but adds into `grad`, so several
    /// forward passes can share one gradient buffer.
    pub fn backward_accumulate(&self, record: &ForwardRecord<T>, grads: &OutputGrads<T>, grad: &mut [T]) -> Result<()> {
        if record.num_params != self.params.len() || record.step_count != self.step_count {
            return Err(Error::Shape(
                "forward record was produced by a different model state".into(),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer has the wrong length".into()));
        }
        let b = record.batch_size();
        let check = |m: &Option<Matrix<T>>, cols: usize, what: &str| -> Result<()> {
            match m {
                Some(m) if m.rows() != b || m.cols() != cols => Err(Error::Shape(format!(
                    "{what} gradient is {}x{}, expected {b}x{cols}",
                    m.rows(),
                    m.cols()
                ))),
                _ => Ok(()),
            }
        };
        check(&grads.embeddings, self.config.d_embed, "embedding")?;
        check(&grads.projections, self.config.d_proj, "projection")?;
        check(&grads.logits_c, self.config.num_classes, "logits_c")?;
        check(&grads.logits_b, self.config.num_classes, "logits_b")?;

        let act = self.config.activation;
        let emb = record.embeddings();
        let mut d_emb = grads
            .embeddings
            .clone()
            .unwrap_or_else(|| Matrix::zeros(b, self.config.d_embed));

        for (dl, layer) in [
            (&grads.logits_c, &self.layout.classifier_c),
            (&grads.logits_b, &self.layout.classifier_b),
        ] {
            if let Some(dl) = dl {
                let dx = linear_backward(emb, &self.params, layer, dl, grad, true).expect("dx requested");
                d_emb.add_assign(&dx);
            }
        }

        if let Some(dz) = &grads.projections {
            // z = u / |u|  =>  du = (dz - z (z . dz)) / |u|
            let z = &record.projections;
            let mut du = Matrix::zeros(b, self.config.d_proj);
            for i in 0..b {
                let zi = z.row(i);
                let dzi = dz.row(i);
                let along = crate::scalar::dot(zi, dzi);
                let n = record.proj_norms[i];
                for ((g, &zv), &dv) in du.row_mut(i).iter_mut().zip(zi).zip(dzi) {
                    *g = (dv - zv * along) / n;
                }
            }
            let mut dh = linear_backward(&record.proj_hidden, &self.params, &self.layout.proj_out, &du, grad, true)
                .expect("dx requested");
            activation_backward(act, &record.proj_hidden, &mut dh);
            let dx = linear_backward(emb, &self.params, &self.layout.proj_hidden, &dh, grad, true).expect("dx requested");
            d_emb.add_assign(&dx);
        }

        let mut d = d_emb;
        for (li, layer) in self.layout.backbone.iter().enumerate().rev() {
            activation_backward(act, &record.backbone_outputs[li], &mut d);
            let input = if li == 0 {
                &record.inputs
            } else {
                &record.backbone_outputs[li - 1]
            };
            match linear_backward(input, &self.params, layer, &d, grad, li > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }

    /// SGD with momentum and L2 weight decay:
    /// `v <- momentum * v + g + weight_decay * theta`, `theta <- theta - lr * v`.
    pub fn sgd_step(&mut self, grads: &[T], lr: T, momentum: T, weight_decay: T) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
        }
        for ((p, v), &g) in self.params.iter_mut().zip(&mut self.momentum).zip(grads) {
            *v = momentum * *v + g + weight_decay * *p;
            *p = *p - lr * *v;
        }
        self.step_count += 1;
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter {i} became non-finite at step {}",
                self.step_count
            )));
        }
        Ok(())
    }

    /// Softmax of both heads, averaged: the test-time output of one network.
    pub fn predict_proba(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        let rec = self.forward(batch)?;
        let mut pc = rec.logits_c.softmax_rows();
        let pb = rec.logits_b.softmax_rows();
        pc.add_assign(&pb);
        pc.scale(T::lit(0.5));
        Ok(pc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        let mut out = Vec::with_capacity(32 + cfg.len() + 16 * self.params.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(T::WIDTH);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in self.params.iter().chain(&self.momentum) {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (head, rest) = bytes.split_at(n);
            bytes = rest;
            Ok(head)
        };
        if take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(bad("not a model checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let width = take(1)?[0];
        if width != T::WIDTH {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {width}-byte scalars, reader uses {}",
                T::WIDTH
            )));
        }
        let cfg_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let config: NetConfig = serde_json::from_slice(take(cfg_len)?)?;
        let step_count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut read_vec = || -> Result<Vec<T>> {
            (0..n)
                .map(|_| Ok(T::lit(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")))))
                .collect()
        };
        let params = read_vec()?;
        let momentum = read_vec()?;
        if !bytes.is_empty() {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        Self::from_parts(config, params, momentum, step_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"DASCNET\0";
const CKPT_VERSION: u32 = 1;
