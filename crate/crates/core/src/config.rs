//! Flat `key=value` run configuration shared by every command. Each key is
//! also a command-line flag of the same name.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{GenSpec, NoiseType};
use crate::error::{Error, Result};
use crate::eval::{AucScore, ClassSetMode};
use crate::net::{Activation, NetConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (f32|f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Network shape minus the data-dependent input width and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub d_embed: usize,
    pub d_proj: usize,
    pub activation: Activation,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            d_embed: 64,
            d_proj: 32,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub test_per_class: usize,
    pub net: NetShape,
    pub train: TrainConfig,
    /// Training set file; `gen` writes `train.txt` / `test.txt` under `out_dir`.
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub dump_every: usize,
    pub stop_after: Option<usize>,
    pub class_sets: ClassSetMode,
    pub auc_score: AucScore,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenSpec::default(),
            test_per_class: 100,
            net: NetShape::default(),
            train: TrainConfig::default(),
            data: None,
            test_data: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            dump_every: 0,
            stop_after: None,
            class_sets: ClassSetMode::Thirds,
            auc_score: AucScore::Posterior,
            precision: Precision::F64,
        }
    }
}

/// One configuration key.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    /// Boolean keys may be listed as sweep toggles.
    pub boolean: bool,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        help,
        boolean: false,
    }
}

const fn flag(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        help,
        boolean: true,
    }
}

pub const KEYS: &[Key] = &[
    key("K", "number of classes"),
    key("dim", "feature dimension"),
    key("n_max", "samples in the largest class"),
    key("rho", "imbalance ratio, smallest over largest class"),
    key("class_sep", "norm of the class prototypes"),
    key("intra_std", "per-coordinate within-class standard deviation"),
    key("modes", "Gaussian sub-clusters per class"),
    key("noise", "label noise type: none|sym|asym"),
    key("ratio", "label noise ratio in [0, 1)"),
    key("seed", "seed for data generation and training"),
    key("test_per_class", "balanced clean test samples per class"),
    key("hidden", "comma-separated hidden widths of the backbone"),
    key("d_embed", "backbone output width"),
    key("d_proj", "projection head output width"),
    key("activation", "relu|tanh"),
    key("epochs", "total epochs T"),
    key("warmup", "warm-up epochs T_0"),
    key("sbcl_warmup", "epochs before the contrastive term starts (T_SBCL)"),
    key("batch_size", "mini-batch size (labelled and unlabelled each)"),
    key("lr", "SGD learning rate"),
    key("lr_schedule", "constant|cosine"),
    key("momentum", "SGD momentum"),
    key("weight_decay", "L2 weight decay"),
    key("tau_c", "confidence threshold for high/low grouping"),
    key("tau_T", "temperature of the centroid weights"),
    key("tau_s", "temperature of the balanced contrastive loss"),
    key("tau_m", "temperature of the instance discrimination loss"),
    key("lambda_sbcl", "weight of the balanced contrastive loss"),
    key("lambda_midl", "weight of the instance discrimination loss"),
    key("phi", "growth factor of the confidence threshold"),
    key("tau_hat", "base confidence threshold (`auto` = 1/K)"),
    key("alpha_mixup", "Beta(alpha, alpha) mixup parameter"),
    key("bank_capacity", "memory bank size"),
    key("sharpen_T", "pseudo-label sharpening temperature"),
    key("lambda_u_max", "final weight of the unlabelled consistency term"),
    key("ramp_epochs", "epochs to ramp the unlabelled weight"),
    key("method", "dasc|ce"),
    key("centroid", "dacc|per-class"),
    flag("use_dacc", "distribution-aware centroids (false: per-class baseline)"),
    flag("use_ts", "temperature-scale the centroid weights"),
    flag("use_confident_subset", "restrict centroids to the confident subset"),
    flag("use_sbcl", "balanced contrastive loss on high-confidence samples"),
    flag("use_midl", "instance discrimination loss on low-confidence samples"),
    key("bank_keys", "negative keys: mixup|plain"),
    key("bank_push", "which samples enter the bank: low|all"),
    key("co", "selection used by each network: cross|self"),
    key("representation", "centroid space: projector|backbone"),
    key("prediction", "classifier weighting the centroids: conventional|balanced"),
    key("weak_noise", "weak-view noise, in feature standard deviations"),
    key("strong_noise", "strong-view noise, in feature standard deviations"),
    key("dropout", "strong-view coordinate dropout rate"),
    key("scale_min", "strong-view lower per-coordinate scale"),
    key("scale_max", "strong-view upper per-coordinate scale"),
    key("gmm_max_iter", "EM iterations per class"),
    key("gmm_tol", "EM log-likelihood tolerance"),
    key("gmm_std_floor", "lower bound on GMM standard deviations"),
    key("data", "training set file"),
    key("test_data", "test set file"),
    key("out_dir", "directory for every output"),
    key("checkpoint_every", "checkpoint interval in epochs (0: last only)"),
    key("dump_every", "centroid/selection dump interval (0: never)"),
    key("stop_after", "stop after this epoch (`none` to run all)"),
    key("class_sets", "Many/Medium/Few split: thirds|absolute"),
    key("auc_score", "selection AUC score: posterior|gamma"),
    key("precision", "floating point width: f64|f32"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("--{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("--{key}: expected true|false, got `{other}`"))),
    }
}

fn parse_opt<V: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<V>>
where
    V::Err: Display,
{
    if value.trim() == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_string<V: Display>(v: &Option<V>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "K" => self.gen.num_classes = parse(key, v)?,
            "dim" => self.gen.dim = parse(key, v)?,
            "n_max" => self.gen.n_max = parse(key, v)?,
            "rho" => self.gen.rho = parse(key, v)?,
            "class_sep" => self.gen.class_sep = parse(key, v)?,
            "intra_std" => self.gen.intra_std = parse(key, v)?,
            "modes" => self.gen.modes = parse(key, v)?,
            "noise" => self.gen.noise_type = parse::<NoiseType>(key, v)?,
            "ratio" => self.gen.noise_ratio = parse(key, v)?,
            "seed" => {
                self.gen.seed = parse(key, v)?;
                t.seed = self.gen.seed;
            }
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "hidden" => {
                self.net.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|h| parse(key, h)).collect::<Result<_>>()?
                }
            }
            "d_embed" => self.net.d_embed = parse(key, v)?,
            "d_proj" => self.net.d_proj = parse(key, v)?,
            "activation" => self.net.activation = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "warmup" => t.warmup = parse(key, v)?,
            "sbcl_warmup" => t.sbcl_warmup = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_schedule" => t.lr_schedule = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "tau_c" => t.tau_c = parse(key, v)?,
            "tau_T" => t.tau_t = parse(key, v)?,
            "tau_s" => t.tau_s = parse(key, v)?,
            "tau_m" => t.tau_m = parse(key, v)?,
            "lambda_sbcl" => t.lambda_sbcl = parse(key, v)?,
            "lambda_midl" => t.lambda_midl = parse(key, v)?,
            "phi" => t.phi = parse(key, v)?,
            "tau_hat" => t.tau_hat = parse_opt(key, v, "auto")?,
            "alpha_mixup" => t.alpha_mixup = parse(key, v)?,
            "bank_capacity" => t.bank_capacity = parse(key, v)?,
            "sharpen_T" => t.sharpen_t = parse(key, v)?,
            "lambda_u_max" => t.lambda_u_max = parse(key, v)?,
            "ramp_epochs" => t.ramp_epochs = parse(key, v)?,
            "method" => t.method = parse(key, v)?,
            "centroid" => t.centroid = parse(key, v)?,
            "use_dacc" => {
                t.centroid = if parse_bool(key, v)? {
                    crate::train::CentroidMode::Dacc
                } else {
                    crate::train::CentroidMode::PerClass
                }
            }
            "use_ts" => t.temperature_scaling = parse_bool(key, v)?,
            "use_confident_subset" => t.confident_subset = parse_bool(key, v)?,
            "use_sbcl" => t.use_sbcl = parse_bool(key, v)?,
            "use_midl" => t.use_midl = parse_bool(key, v)?,
            "bank_keys" => t.bank_keys = parse(key, v)?,
            "bank_push" => t.bank_push = parse(key, v)?,
            "co" => t.co_mode = parse(key, v)?,
            "representation" => t.representation = parse(key, v)?,
            "prediction" => t.prediction_source = parse(key, v)?,
            "weak_noise" => t.augment.weak_noise = parse(key, v)?,
            "strong_noise" => t.augment.strong_noise = parse(key, v)?,
            "dropout" => t.augment.dropout = parse(key, v)?,
            "scale_min" => t.augment.scale_min = parse(key, v)?,
            "scale_max" => t.augment.scale_max = parse(key, v)?,
            "gmm_max_iter" => t.gmm.max_iter = parse(key, v)?,
            "gmm_tol" => t.gmm.tol = parse(key, v)?,
            "gmm_std_floor" => t.gmm.std_floor = parse(key, v)?,
            "data" => self.data = parse_opt(key, v, "none")?,
            "test_data" => self.test_data = parse_opt(key, v, "none")?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dump_every" => self.dump_every = parse(key, v)?,
            "stop_after" => self.stop_after = parse_opt(key, v, "none")?,
            "class_sets" => self.class_sets = parse(key, v)?,
            "auc_score" => self.auc_score = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = match key {
            "K" => self.gen.num_classes.to_string(),
            "dim" => self.gen.dim.to_string(),
            "n_max" => self.gen.n_max.to_string(),
            "rho" => self.gen.rho.to_string(),
            "class_sep" => self.gen.class_sep.to_string(),
            "intra_std" => self.gen.intra_std.to_string(),
            "modes" => self.gen.modes.to_string(),
            "noise" => self.gen.noise_type.to_string(),
            "ratio" => self.gen.noise_ratio.to_string(),
            "seed" => self.gen.seed.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "hidden" => {
                if self.net.hidden.is_empty() {
                    "none".to_string()
                } else {
                    self.net.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
                }
            }
            "d_embed" => self.net.d_embed.to_string(),
            "d_proj" => self.net.d_proj.to_string(),
            "activation" => self.net.activation.to_string(),
            "epochs" => t.epochs.to_string(),
            "warmup" => t.warmup.to_string(),
            "sbcl_warmup" => t.sbcl_warmup.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "lr_schedule" => t.lr_schedule.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "tau_c" => t.tau_c.to_string(),
            "tau_T" => t.tau_t.to_string(),
            "tau_s" => t.tau_s.to_string(),
            "tau_m" => t.tau_m.to_string(),
            "lambda_sbcl" => t.lambda_sbcl.to_string(),
            "lambda_midl" => t.lambda_midl.to_string(),
            "phi" => t.phi.to_string(),
            "tau_hat" => opt_string(&t.tau_hat, "auto"),
            "alpha_mixup" => t.alpha_mixup.to_string(),
            "bank_capacity" => t.bank_capacity.to_string(),
            "sharpen_T" => t.sharpen_t.to_string(),
            "lambda_u_max" => t.lambda_u_max.to_string(),
            "ramp_epochs" => t.ramp_epochs.to_string(),
            "method" => t.method.to_string(),
            "centroid" => t.centroid.to_string(),
            "use_dacc" => (t.centroid == crate::train::CentroidMode::Dacc).to_string(),
            "use_ts" => t.temperature_scaling.to_string(),
            "use_confident_subset" => t.confident_subset.to_string(),
            "use_sbcl" => t.use_sbcl.to_string(),
            "use_midl" => t.use_midl.to_string(),
            "bank_keys" => t.bank_keys.to_string(),
            "bank_push" => t.bank_push.to_string(),
            "co" => t.co_mode.to_string(),
            "representation" => t.representation.to_string(),
            "prediction" => t.prediction_source.to_string(),
            "weak_noise" => t.augment.weak_noise.to_string(),
            "strong_noise" => t.augment.strong_noise.to_string(),
            "dropout" => t.augment.dropout.to_string(),
            "scale_min" => t.augment.scale_min.to_string(),
            "scale_max" => t.augment.scale_max.to_string(),
            "gmm_max_iter" => t.gmm.max_iter.to_string(),
            "gmm_tol" => t.gmm.tol.to_string(),
            "gmm_std_floor" => t.gmm.std_floor.to_string(),
            "data" => opt_string(&self.data.as_ref().map(|p| p.display()), "none"),
            "test_data" => opt_string(&self.test_data.as_ref().map(|p| p.display()), "none"),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "dump_every" => self.dump_every.to_string(),
            "stop_after" => opt_string(&self.stop_after, "none"),
            "class_sets" => format!("{:?}", self.class_sets).to_lowercase(),
            "auc_score" => format!("{:?}", self.auc_score).to_lowercase(),
            "precision" => self.precision.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", origin.display(), n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{}:{}: {}", origin.display(), n + 1, strip_config(e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key except the derived `use_dacc` alias, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS.iter().filter(|k| k.name != "use_dacc") {
            out.push_str(k.name);
            out.push_str(" = ");
            out.push_str(&self.get(k.name).expect("every key has a value"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the settings that change results, so output locations
    /// and run control do not affect it.
    pub fn hash(&self) -> String {
        const IGNORED: &[&str] = &["use_dacc", "out_dir", "checkpoint_every", "dump_every", "stop_after"];
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| !IGNORED.contains(&k.name)) {
            h.update(k.name.as_bytes());
            h.update(b"=");
            h.update(self.get(k.name).expect("every key has a value").as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be at least 1".into()));
        }
        if self.net.d_embed == 0 || self.net.d_proj == 0 || self.net.hidden.contains(&0) {
            return Err(Error::Config("network widths must be at least 1".into()));
        }
        self.train.validate()?;
        if self.train.seed != self.gen.seed {
            return Err(Error::Config("seed mismatch between generator and trainer".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, d_in: usize, num_classes: usize) -> NetConfig {
        NetConfig {
            d_in,
            hidden: self.net.hidden.clone(),
            d_embed: self.net.d_embed,
            d_proj: self.net.d_proj,
            num_classes,
            activation: self.net.activation,
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
