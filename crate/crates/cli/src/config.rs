//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Stage keys are
//! 1-based: `stages[1].kind` configures the stage that sees the LR input.
//! Later assignments win, which is how command-line flags override a file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use pxsub::cascade::{CascadeConfig, TrainConfig};
use pxsub::degrade::{DegradeMode, DegradeSpec, ScaleFactor};
use pxsub::formation::LrComparison;
use pxsub::metrics::Protocol;
use pxsub::neural::AdamConfig;
use pxsub::refine::{RefinerKind, RefinerSpec};
use pxsub::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Stage-wise L1 with substitution between stages.
    Hard,
    /// Single stage, L1 plus the weighted formation term.
    Soft,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Hard => "hard",
            LossKind::Soft => "soft",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(LossKind::Hard),
            "soft" => Ok(LossKind::Soft),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected hard or soft)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageEntry {
    pub kind: RefinerKind,
    pub iters: usize,
    pub step: f64,
    pub lambda_prior: f64,
    pub weights: Option<PathBuf>,
}

impl Default for StageEntry {
    fn default() -> Self {
        Self { kind: RefinerKind::Ibp, iters: 20, step: 1.0, lambda_prior: 1e-3, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scale: usize,
    pub degrade_mode: DegradeMode,
    pub degrade_sigma: Option<f64>,
    pub degrade_kernel_size: Option<usize>,
    pub degrade_noise: f64,
    pub degrade_seed: u64,
    pub stages: Vec<StageEntry>,
    pub shared_weights: bool,
    pub train_lr: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_eps: f64,
    pub train_epochs: usize,
    pub train_patch: usize,
    pub train_seed: u64,
    pub train_loss: LossKind,
    pub train_lambda: f64,
    pub net_features: usize,
    pub net_blocks: usize,
    pub eval_protocol: Protocol,
    pub eval_lr_mode: LrComparison,
    pub io_input: Option<PathBuf>,
    pub io_output: Option<PathBuf>,
    pub io_gt: Option<PathBuf>,
    pub io_lr: Option<PathBuf>,
    pub io_weights: Option<PathBuf>,
    pub io_trace: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            scale: 2,
            degrade_mode: DegradeMode::GaussianDecimate,
            degrade_sigma: None,
            degrade_kernel_size: None,
            degrade_noise: 0.0,
            degrade_seed: 0,
            stages: vec![StageEntry::default(); 3],
            shared_weights: false,
            train_lr: adam.lr,
            train_beta1: adam.beta1,
            train_beta2: adam.beta2,
            train_eps: adam.eps,
            train_epochs: 1,
            train_patch: 48,
            train_seed: 0,
            train_loss: LossKind::Hard,
            train_lambda: pxsub::cascade::DEFAULT_SOFT_LAMBDA,
            net_features: 16,
            net_blocks: 2,
            eval_protocol: Protocol::YChannelShaved,
            eval_lr_mode: LrComparison::Float,
            io_input: None,
            io_output: None,
            io_gt: None,
            io_lr: None,
            io_weights: None,
            io_trace: None,
        }
    }
}

/// Ordered `key → value` assignments, last one wins.
#[derive(Debug, Clone, Default)]
pub struct Assignments(BTreeMap<String, String>);

impl Assignments {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            out.set_pair(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(out)
    }

    /// Accepts `key=value` or `key = value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key = value, got `{pair}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("missing key in `{pair}`")));
        }
        self.set(k, v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn extend(&mut self, other: Assignments) {
        self.0.extend(other.0);
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_with<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Splits `stages[3].kind` into `(3, "kind")`.
fn stage_key(key: &str) -> Option<(&str, &str)> {
    let rest = key.strip_prefix("stages[")?;
    let (idx, field) = rest.split_once("].")?;
    Some((idx, field))
}

impl RunConfig {
    pub fn from_assignments(a: &Assignments) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut stage_keys = Vec::new();
        let mut t = c.stages.len();
        for (key, v) in &a.0 {
            let v = v.as_str();
            match key.as_str() {
                "scale" => c.scale = parse(key, v)?,
                "degrade.mode" => c.degrade_mode = parse_with(key, v)?,
                "degrade.sigma" => c.degrade_sigma = parse_auto(key, v)?,
                "degrade.kernel_size" => c.degrade_kernel_size = parse_auto(key, v)?,
                "degrade.noise" => c.degrade_noise = parse(key, v)?,
                "degrade.seed" => c.degrade_seed = parse(key, v)?,
                "cascade.T" => t = parse(key, v)?,
                "cascade.shared_weights" => c.shared_weights = parse_bool(key, v)?,
                "train.lr" => c.train_lr = parse(key, v)?,
                "train.beta1" => c.train_beta1 = parse(key, v)?,
                "train.beta2" => c.train_beta2 = parse(key, v)?,
                "train.eps" => c.train_eps = parse(key, v)?,
                "train.epochs" => c.train_epochs = parse(key, v)?,
                "train.patch" => c.train_patch = parse(key, v)?,
                "train.seed" => c.train_seed = parse(key, v)?,
                "train.loss" => c.train_loss = parse_with(key, v)?,
                "train.lambda" => c.train_lambda = parse(key, v)?,
                "net.features" => c.net_features = parse(key, v)?,
                "net.blocks" => c.net_blocks = parse(key, v)?,
                "eval.protocol" => c.eval_protocol = parse_with(key, v)?,
                "eval.lr_mode" => c.eval_lr_mode = parse_with(key, v)?,
                "io.input" => c.io_input = parse_path(v),
                "io.output" => c.io_output = parse_path(v),
                "io.gt" => c.io_gt = parse_path(v),
                "io.lr" => c.io_lr = parse_path(v),
                "io.weights" => c.io_weights = parse_path(v),
                "io.trace" => c.io_trace = parse_path(v),
                other => match stage_key(other) {
                    Some(parts) => stage_keys.push((other, parts, v)),
                    None => return Err(Error::Config(format!("unknown key `{other}`"))),
                },
            }
        }
        if t == 0 {
            return Err(Error::Config("cascade.T must be at least 1".into()));
        }
        c.stages = vec![StageEntry::default(); t];
        for (key, (idx, field), v) in stage_keys {
            let i: usize = parse(key, idx)?;
            if i == 0 || i > t {
                return Err(Error::Config(format!("{key}: stage index must be in 1..={t}")));
            }
            let st = &mut c.stages[i - 1];
            match field {
                "kind" => st.kind = parse_with(key, v)?,
                "iters" => st.iters = parse(key, v)?,
                "step" => st.step = parse(key, v)?,
                "lambda_prior" => st.lambda_prior = parse(key, v)?,
                "weights" => st.weights = parse_path(v),
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        Ok(c)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        Self::from_assignments(&Assignments::parse_text(text)?)
    }

    /// Every key with its effective value; reparses to `self`.
    pub fn dump(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
        }
        fn path(p: &Option<PathBuf>) -> String {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        }
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("scale", self.scale.to_string());
        kv("degrade.mode", self.degrade_mode.as_str().into());
        kv("degrade.sigma", opt(&self.degrade_sigma));
        kv("degrade.kernel_size", opt(&self.degrade_kernel_size));
        kv("degrade.noise", self.degrade_noise.to_string());
        kv("degrade.seed", self.degrade_seed.to_string());
        kv("cascade.T", self.stages.len().to_string());
        kv("cascade.shared_weights", self.shared_weights.to_string());
        for (i, st) in self.stages.iter().enumerate() {
            let p = format!("stages[{}]", i + 1);
            kv(&format!("{p}.kind"), st.kind.as_str().into());
            kv(&format!("{p}.iters"), st.iters.to_string());
            kv(&format!("{p}.step"), st.step.to_string());
            kv(&format!("{p}.lambda_prior"), st.lambda_prior.to_string());
            kv(&format!("{p}.weights"), path(&st.weights));
        }
        kv("train.lr", self.train_lr.to_string());
        kv("train.beta1", self.train_beta1.to_string());
        kv("train.beta2", self.train_beta2.to_string());
        kv("train.eps", self.train_eps.to_string());
        kv("train.epochs", self.train_epochs.to_string());
        kv("train.patch", self.train_patch.to_string());
        kv("train.seed", self.train_seed.to_string());
        kv("train.loss", self.train_loss.as_str().into());
        kv("train.lambda", self.train_lambda.to_string());
        kv("net.features", self.net_features.to_string());
        kv("net.blocks", self.net_blocks.to_string());
        kv("eval.protocol", self.eval_protocol.as_str().into());
        kv("eval.lr_mode", self.eval_lr_mode.as_str().into());
        kv("io.input", path(&self.io_input));
        kv("io.output", path(&self.io_output));
        kv("io.gt", path(&self.io_gt));
        kv("io.lr", path(&self.io_lr));
        kv("io.weights", path(&self.io_weights));
        kv("io.trace", path(&self.io_trace));
        out
    }

    pub fn scale(&self) -> Result<ScaleFactor> {
        ScaleFactor::new(self.scale).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn degrade_spec(&self) -> Result<DegradeSpec> {
        let spec = DegradeSpec {
            mode: self.degrade_mode,
            sigma: self.degrade_sigma,
            kernel_size: self.degrade_kernel_size,
            scale: self.scale()?,
            noise_level: self.degrade_noise,
            custom_kernel: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Weights for stage `i` (1-based): the explicit path, else
    /// `stage<i>.pxw` inside `io.weights`.
    pub fn stage_weights(&self, i: usize) -> Option<PathBuf> {
        self.stages[i - 1]
            .weights
            .clone()
            .or_else(|| self.io_weights.as_ref().map(|d| d.join(weights_file_name(i))))
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| RefinerSpec {
                kind: st.kind,
                iters: st.iters,
                step: st.step,
                lambda_prior: st.lambda_prior,
                weights_path: self.stage_weights(i + 1),
            })
            .collect();
        let cfg = CascadeConfig { degrade: self.degrade_spec()?, stages, shared_weights: self.shared_weights };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            features: self.net_features,
            blocks: self.net_blocks,
            adam: AdamConfig { lr: self.train_lr, beta1: self.train_beta1, beta2: self.train_beta2, eps: self.train_eps },
            epochs: self.train_epochs,
            patch: self.train_patch,
            seed: self.train_seed,
        };
        t.validate()?;
        Ok(t)
    }
}

pub fn weights_file_name(stage: usize) -> String {
    format!("stage{stage}.pxw")
}
