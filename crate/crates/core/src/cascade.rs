//! The staged refine → blur → substitute loop, and stage-wise training of
//! network refiners.
//!
//! Stage one maps the LR observation to an HR estimate `I₁`. Every stage
//! then blurs its estimate, substitutes the observed pixels at the retained
//! sites to get `B̂`, and — unless it is the last stage — hands `B̂` to the
//! next refiner. Network refiners for HR-input stages predict a correction
//! that is added to their input.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::degrade::{DegradeSpec, ScaleFactor};
use crate::formation::{substitution_residual, FormationOp, LrComparison, ResidualReport, SubstitutionRecord};
use crate::metrics::{evaluate_with, MetricsReport, Protocol};
use crate::neural::{formation_loss, l1_loss, read_weights, AdamConfig, AdamState, Tensor, ToyNet, ToyNetShape};
use crate::refine::{Refined, Refiner, RefinerKind, RefinerSpec, StageContext};
use crate::{Error, Image, Result};

/// Weight of the formation term in the soft-constraint objective.
pub const DEFAULT_SOFT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeConfig {
    pub degrade: DegradeSpec,
    /// One entry per stage; `T` is the length.
    pub stages: Vec<RefinerSpec>,
    /// Stages two and later reuse a single network.
    pub shared_weights: bool,
}

impl CascadeConfig {
    pub fn new(degrade: DegradeSpec, stages: Vec<RefinerSpec>) -> Self {
        Self { degrade, stages, shared_weights: false }
    }

    /// `t` copies of `spec`.
    pub fn uniform(degrade: DegradeSpec, spec: RefinerSpec, t: usize) -> Self {
        Self::new(degrade, vec![spec; t])
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn scale(&self) -> ScaleFactor {
        self.degrade.scale
    }

    pub fn op(&self) -> Result<FormationOp> {
        FormationOp::from_spec(&self.degrade)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        self.degrade.validate()?;
        self.stages.iter().try_for_each(RefinerSpec::validate)
    }
}

/// Everything one stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// 1-based.
    pub stage: usize,
    pub refiner: &'static str,
    /// Refiner output `I_t`.
    pub estimate: Image,
    /// `k ⊗ I_t`.
    pub blurred: Image,
    /// `B̂_t`: the blurred estimate with observed pixels substituted.
    pub substituted: Image,
    pub substitution: SubstitutionRecord,
    /// `decimate(B̂_t)` against the observation; zero by construction.
    pub substituted_residual: ResidualReport,
    /// `decimate(k ⊗ I_t)` against the observation.
    pub estimate_residual: ResidualReport,
    pub guard_tripped: bool,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageTrace {
    pub stages: Vec<StageRecord>,
}

impl StageTrace {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn guard_tripped(&self) -> bool {
        self.stages.iter().any(|s| s.guard_tripped)
    }

    /// Scores every stage estimate against a ground truth.
    pub fn attach_metrics(&mut self, hr_gt: &Image, s: ScaleFactor, protocol: Protocol) -> Result<()> {
        for st in &mut self.stages {
            st.metrics = Some(evaluate_with(&st.estimate, hr_gt, s, protocol)?);
        }
        Ok(())
    }
}

/// A network refiner. Networks without an upsampler take HR input and
/// their output is added to it.
#[derive(Debug, Clone)]
pub struct ToyNetRefiner {
    pub net: ToyNet,
}

impl ToyNetRefiner {
    pub fn new(net: ToyNet) -> Self {
        Self { net }
    }

    pub fn residual(&self) -> bool {
        !self.net.has_upsampler()
    }

    pub fn apply(&self, input: &Image) -> Result<Image> {
        let out = self.net.refine_image(input)?;
        if self.residual() {
            out.axpby(1.0, input, 1.0)
        } else {
            Ok(out)
        }
    }
}

impl Refiner for ToyNetRefiner {
    fn refine(&self, input: &Image, ctx: &StageContext<'_>) -> Result<Refined> {
        let takes_lr = ctx.input_is_lr(input);
        if self.net.has_upsampler() != takes_lr {
            return Err(Error::Config(format!(
                "stage {} network {} an upsampler but its input is {}",
                ctx.stage,
                if self.net.has_upsampler() { "has" } else { "lacks" },
                if takes_lr { "LR" } else { "HR" }
            )));
        }
        if self.net.has_upsampler() && self.net.upscale() != ctx.scale().get() {
            return Err(Error::Config(format!(
                "stage {} network upsamples x{} but the cascade scale is x{}",
                ctx.stage,
                self.net.upscale(),
                ctx.scale()
            )));
        }
        Ok(self.apply(input)?.into())
    }

    fn name(&self) -> &'static str {
        "toynet"
    }
}

/// Instantiates the refiner for `stage` (1-based), loading network
/// weights from disk when needed.
pub fn build_refiner(spec: &RefinerSpec, stage: usize, scale: ScaleFactor) -> Result<Box<dyn Refiner>> {
    if spec.kind != RefinerKind::Toynet {
        return spec.build_classical();
    }
    let path = spec
        .weights_path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("stage {stage} is a toynet but has no weights file")))?;
    let net = read_weights(path)?;
    let wants_upsampler = stage == 1 && scale.get() > 1;
    if net.has_upsampler() != wants_upsampler || (wants_upsampler && net.upscale() != scale.get()) {
        return Err(Error::Weights(format!(
            "{}: stage {stage} at x{scale} needs {}, file has upscale x{}",
            path.display(),
            if wants_upsampler { format!("an x{scale} upsampler") } else { "no upsampler".into() },
            net.upscale()
        )));
    }
    Ok(Box::new(ToyNetRefiner::new(net)))
}

/// Builds every stage's refiner from `cfg`.
pub fn build_refiners(cfg: &CascadeConfig) -> Result<Vec<Box<dyn Refiner>>> {
    cfg.validate()?;
    cfg.stages.iter().enumerate().map(|(i, spec)| build_refiner(spec, i + 1, cfg.scale())).collect()
}

fn check_lr(lr: &Image, s: ScaleFactor) -> Result<()> {
    if lr.width() == 0 || lr.height() == 0 {
        return Err(Error::DimensionMismatch("empty observation".into()));
    }
    lr.width()
        .checked_mul(s.get())
        .and_then(|w| w.checked_mul(lr.height() * s.get()))
        .and_then(|n| n.checked_mul(lr.channels()))
        .map(|_| ())
        .ok_or_else(|| Error::DimensionMismatch("HR size overflows".into()))
}

/// One stage: refine, then blur and substitute.
fn run_stage(
    refiner: &dyn Refiner,
    input: &Image,
    lr: &Image,
    spec: &DegradeSpec,
    op: &FormationOp,
    stage: usize,
) -> Result<StageRecord> {
    let ctx = StageContext { lr, spec, op, stage };
    let Refined { image, guard_tripped } = refiner.refine(input, &ctx)?;
    let (w, h) = ctx.hr_dims();
    if image.width() != w || image.height() != h || image.channels() != lr.channels() {
        return Err(Error::DimensionMismatch(format!(
            "stage {stage} produced {}x{}x{}, expected {w}x{h}x{}",
            image.width(),
            image.height(),
            image.channels(),
            lr.channels()
        )));
    }
    let (blurred, substituted, substitution) = op.enforce(&image, lr)?;
    let substituted_residual = substitution_residual(&substituted, lr, op.scale())?;
    let estimate_residual = ResidualReport::from_pair(&op.forward(&image)?, lr, LrComparison::Float)?;
    Ok(StageRecord {
        stage,
        refiner: refiner.name(),
        estimate: image,
        blurred,
        substituted,
        substitution,
        substituted_residual,
        estimate_residual,
        guard_tripped,
        metrics: None,
    })
}

/// Runs pre-built refiners as a cascade. Returns the last stage's
/// estimate and the full trace.
pub fn run_with(lr: &Image, cfg: &CascadeConfig, refiners: &[Box<dyn Refiner>]) -> Result<(Image, StageTrace)> {
    if refiners.len() != cfg.stage_count() || refiners.is_empty() {
        return Err(Error::Config(format!(
            "{} refiners for a {}-stage cascade",
            refiners.len(),
            cfg.stage_count()
        )));
    }
    check_lr(lr, cfg.scale())?;
    let op = cfg.op()?;
    let mut trace = StageTrace::default();
    for (i, r) in refiners.iter().enumerate() {
        let input = trace.stages.last().map_or(lr, |prev| &prev.substituted);
        let rec = run_stage(r.as_ref(), input, lr, &cfg.degrade, &op, i + 1)?;
        trace.stages.push(rec);
    }
    let out = trace.stages.last().expect("at least one stage").estimate.clone();
    Ok((out, trace))
}

pub fn run_cascade(lr: &Image, cfg: &CascadeConfig) -> Result<(Image, StageTrace)> {
    run_with(lr, cfg, &build_refiners(cfg)?)
}

/// Training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub lr: Image,
    pub hr: Image,
}

/// Hyperparameters shared by both training modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub features: usize,
    pub blocks: usize,
    pub adam: AdamConfig,
    /// Passes over the sample list; one sample per optimizer step.
    pub epochs: usize,
    /// Side of the square LR training crop; larger than the image means
    /// the whole image.
    pub patch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { features: 16, blocks: 2, adam: AdamConfig::default(), epochs: 1, patch: 48, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::InvalidParameter("net features must be at least 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::InvalidParameter("patch size must be at least 1".into()));
        }
        let a = self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("bad Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogEntry {
    pub stage: usize,
    /// 1-based within the stage.
    pub step: usize,
    pub loss: f64,
}

/// Full-image training loss of one stage before and after its updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// False for stages that reuse an earlier stage's shared network.
    pub trained: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One network per stage; shared stages hold copies of the same weights.
    pub nets: Vec<ToyNet>,
    pub log: Vec<LogEntry>,
    pub summaries: Vec<StageSummary>,
}

impl TrainOutcome {
    pub fn refiners(&self) -> Vec<Box<dyn Refiner>> {
        self.nets.iter().map(|n| Box::new(ToyNetRefiner::new(n.clone())) as Box<dyn Refiner>).collect()
    }
}

fn check_samples(samples: &[Sample], s: ScaleFactor) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    for (i, smp) in samples.iter().enumerate() {
        if smp.hr.width() != smp.lr.width() * s.get() || smp.hr.height() != smp.lr.height() * s.get() {
            return Err(Error::DimensionMismatch(format!(
                "sample {i}: HR {}x{} is not x{s} the LR {}x{}",
                smp.hr.width(),
                smp.hr.height(),
                smp.lr.width(),
                smp.lr.height()
            )));
        }
        for img in [&smp.lr, &smp.hr] {
            if img.channels() != 3 {
                return Err(Error::ChannelMismatch { expected: 3, found: img.channels() });
            }
        }
    }
    Ok(())
}

fn stage_seed(seed: u64, stage: usize, salt: u64) -> u64 {
    seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

/// Crop of the stage input, target and observation at an LR-aligned
/// position.
struct Crop {
    input: Tensor,
    target: Tensor,
    lr: Tensor,
}

fn crop(input: &Image, smp: &Sample, s: usize, patch: usize, rng: &mut ChaCha8Rng) -> Result<Crop> {
    let (lw, lh) = (smp.lr.width(), smp.lr.height());
    let (pw, ph) = (patch.min(lw), patch.min(lh));
    let x0 = rng.random_range(0..=lw - pw);
    let y0 = rng.random_range(0..=lh - ph);
    let lr = smp.lr.crop(x0, y0, pw, ph)?;
    let target = smp.hr.crop(x0 * s, y0 * s, pw * s, ph * s)?;
    let input = if input.width() == lw && input.height() == lh && s > 1 {
        lr.clone()
    } else {
        input.crop(x0 * s, y0 * s, pw * s, ph * s)?
    };
    Ok(Crop { input: Tensor::from_image(&input), target: Tensor::from_image(&target), lr: Tensor::from_image(&lr) })
}

fn predict(net: &ToyNet, x: &Tensor) -> Result<(Tensor, crate::neural::ForwardCache)> {
    let (y, cache) = net.forward_cached(x)?;
    if net.has_upsampler() {
        return Ok((y, cache));
    }
    let data = y.data().iter().zip(x.data()).map(|(a, b)| a + b).collect();
    Ok((Tensor::from_vec(y.shape(), data)?, cache))
}

/// Mean per-sample L1 (plus formation term) over whole images.
fn dataset_loss(net: &ToyNet, inputs: &[Image], samples: &[Sample], op: &FormationOp, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for (x, smp) in inputs.iter().zip(samples) {
        let (pred, _) = predict(net, &Tensor::from_image(x))?;
        total += l1_loss(&pred, &Tensor::from_image(&smp.hr))?.0;
        if lambda != 0.0 {
            total += formation_loss(&pred, &Tensor::from_image(&smp.lr), op, lambda)?.0;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Adam on one network, one sample crop per step.
#[allow(clippy::too_many_arguments)]
fn fit_stage(
    net: &mut ToyNet,
    inputs: &[Image],
    samples: &[Sample],
    op: &FormationOp,
    lambda: f64,
    train: &TrainConfig,
    stage: usize,
    log: &mut Vec<LogEntry>,
) -> Result<StageSummary> {
    let initial_loss = dataset_loss(net, inputs, samples, op, lambda)?;
    let mut adam = AdamState::new(train.adam, net.named_params().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(train.seed, stage, 0x5A4D_504C));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let s = op.scale().get();
    let mut step = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let c = crop(&inputs[i], &samples[i], s, train.patch, &mut rng)?;
            let (pred, cache) = predict(net, &c.input)?;
            let (mut loss, mut grad) = l1_loss(&pred, &c.target)?;
            if lambda != 0.0 {
                let (fl, fg) = formation_loss(&pred, &c.lr, op, lambda)?;
                loss += fl;
                grad.data_mut().iter_mut().zip(fg.data()).for_each(|(g, f)| *g += f);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("stage {stage} loss became {loss} at step {}", step + 1)));
            }
            net.zero_grad();
            net.backward(&cache, &grad)?;
            adam.step(&mut net.params_mut())?;
            step += 1;
            log.push(LogEntry { stage, step, loss });
        }
    }
    net.clear_grads();
    let final_loss = dataset_loss(net, inputs, samples, op, lambda)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("stage {stage} final loss is {final_loss}")));
    }
    Ok(StageSummary { stage, steps: step, initial_loss, final_loss, trained: true })
}

fn net_shape(train: &TrainConfig, stage: usize, s: ScaleFactor) -> ToyNetShape {
    ToyNetShape::new(train.features, train.blocks, (stage == 1).then_some(s.get()))
}

fn check_trainable(cfg: &CascadeConfig) -> Result<()> {
    cfg.validate()?;
    if let Some((i, spec)) = cfg.stages.iter().enumerate().find(|(_, s)| s.kind != RefinerKind::Toynet) {
        return Err(Error::Config(format!("stage {} refiner `{}` is not trainable", i + 1, spec.kind.as_str())));
    }
    Ok(())
}

/// Greedy stage-by-stage training: stage `t` learns on the substituted
/// outputs of the already-trained stages `1..t`, minimising mean L1
/// against the ground truth.
pub fn train_cascade(samples: &[Sample], cfg: &CascadeConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    check_trainable(cfg)?;
    train.validate()?;
    check_samples(samples, cfg.scale())?;
    let op = cfg.op()?;
    let mut inputs: Vec<Image> = samples.iter().map(|s| s.lr.clone()).collect();
    let mut out = TrainOutcome { nets: Vec::new(), log: Vec::new(), summaries: Vec::new() };
    for stage in 1..=cfg.stage_count() {
        let reuse = cfg.shared_weights && stage > 2;
        let (net, summary) = if reuse {
            let net = out.nets[1].clone();
            let loss = dataset_loss(&net, &inputs, samples, &op, 0.0)?;
            (net, StageSummary { stage, steps: 0, initial_loss: loss, final_loss: loss, trained: false })
        } else {
            let mut net = ToyNet::new(net_shape(train, stage, cfg.scale()), stage_seed(train.seed, stage, 0));
            let summary = fit_stage(&mut net, &inputs, samples, &op, 0.0, train, stage, &mut out.log)?;
            (net, summary)
        };
        if stage < cfg.stage_count() {
            let r = ToyNetRefiner::new(net.clone());
            for (x, smp) in inputs.iter_mut().zip(samples) {
                *x = op.enforce(&r.apply(x)?, &smp.lr)?.1;
            }
        }
        out.nets.push(net);
        out.summaries.push(summary);
    }
    Ok(out)
}

/// Single-stage training on `L1 + λ·mean|A·I − L|`, without substitution.
pub fn train_soft_constraint(
    samples: &[Sample],
    cfg: &CascadeConfig,
    lambda: f64,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    check_trainable(cfg)?;
    if cfg.stage_count() != 1 {
        return Err(Error::Config(format!(
            "soft-constraint training is single-stage, config has {} stages",
            cfg.stage_count()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be non-negative, got {lambda}")));
    }
    train.validate()?;
    check_samples(samples, cfg.scale())?;
    let op = cfg.op()?;
    let inputs: Vec<Image> = samples.iter().map(|s| s.lr.clone()).collect();
    let mut net = ToyNet::new(net_shape(train, 1, cfg.scale()), stage_seed(train.seed, 1, 0));
    let mut log = Vec::new();
    let summary = fit_stage(&mut net, &inputs, samples, &op, lambda, train, 1, &mut log)?;
    Ok(TrainOutcome { nets: vec![net], log, summaries: vec![summary] })
}
