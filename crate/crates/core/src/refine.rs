//! Refiners: anything that maps a stage input to an HR estimate.
//!
//! Stage one receives the LR observation itself; later stages receive the
//! blurred and substituted HR image from the previous stage. The classical
//! refiners here are bicubic interpolation, iterative back-projection, and
//! gradient descent under a smoothed gradient-sparsity prior.

use std::path::PathBuf;

use serde::Serialize;

use crate::degrade::{bicubic_resize, DegradeSpec, ScaleFactor};
use crate::formation::FormationOp;
use crate::{Error, Image, Result};

/// Smoothing constant of the Charbonnier penalty `√(t² + ε²)`.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Consecutive increases of the monitored quantity that stop an iteration.
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Everything a refiner may consult besides its input.
pub struct StageContext<'a> {
    pub lr: &'a Image,
    pub spec: &'a DegradeSpec,
    pub op: &'a FormationOp,
    /// 1-based stage index.
    pub stage: usize,
}

impl StageContext<'_> {
    pub fn scale(&self) -> ScaleFactor {
        self.op.scale()
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        let s = self.scale().get();
        (self.lr.width() * s, self.lr.height() * s)
    }

    /// Whether `input` is the LR observation rather than an HR image.
    pub fn input_is_lr(&self, input: &Image) -> bool {
        self.scale().get() > 1 && input.width() == self.lr.width() && input.height() == self.lr.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub image: Image,
    /// Set when an iterative refiner stopped early on a growing objective.
    pub guard_tripped: bool,
}

impl From<Image> for Refined {
    fn from(image: Image) -> Self {
        Self { image, guard_tripped: false }
    }
}

pub trait Refiner {
    fn refine(&self, input: &Image, ctx: &StageContext<'_>) -> Result<Refined>;

    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinerKind {
    Bicubic,
    Ibp,
    Gradprior,
    Toynet,
}

impl RefinerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RefinerKind::Bicubic => "bicubic",
            RefinerKind::Ibp => "ibp",
            RefinerKind::Gradprior => "gradprior",
            RefinerKind::Toynet => "toynet",
        }
    }
}

impl std::str::FromStr for RefinerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(RefinerKind::Bicubic),
            "ibp" => Ok(RefinerKind::Ibp),
            "gradprior" => Ok(RefinerKind::Gradprior),
            "toynet" => Ok(RefinerKind::Toynet),
            other => Err(Error::Config(format!("unknown refiner kind `{other}`"))),
        }
    }
}

/// Declarative description of one cascade stage's refiner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinerSpec {
    pub kind: RefinerKind,
    pub iters: usize,
    pub step: f64,
    pub lambda_prior: f64,
    pub weights_path: Option<PathBuf>,
}

impl RefinerSpec {
    pub fn bicubic() -> Self {
        Self { kind: RefinerKind::Bicubic, iters: 1, step: 1.0, lambda_prior: 0.0, weights_path: None }
    }

    pub fn ibp(iters: usize, step: f64) -> Self {
        Self { kind: RefinerKind::Ibp, iters, step, ..Self::bicubic() }
    }

    pub fn gradprior(iters: usize, step: f64, lambda_prior: f64) -> Self {
        Self { kind: RefinerKind::Gradprior, iters, step, lambda_prior, weights_path: None }
    }

    pub fn toynet(weights_path: Option<PathBuf>) -> Self {
        Self { kind: RefinerKind::Toynet, weights_path, ..Self::bicubic() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::InvalidParameter("refiner iters must be at least 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter(format!("refiner step must be positive, got {}", self.step)));
        }
        if !(self.lambda_prior >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda_prior must be non-negative, got {}",
                self.lambda_prior
            )));
        }
        Ok(())
    }

    /// Instantiates a classical refiner. Network refiners need their
    /// weights and are built by [`crate::cascade::build_refiner`].
    pub fn build_classical(&self) -> Result<Box<dyn Refiner>> {
        self.validate()?;
        Ok(match self.kind {
            RefinerKind::Bicubic => Box::new(BicubicRefiner),
            RefinerKind::Ibp => Box::new(IbpRefiner { iters: self.iters, step: self.step }),
            RefinerKind::Gradprior => Box::new(GradPriorRefiner {
                iters: self.iters,
                step: self.step,
                lambda_prior: self.lambda_prior,
            }),
            RefinerKind::Toynet => {
                return Err(Error::Config("toynet refiners are not classical".into()));
            }
        })
    }
}

/// Upscales LR input by `s`; HR input passes through unchanged.
pub fn refine_bicubic(input: &Image, s: ScaleFactor, input_is_lr: bool) -> Image {
    if !input_is_lr || s.get() == 1 {
        return input.clone();
    }
    let s = s.get();
    bicubic_resize(input, input.width() * s, input.height() * s)
        .expect("non-empty image has non-zero upscaled size")
}

/// Record of an iterative refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct IterOutcome {
    /// Lowest-objective iterate seen.
    pub image: Image,
    /// Monitored quantity before the first step and after each step.
    pub history: Vec<f64>,
    pub guard_tripped: bool,
}

fn l2_norm(img: &Image) -> f64 {
    img.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_init(lr: &Image, init: &Image, s: ScaleFactor) -> Result<()> {
    let sv = s.get();
    if init.width() != lr.width() * sv || init.height() != lr.height() * sv {
        return Err(Error::DimensionMismatch(format!(
            "initial estimate {}x{} is not {sv}x the {}x{} observation",
            init.width(),
            init.height(),
            lr.width(),
            lr.height()
        )));
    }
    if init.channels() != lr.channels() {
        return Err(Error::ChannelMismatch { expected: lr.channels(), found: init.channels() });
    }
    Ok(())
}

/// Runs `update` until `iters` steps are done or `objective` grows
/// [`DIVERGENCE_PATIENCE`] times in a row, keeping the best iterate.
fn descend(
    init: &Image,
    iters: usize,
    objective: impl Fn(&Image) -> Result<f64>,
    update: impl Fn(&Image) -> Result<Image>,
) -> Result<IterOutcome> {
    let mut current = init.clone();
    let mut value = objective(&current)?;
    let mut history = vec![value];
    let mut best = (value, current.clone());
    let mut rising = 0;
    let mut guard_tripped = false;
    for _ in 0..iters {
        let next = update(&current)?;
        let next_value = objective(&next)?;
        history.push(next_value);
        if !next_value.is_finite() {
            guard_tripped = true;
            break;
        }
        rising = if next_value > value { rising + 1 } else { 0 };
        if next_value < best.0 {
            best = (next_value, next.clone());
        }
        current = next;
        value = next_value;
        if rising >= DIVERGENCE_PATIENCE {
            guard_tripped = true;
            break;
        }
    }
    Ok(IterOutcome { image: best.1, history, guard_tripped })
}

/// Iterative back-projection: `I ← I + step · Kᵀ Dᵀ (L − D K I)`.
///
/// The monitored quantity is the data residual `‖D K I − L‖₂`.
pub fn refine_ibp(lr: &Image, init: &Image, spec: &DegradeSpec, iters: usize, step: f64) -> Result<IterOutcome> {
    ibp_with(&FormationOp::from_spec(spec)?, lr, init, iters, step)
}

pub(crate) fn ibp_with(op: &FormationOp, lr: &Image, init: &Image, iters: usize, step: f64) -> Result<IterOutcome> {
    check_init(lr, init, op.scale())?;
    descend(
        init,
        iters,
        |img| Ok(l2_norm(&op.forward(img)?.axpby(1.0, lr, -1.0)?)),
        |img| {
            let err = lr.axpby(1.0, &op.forward(img)?, -1.0)?;
            img.axpby(1.0, &op.adjoint(&err)?, step)
        },
    )
}

/// `Σ √(t² + ε²)` over horizontal and vertical forward differences.
fn charbonnier_prior(img: &Image) -> f64 {
    let (w, h) = (img.width(), img.height());
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    let mut total = 0.0;
    for p in img.planes() {
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                if x + 1 < w {
                    let d = p[y * w + x + 1] - v;
                    total += (d * d + eps2).sqrt();
                }
                if y + 1 < h {
                    let d = p[(y + 1) * w + x] - v;
                    total += (d * d + eps2).sqrt();
                }
            }
        }
    }
    total
}

fn charbonnier_prior_gradient(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    let mut grad = Image::zeros(w, h, img.channels());
    for c in 0..img.channels() {
        let p = img.plane(c);
        let g = grad.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = p[i + 1] - p[i];
                    let dr = d / (d * d + eps2).sqrt();
                    g[i + 1] += dr;
                    g[i] -= dr;
                }
                if y + 1 < h {
                    let d = p[i + w] - p[i];
                    let dr = d / (d * d + eps2).sqrt();
                    g[i + w] += dr;
                    g[i] -= dr;
                }
            }
        }
    }
    grad
}

/// `‖D K I − L‖² + λ Σ ρ(∇I)` with the Charbonnier penalty `ρ`.
pub fn gradprior_objective(op: &FormationOp, lr: &Image, img: &Image, lambda_prior: f64) -> Result<f64> {
    let r = op.forward(img)?.axpby(1.0, lr, -1.0)?;
    let data: f64 = r.data().iter().map(|v| v * v).sum();
    Ok(data + lambda_prior * charbonnier_prior(img))
}

/// Analytic gradient of [`gradprior_objective`].
pub fn gradprior_gradient(op: &FormationOp, lr: &Image, img: &Image, lambda_prior: f64) -> Result<Image> {
    let r = op.forward(img)?.axpby(1.0, lr, -1.0)?;
    let data_grad = op.adjoint(&r)?;
    if lambda_prior == 0.0 {
        return Ok(data_grad.map(|v| 2.0 * v));
    }
    data_grad.axpby(2.0, &charbonnier_prior_gradient(img), lambda_prior)
}

/// Gradient descent on [`gradprior_objective`] with a fixed step.
pub fn refine_gradprior(
    lr: &Image,
    init: &Image,
    spec: &DegradeSpec,
    iters: usize,
    step: f64,
    lambda_prior: f64,
) -> Result<IterOutcome> {
    gradprior_with(&FormationOp::from_spec(spec)?, lr, init, iters, step, lambda_prior)
}

pub(crate) fn gradprior_with(
    op: &FormationOp,
    lr: &Image,
    init: &Image,
    iters: usize,
    step: f64,
    lambda_prior: f64,
) -> Result<IterOutcome> {
    check_init(lr, init, op.scale())?;
    descend(
        init,
        iters,
        |img| gradprior_objective(op, lr, img, lambda_prior),
        |img| img.axpby(1.0, &gradprior_gradient(op, lr, img, lambda_prior)?, -step),
    )
}

fn stage_init(input: &Image, ctx: &StageContext<'_>) -> Image {
    refine_bicubic(input, ctx.scale(), ctx.input_is_lr(input))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BicubicRefiner;

impl Refiner for BicubicRefiner {
    fn refine(&self, input: &Image, ctx: &StageContext<'_>) -> Result<Refined> {
        Ok(stage_init(input, ctx).into())
    }

    fn name(&self) -> &'static str {
        "bicubic"
    }
}

/// Back-projection started from the bicubic upscale (stage one) or from
/// the incoming HR image.
#[derive(Debug, Clone, Copy)]
pub struct IbpRefiner {
    pub iters: usize,
    pub step: f64,
}

impl Refiner for IbpRefiner {
    fn refine(&self, input: &Image, ctx: &StageContext<'_>) -> Result<Refined> {
        let out = ibp_with(ctx.op, ctx.lr, &stage_init(input, ctx), self.iters, self.step)?;
        Ok(Refined { image: out.image, guard_tripped: out.guard_tripped })
    }

    fn name(&self) -> &'static str {
        "ibp"
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradPriorRefiner {
    pub iters: usize,
    pub step: f64,
    pub lambda_prior: f64,
}

impl Refiner for GradPriorRefiner {
    fn refine(&self, input: &Image, ctx: &StageContext<'_>) -> Result<Refined> {
        let init = stage_init(input, ctx);
        let out = gradprior_with(ctx.op, ctx.lr, &init, self.iters, self.step, self.lambda_prior)?;
        Ok(Refined { image: out.image, guard_tripped: out.guard_tripped })
    }

    fn name(&self) -> &'static str {
        "gradprior"
    }
}
