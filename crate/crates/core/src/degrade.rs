//! The forward image-formation model: blur, decimation, bicubic resampling
//! and additive noise.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

/// Largest accepted additive noise level.
pub const MAX_NOISE_LEVEL: f64 = 0.1;

/// Integer decimation factor between the HR and LR grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub const MAX: usize = 4;

    pub fn new(s: usize) -> Result<Self> {
        if (1..=Self::MAX).contains(&s) {
            Ok(Self(s))
        } else {
            Err(Error::InvalidParameter(format!("scale must be in 1..={}, got {s}", Self::MAX)))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for ScaleFactor {
    type Error = Error;
    fn try_from(s: usize) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ScaleFactor> for usize {
    fn from(s: ScaleFactor) -> usize {
        s.0
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Square, odd-sized, normalized convolution stencil stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    /// Wraps taps that already sum to one.
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::InvalidKernel(format!("size must be odd, got {size}")));
        }
        if taps.len() != size * size {
            return Err(Error::InvalidKernel(format!(
                "{} taps for a {size}x{size} kernel",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidKernel("non-finite tap".into()));
        }
        let sum: f64 = taps.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidKernel(format!("taps sum to {sum}, not 1")));
        }
        Ok(Self { size, taps })
    }

    /// Divides `taps` by their sum.
    pub fn normalized(size: usize, taps: Vec<f64>) -> Result<Self> {
        let sum: f64 = taps.iter().sum();
        if sum == 0.0 || !sum.is_finite() {
            return Err(Error::InvalidKernel(format!("cannot normalize taps summing to {sum}")));
        }
        Self::new(size, taps.into_iter().map(|t| t / sum).collect())
    }

    /// The 1×1 unit stencil.
    pub fn identity() -> Self {
        Self { size: 1, taps: vec![1.0] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, i: usize, j: usize) -> f64 {
        self.taps[i * self.size + j]
    }

    /// Kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Kernel {
        Kernel { size: self.size, taps: self.taps.iter().rev().copied().collect() }
    }
}

/// Normalized isotropic Gaussian stencil.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Kernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidKernel(format!("sigma must be positive, got {sigma}")));
    }
    if size.is_multiple_of(2) || size < 3 {
        return Err(Error::InvalidKernel(format!("size must be odd and at least 3, got {size}")));
    }
    let c = (size / 2) as f64;
    let mut taps = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            taps.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    Kernel::normalized(size, taps)
}

/// Stencil side that keeps three standard deviations on each side.
pub fn default_kernel_size(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 → 1`, `n → n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn check_kernel_fits(img: &Image, k: &Kernel) -> Result<()> {
    let limit = 2 * img.width().min(img.height()) + 1;
    if k.size() > limit {
        return Err(Error::InvalidKernel(format!(
            "{0}x{0} kernel is too large for a {1}x{2} image",
            k.size(),
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Per-output-position source indices for a reflect-padded stencil.
fn reflect_table(n: usize, size: usize) -> Vec<usize> {
    let r = (size / 2) as isize;
    (0..n as isize)
        .flat_map(|p| (0..size as isize).map(move |t| reflect(p + t - r, n)))
        .collect()
}

/// Same-size 2-D correlation with reflect padding,
/// `out(y,x) = Σ k(i,j)·in(y+i−r, x+j−r)`.
pub fn convolve(img: &Image, k: &Kernel) -> Result<Image> {
    check_kernel_fits(img, k)?;
    let (w, h, size) = (img.width(), img.height(), k.size());
    let rows = reflect_table(h, size);
    let cols = reflect_table(w, size);
    let mut out = Image::zeros(w, h, img.channels());
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..size {
                    let row = &src[rows[y * size + i] * w..][..w];
                    let ktaps = &k.taps[i * size..][..size];
                    for (j, &t) in ktaps.iter().enumerate() {
                        acc += t * row[cols[x * size + j]];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`convolve`]: scatters each sample back along the same
/// reflected stencil, so `⟨convolve(X), Y⟩ = ⟨X, convolve_transpose(Y)⟩`.
/// Away from the borders this is correlation with the flipped kernel.
pub fn convolve_transpose(img: &Image, k: &Kernel) -> Result<Image> {
    check_kernel_fits(img, k)?;
    let (w, h, size) = (img.width(), img.height(), k.size());
    let rows = reflect_table(h, size);
    let cols = reflect_table(w, size);
    let mut out = Image::zeros(w, h, img.channels());
    for c in 0..img.channels() {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let g = src[y * w + x];
                if g == 0.0 {
                    continue;
                }
                for i in 0..size {
                    let base = rows[y * size + i] * w;
                    for j in 0..size {
                        dst[base + cols[x * size + j]] += k.taps[i * size + j] * g;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_divisible(img: &Image, s: ScaleFactor) -> Result<()> {
    let s = s.get();
    if !img.width().is_multiple_of(s) || !img.height().is_multiple_of(s) {
        return Err(Error::NotDivisible { width: img.width(), height: img.height(), scale: s });
    }
    Ok(())
}

/// Keeps the samples at `(i·s, j·s)`, discarding the rest.
pub fn decimate(img: &Image, s: ScaleFactor) -> Result<Image> {
    check_divisible(img, s)?;
    let s = s.get();
    Ok(Image::from_fn(img.width() / s, img.height() / s, img.channels(), |c, y, x| {
        img.get(c, y * s, x * s)
    }))
}

/// Keys cubic convolution kernel with `a = −0.5`.
pub(crate) fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source indices and weights for every output position along one axis.
struct AxisWeights {
    taps: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl AxisWeights {
    /// Pixel-centre aligned cubic weights; for shrinking, the kernel is
    /// stretched by `1/scale` so it also low-passes.
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let (stretch, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
        let taps = width.ceil() as usize + 2;
        let mut index = Vec::with_capacity(out_len * taps);
        let mut weight = Vec::with_capacity(out_len * taps);
        for i in 0..out_len {
            // 1-based pixel-centre mapping from output to input coordinates.
            let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let start = weight.len();
            for t in 0..taps as isize {
                let src = left + t;
                weight.push(stretch * cubic(stretch * (u - src as f64)));
                index.push((src - 1).clamp(0, in_len as isize - 1) as usize);
            }
            let sum: f64 = weight[start..].iter().sum();
            for v in &mut weight[start..] {
                *v /= sum;
            }
        }
        Self { taps, index, weight }
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = i * self.taps..(i + 1) * self.taps;
        self.index[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }
}

/// Separable bicubic resampling with antialiasing on reduction and
/// replicated edges.
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter(format!("output size {out_w}x{out_h}")));
    }
    let (w, h) = (img.width(), img.height());
    let wx = AxisWeights::new(w, out_w);
    let wy = AxisWeights::new(h, out_h);
    let mut out = Image::zeros(out_w, out_h, img.channels());
    let mut tmp = vec![0.0; out_h * w];
    for c in 0..img.channels() {
        let src = img.plane(c);
        // Vertical pass first, then horizontal.
        for oy in 0..out_h {
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            dst.fill(0.0);
            for (sy, wt) in wy.row(oy) {
                for (d, s) in dst.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                    *d += wt * s;
                }
            }
        }
        let dst = out.plane_mut(c);
        for oy in 0..out_h {
            let line = &tmp[oy * w..(oy + 1) * w];
            for ox in 0..out_w {
                dst[oy * out_w + ox] = wx.row(ox).map(|(sx, wt)| wt * line[sx]).sum();
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian noise with standard deviation `level` and clamps to
/// `[0, 1]`. Deterministic in `seed`.
pub fn add_noise(img: &Image, level: f64, seed: u64) -> Result<Image> {
    if !(0.0..=MAX_NOISE_LEVEL).contains(&level) {
        return Err(Error::InvalidParameter(format!(
            "noise level must be in [0, {MAX_NOISE_LEVEL}], got {level}"
        )));
    }
    if level == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, level)
        .map_err(|e| Error::InvalidParameter(format!("noise level {level}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradeMode {
    /// Gaussian blur followed by top-left phase decimation.
    GaussianDecimate,
    /// Antialiased bicubic reduction.
    Bicubic,
}

impl DegradeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradeMode::GaussianDecimate => "gaussian-decimate",
            DegradeMode::Bicubic => "bicubic",
        }
    }
}

impl std::str::FromStr for DegradeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-decimate" | "gaussian" => Ok(DegradeMode::GaussianDecimate),
            "bicubic" => Ok(DegradeMode::Bicubic),
            other => Err(Error::Config(format!("unknown degradation mode `{other}`"))),
        }
    }
}

/// How LR observations are produced from HR images.
///
/// `sigma` and `kernel_size` default to `0.5·s` and `2⌈3σ⌉+1`. In bicubic
/// mode the same Gaussian serves as the surrogate blur for the constraint
/// operators, because bicubic reduction has no blur-then-sample form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradeSpec {
    pub mode: DegradeMode,
    pub sigma: Option<f64>,
    pub kernel_size: Option<usize>,
    pub scale: ScaleFactor,
    pub noise_level: f64,
    #[serde(skip)]
    pub custom_kernel: Option<Kernel>,
}

impl DegradeSpec {
    pub fn gaussian(scale: ScaleFactor) -> Self {
        Self {
            mode: DegradeMode::GaussianDecimate,
            sigma: None,
            kernel_size: None,
            scale,
            noise_level: 0.0,
            custom_kernel: None,
        }
    }

    pub fn bicubic(scale: ScaleFactor) -> Self {
        Self { mode: DegradeMode::Bicubic, ..Self::gaussian(scale) }
    }

    /// Replaces the Gaussian with an arbitrary blur stencil.
    pub fn with_kernel(mut self, k: Kernel) -> Self {
        self.custom_kernel = Some(k);
        self
    }

    pub fn with_noise(mut self, level: f64) -> Self {
        self.noise_level = level;
        self
    }

    pub fn without_noise(&self) -> Self {
        Self { noise_level: 0.0, ..self.clone() }
    }

    pub fn effective_sigma(&self) -> f64 {
        self.sigma.unwrap_or(0.5 * self.scale.get() as f64)
    }

    pub fn effective_kernel_size(&self) -> usize {
        self.kernel_size.unwrap_or_else(|| default_kernel_size(self.effective_sigma()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidParameter(format!("sigma must be positive, got {s}")));
            }
        }
        if !(0.0..=MAX_NOISE_LEVEL).contains(&self.noise_level) {
            return Err(Error::InvalidParameter(format!(
                "noise level must be in [0, {MAX_NOISE_LEVEL}], got {}",
                self.noise_level
            )));
        }
        self.kernel().map(|_| ())
    }

    /// The blur `k` of the formation model; in bicubic mode, its Gaussian
    /// surrogate.
    pub fn kernel(&self) -> Result<Kernel> {
        match &self.custom_kernel {
            Some(k) => Ok(k.clone()),
            None => gaussian_kernel(self.effective_sigma(), self.effective_kernel_size()),
        }
    }
}

/// Produces the LR observation for `img`.
pub fn degrade(img: &Image, spec: &DegradeSpec, seed: u64) -> Result<Image> {
    check_divisible(img, spec.scale)?;
    let s = spec.scale.get();
    let clean = match spec.mode {
        DegradeMode::GaussianDecimate => decimate(&convolve(img, &spec.kernel()?)?, spec.scale)?,
        DegradeMode::Bicubic => bicubic_resize(img, img.width() / s, img.height() / s)?,
    };
    add_noise(&clean, spec.noise_level, seed)
}
