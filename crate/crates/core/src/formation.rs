//! The hard formation constraint.
//!
//! With `B = k ⊗ I` the blurred HR estimate, the observation fixes `B` at
//! every retained site `(i·s, j·s)`. [`pixel_substitute`] overwrites exactly
//! those samples with the LR values, so `decimate(B̂) = L` holds bit-exactly
//! regardless of what the refiner produced.

use serde::Serialize;

use crate::degrade::{self, check_divisible, convolve, convolve_transpose, decimate, DegradeSpec, Kernel, ScaleFactor};
use crate::metrics;
use crate::{Error, Image, PixelCoord, Result};

/// Outcome of one substitution pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubstitutionRecord {
    pub substituted_count: usize,
    pub expected_count: usize,
    /// Largest `|B̂ − B|` over the substituted sites.
    pub max_injected_delta: f64,
}

/// HR sites that survive decimation, in row-major order.
pub fn retained_sites(lr_width: usize, lr_height: usize, s: ScaleFactor) -> impl Iterator<Item = PixelCoord> {
    let s = s.get();
    (0..lr_height).flat_map(move |j| (0..lr_width).map(move |i| PixelCoord::new(i * s, j * s)))
}

/// `Dᵀ L`: places each LR sample at `(i·s, j·s)` on an otherwise zero HR grid.
pub fn zero_upsample(lr: &Image, s: ScaleFactor) -> Image {
    let sv = s.get();
    let mut out = Image::zeros(lr.width() * sv, lr.height() * sv, lr.channels());
    for c in 0..lr.channels() {
        for p in retained_sites(lr.width(), lr.height(), s) {
            out.set(c, p.y, p.x, lr.get(c, p.y / sv, p.x / sv));
        }
    }
    out
}

fn check_hr_lr(hr: &Image, lr: &Image, s: ScaleFactor) -> Result<()> {
    if hr.channels() != lr.channels() {
        return Err(Error::ChannelMismatch { expected: lr.channels(), found: hr.channels() });
    }
    let sv = s.get();
    if hr.width() != lr.width() * sv || hr.height() != lr.height() * sv {
        return Err(Error::DimensionMismatch(format!(
            "HR {}x{} is not LR {}x{} times {sv}",
            hr.width(),
            hr.height(),
            lr.width(),
            lr.height()
        )));
    }
    Ok(())
}

/// Overwrites the retained sites of `blurred_hr` with the observation.
///
/// No arithmetic touches the substituted values, so the LR samples are
/// copied verbatim.
pub fn pixel_substitute(blurred_hr: &Image, lr: &Image, s: ScaleFactor) -> Result<(Image, SubstitutionRecord)> {
    check_hr_lr(blurred_hr, lr, s)?;
    let sv = s.get();
    let mut out = blurred_hr.clone();
    let mut count = 0;
    let mut max_delta: f64 = 0.0;
    for c in 0..lr.channels() {
        for p in retained_sites(lr.width(), lr.height(), s) {
            let v = lr.get(c, p.y / sv, p.x / sv);
            max_delta = max_delta.max((v - blurred_hr.get(c, p.y, p.x)).abs());
            out.set(c, p.y, p.x, v);
            count += 1;
        }
    }
    let record = SubstitutionRecord {
        substituted_count: count,
        expected_count: lr.plane_len() * lr.channels(),
        max_injected_delta: max_delta,
    };
    Ok((out, record))
}

/// The linear map `A = D K` and its exact adjoint `Kᵀ Dᵀ`.
#[derive(Debug, Clone)]
pub struct FormationOp {
    kernel: Kernel,
    scale: ScaleFactor,
}

impl FormationOp {
    pub fn new(kernel: Kernel, scale: ScaleFactor) -> Self {
        Self { kernel, scale }
    }

    /// Operator whose blur is `spec.kernel()`; for bicubic specs this is the
    /// Gaussian surrogate.
    pub fn from_spec(spec: &DegradeSpec) -> Result<Self> {
        Ok(Self::new(spec.kernel()?, spec.scale))
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn scale(&self) -> ScaleFactor {
        self.scale
    }

    pub fn blur(&self, hr: &Image) -> Result<Image> {
        convolve(hr, &self.kernel)
    }

    pub fn forward(&self, hr: &Image) -> Result<Image> {
        decimate(&self.blur(hr)?, self.scale)
    }

    pub fn adjoint(&self, lr: &Image) -> Result<Image> {
        convolve_transpose(&zero_upsample(lr, self.scale), &self.kernel)
    }

    /// Blur then substitute: the feedback step between cascade stages.
    pub fn enforce(&self, hr: &Image, lr: &Image) -> Result<(Image, Image, SubstitutionRecord)> {
        check_divisible(hr, self.scale)?;
        let blurred = self.blur(hr)?;
        let (sub, rec) = pixel_substitute(&blurred, lr, self.scale)?;
        Ok((blurred, sub, rec))
    }
}

/// How the regenerated LR image is compared with the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrComparison {
    /// Straight floating-point comparison.
    #[default]
    Float,
    /// Both sides rounded to 8-bit levels first.
    EightBit,
}

impl std::str::FromStr for LrComparison {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::Float),
            "8bit" => Ok(Self::EightBit),
            other => Err(Error::Config(format!("unknown LR comparison mode `{other}`"))),
        }
    }
}

impl LrComparison {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Float => "float",
            Self::EightBit => "8bit",
        }
    }
}

/// Agreement between an observation and the LR image regenerated from an
/// HR estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    /// Mean squared error on the `[0, 1]` scale.
    pub mse: f64,
    /// `10·log10(1/mse)`; infinite when `mse` is zero.
    #[serde(serialize_with = "metrics::serialize_db")]
    pub psnr: f64,
    /// The same error expressed on the `[0, 255]` scale.
    pub mse_255: f64,
    pub comparison: LrComparison,
}

impl ResidualReport {
    pub fn from_pair(regenerated: &Image, lr: &Image, comparison: LrComparison) -> Result<Self> {
        let mse = match comparison {
            LrComparison::Float => metrics::mse(regenerated, lr)?,
            LrComparison::EightBit => metrics::mse(&regenerated.quantized(), &lr.quantized())?,
        };
        Ok(Self { mse, psnr: metrics::psnr_from_mse(mse), mse_255: mse * 255.0 * 255.0, comparison })
    }
}

/// Re-applies the noise-free formation model to `sr` and measures how far
/// the result is from `lr`.
pub fn constraint_residual(sr: &Image, lr: &Image, spec: &DegradeSpec, comparison: LrComparison) -> Result<ResidualReport> {
    check_hr_lr(sr, lr, spec.scale)?;
    let regenerated = degrade::degrade(sr, &spec.without_noise(), 0)?;
    ResidualReport::from_pair(&regenerated, lr, comparison)
}

/// Residual of the pure decimation constraint `decimate(B̂) = L`, i.e.
/// without re-blurring. Zero for every substituted image.
pub fn substitution_residual(substituted: &Image, lr: &Image, s: ScaleFactor) -> Result<ResidualReport> {
    check_hr_lr(substituted, lr, s)?;
    ResidualReport::from_pair(&decimate(substituted, s)?, lr, LrComparison::Float)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{degrade, gaussian_kernel};
    use proptest::prelude::*;

    fn s(v: usize) -> ScaleFactor {
        ScaleFactor::new(v).unwrap()
    }

    #[test]
    fn zero_upsample_places_samples() {
        let up = zero_upsample(&Image::filled(2, 2, 1, 1.0), s(2));
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y, x)))
            .filter(|&(y, x)| up.get(0, y, x) == 1.0)
            .collect();
        assert_eq!(ones, vec![(0, 0), (0, 2), (2, 0), (2, 2)]);
        assert_eq!(up.data().iter().filter(|&&v| v == 0.0).count(), 12);
        let lr = Image::from_fn(3, 2, 2, |c, y, x| (c * 6 + y * 3 + x) as f64);
        assert_eq!(zero_upsample(&lr, s(1)), lr);
    }

    #[test]
    fn substitute_overwrites_retained_sites() {
        let b = Image::filled(4, 4, 1, 0.5);
        let l = Image::filled(2, 2, 1, 1.0);
        let (out, rec) = pixel_substitute(&b, &l, s(2)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.5 };
                assert_eq!(out.get(0, y, x), expect);
            }
        }
        assert_eq!(rec.substituted_count, 4);
        assert_eq!(rec.expected_count, 4);
        assert_eq!(rec.max_injected_delta, 0.5);
    }

    #[test]
    fn substitute_fixed_point_and_idempotent() {
        let b = Image::from_fn(6, 6, 3, |c, y, x| ((c + y * 7 + x * 3) % 11) as f64 / 10.0);
        let l = decimate(&b, s(3)).unwrap();
        let (out, rec) = pixel_substitute(&b, &l, s(3)).unwrap();
        assert_eq!(out, b);
        assert_eq!(rec.max_injected_delta, 0.0);

        let other = Image::filled(2, 2, 3, 0.9);
        let (once, _) = pixel_substitute(&b, &other, s(3)).unwrap();
        let (twice, _) = pixel_substitute(&once, &other, s(3)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn substitute_rejects_mismatches() {
        let b = Image::zeros(4, 4, 3);
        assert!(matches!(
            pixel_substitute(&b, &Image::zeros(2, 2, 1), s(2)),
            Err(Error::ChannelMismatch { .. })
        ));
        assert!(matches!(
            pixel_substitute(&b, &Image::zeros(3, 2, 3), s(2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn residual_of_ground_truth_is_zero() {
        let hr = Image::from_fn(12, 12, 3, |c, y, x| ((x * x + y + c) % 9) as f64 / 8.0);
        let spec = DegradeSpec::gaussian(s(2));
        let lr = degrade(&hr, &spec, 0).unwrap();
        let r = constraint_residual(&hr, &lr, &spec, LrComparison::Float).unwrap();
        assert!(r.mse <= 1e-15);
        assert!(r.psnr.is_infinite());
    }

    #[test]
    fn substituted_image_decimates_to_observation() {
        let hr = Image::from_fn(8, 8, 1, |_, y, x| ((x * 5 + y * 3) % 7) as f64 / 6.0);
        let lr = Image::from_fn(4, 4, 1, |_, y, x| ((x + y) % 3) as f64 / 2.0);
        let op = FormationOp::new(gaussian_kernel(1.0, 5).unwrap(), s(2));
        let (_, sub, _) = op.enforce(&hr, &lr).unwrap();
        let r = substitution_residual(&sub, &lr, s(2)).unwrap();
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn residual_psnr_matches_scalar_loop() {
        let sr = Image::from_fn(8, 8, 1, |_, y, x| ((x * 13 + y * 7) % 17) as f64 / 16.0);
        let lr = Image::from_fn(4, 4, 1, |_, y, x| ((x * 3 + y * 5) % 11) as f64 / 10.0);
        let spec = DegradeSpec::gaussian(s(2));
        let r = constraint_residual(&sr, &lr, &spec, LrComparison::Float).unwrap();
        let regen = decimate(&convolve(&sr, &spec.kernel().unwrap()).unwrap(), s(2)).unwrap();
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let d = regen.get(0, y, x) - lr.get(0, y, x);
                acc += d * d;
            }
        }
        let mse = acc / 16.0;
        assert!((r.mse - mse).abs() < 1e-15);
        assert!((r.psnr - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn substitution_is_exact(
            bs in prop::collection::vec(-2.0f64..2.0, 144),
            ls in prop::collection::vec(0.0f64..1.0, 16),
        ) {
            let b = Image::from_planar(12, 12, 1, bs).unwrap();
            let l = Image::from_planar(4, 4, 1, ls).unwrap();
            let (out, rec) = pixel_substitute(&b, &l, s(3)).unwrap();
            prop_assert_eq!(decimate(&out, s(3)).unwrap(), l);
            prop_assert_eq!(rec.substituted_count, 16);
        }

        #[test]
        fn zero_upsample_is_adjoint_of_decimate(
            xs in prop::collection::vec(-1.0f64..1.0, 72),
            ys in prop::collection::vec(-1.0f64..1.0, 8),
        ) {
            let x = Image::from_planar(12, 6, 1, xs).unwrap();
            let y = Image::from_planar(4, 2, 1, ys).unwrap();
            let lhs = decimate(&x, s(3)).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&zero_upsample(&y, s(3))).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
            prop_assert_eq!(decimate(&zero_upsample(&y, s(3)), s(3)).unwrap(), y);
        }
    }
}
