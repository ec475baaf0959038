//! Full-reference quality metrics and the SR evaluation protocol.

use serde::{Serialize, Serializer};

use crate::degrade::ScaleFactor;
use crate::image::to_luma;
use crate::{Error, Image, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Writes non-finite values as the strings `"inf"` / `"nan"`, which JSON
/// cannot represent natively.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

/// Renders a decibel value, using `inf` for exact matches.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak-1 PSNR for a given MSE; `+∞` when the MSE is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Valid-region separable filtering of one plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; oh * w];
    for y in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            let src = &plane[(y + t) * w..(y + t + 1) * w];
            for (d, s) in tmp[y * w..(y + 1) * w].iter_mut().zip(src) {
                *d += gt * s;
            }
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let row = &tmp[y * w..(y + 1) * w];
        for x in 0..ow {
            out[y * ow + x] = g.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let g = ssim_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, w, h, &g);
    let mu_b = filter_valid(b, w, h, &g);
    let e_aa = filter_valid(&aa, w, h, &g);
    let e_bb = filter_valid(&bb, w, h, &g);
    let e_ab = filter_valid(&ab, w, h, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over all 11×11 windows (Gaussian weighting, σ = 1.5) that fit
/// inside the image. Multi-channel images average the per-channel scores;
/// the evaluation protocol always passes luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width(),
            a.height()
        )));
    }
    let sum: f64 = a
        .planes()
        .zip(b.planes())
        .map(|(pa, pb)| ssim_plane(pa, pb, a.width(), a.height()))
        .sum();
    Ok(sum / a.channels() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Luma only, with an `s`-pixel border removed.
    #[default]
    YChannelShaved,
    /// All channels, whole image.
    RgbFull,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::YChannelShaved => "y-channel-shaved",
            Protocol::RgbFull => "rgb-full",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "y-channel-shaved" => Ok(Protocol::YChannelShaved),
            "rgb-full" => Ok(Protocol::RgbFull),
            other => Err(Error::Config(format!("unknown evaluation protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub protocol: Protocol,
}

/// Scores `sr` against ground truth under `protocol`.
pub fn evaluate_with(sr: &Image, hr_gt: &Image, s: ScaleFactor, protocol: Protocol) -> Result<MetricsReport> {
    sr.ensure_same_shape(hr_gt, "evaluate")?;
    let (a, b) = match protocol {
        Protocol::YChannelShaved => {
            (to_luma(sr).shave(s.get())?, to_luma(hr_gt).shave(s.get())?)
        }
        Protocol::RgbFull => (sr.clone(), hr_gt.clone()),
    };
    let mse = mse(&a, &b)?;
    Ok(MetricsReport { psnr: psnr_from_mse(mse), ssim: ssim(&a, &b)?, mse, protocol })
}

/// The standard SR protocol: luma, `s`-pixel shave, PSNR and SSIM.
pub fn evaluate_sr(sr: &Image, hr_gt: &Image, s: ScaleFactor) -> Result<MetricsReport> {
    evaluate_with(sr, hr_gt, s, Protocol::YChannelShaved)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Image::from_fn(w, h, 1, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn psnr_special_values() {
        let a = Image::filled(4, 4, 1, 0.3);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let z = Image::zeros(4, 4, 3);
        let h = Image::filled(4, 4, 3, 0.5);
        assert!((psnr(&z, &h).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(psnr(&z, &Image::zeros(4, 3, 3)).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let a = noise_image(9, 7, 1);
        let b = noise_image(9, 7, 2);
        let mut acc = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                acc += (a.get(0, y, x) - b.get(0, y, x)).powi(2);
            }
        }
        let expect = 10.0 * (63.0 / acc).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    /// Direct per-window evaluation with a 2-D weight table.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let c = 5.0;
        let mut wts = [[0.0; 11]; 11];
        let mut sum = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5).exp();
                sum += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let (ow, oh) = (a.width() - 10, a.height() - 10);
        let mut total = 0.0;
        for y0 in 0..oh {
            for x0 in 0..ow {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = wts[i][j] / sum;
                        ma += w * a.get(0, y0 + i, x0 + j);
                        mb += w * b.get(0, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = wts[i][j] / sum;
                        let da = a.get(0, y0 + i, x0 + j) - ma;
                        let db = b.get(0, y0 + i, x0 + j) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total / (ow * oh) as f64
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = noise_image(32, 32, 11);
        let b = a.axpby(0.7, &noise_image(32, 32, 12), 0.3).unwrap();
        let got = ssim(&a, &b).unwrap();
        let expect = ssim_oracle(&a, &b);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = noise_image(16, 16, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        assert!(ssim(&Image::zeros(10, 20, 1), &Image::zeros(10, 20, 1)).is_err());
    }

    #[test]
    fn evaluate_ignores_shaved_border() {
        let s = ScaleFactor::new(2).unwrap();
        let gt = Image::from_fn(24, 24, 3, |c, y, x| ((x * 3 + y * 5 + c) % 13) as f64 / 12.0);
        let perfect = evaluate_sr(&gt, &gt, s).unwrap();
        assert!(perfect.psnr.is_infinite());
        assert_eq!(perfect.ssim, 1.0);

        let mut corrupted = gt.clone();
        for c in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    if y < 2 || x < 2 || y >= 22 || x >= 22 {
                        corrupted.set(c, y, x, 1.0 - gt.get(c, y, x));
                    }
                }
            }
        }
        assert_eq!(evaluate_sr(&corrupted, &gt, s).unwrap(), perfect);
        assert!(evaluate_with(&corrupted, &gt, s, Protocol::RgbFull).unwrap().psnr.is_finite());
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let r = MetricsReport { psnr: f64::INFINITY, ssim: 1.0, mse: 0.0, protocol: Protocol::RgbFull };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
        assert_eq!(format_db(r.psnr), "inf");
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_shift_invariant(
            xs in prop::collection::vec(0.2f64..0.8, 36),
            ys in prop::collection::vec(0.2f64..0.8, 36),
            shift in -0.15f64..0.15,
        ) {
            let a = Image::from_planar(6, 6, 1, xs).unwrap();
            let b = Image::from_planar(6, 6, 1, ys).unwrap();
            let p = psnr(&a, &b).unwrap();
            prop_assert_eq!(p, psnr(&b, &a).unwrap());
            let q = psnr(&a.map(|v| v + shift), &b.map(|v| v + shift)).unwrap();
            prop_assert!((p - q).abs() < 1e-9);
        }

        #[test]
        fn ssim_symmetric(
            xs in prop::collection::vec(0.0f64..1.0, 196),
            ys in prop::collection::vec(0.0f64..1.0, 196),
        ) {
            let a = Image::from_planar(14, 14, 1, xs).unwrap();
            let b = Image::from_planar(14, 14, 1, ys).unwrap();
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= 1.0);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
