use super::Tensor;
use crate::{Error, Result};

/// Sub-pixel rearrangement `(b, c·r², h, w) → (b, c, h·r, w·r)` with
/// `out(c, y, x) = in(c·r² + (y mod r)·r + (x mod r), ⌊y/r⌋, ⌊x/r⌋)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{cin} channels are not divisible by {r}²"
        )));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let ic = ch * r * r + (y % r) * r + xx % r;
                    out[((n * c + ch) * oh + y) * ow + xx] = src[((n * cin + ic) * h + y / r) * w + xx / r];
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, since both are
/// permutations.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, oh, ow) = x.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::DimensionMismatch(format!("{ow}x{oh} is not divisible by {r}")));
    }
    let (h, w, cin) = (oh / r, ow / r, c * r * r);
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for n in 0..b {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let ic = ch * r * r + (y % r) * r + xx % r;
                    out[((n * cin + ic) * h + y / r) * w + xx / r] = src[((n * c + ch) * oh + y) * ow + xx];
                }
            }
        }
    }
    Tensor::from_vec(&[b, cin, h, w], out)
}
