use super::Tensor;
use crate::degrade::reflect;
use crate::{Error, Result};

/// Gradients of [`conv2d_forward`] with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Tensor,
}

struct Geometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl Geometry {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad()
    }

    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad()
    }
}

fn geometry(x: &Tensor, w: &Tensor) -> Result<Geometry> {
    let (batch, in_c, h, wd) = x.dims4()?;
    let (out_c, w_in, kh, kw) = match w.shape()[..] {
        [o, i, kh, kw] => (o, i, kh, kw),
        _ => return Err(Error::DimensionMismatch(format!("conv weight shape {:?}", w.shape()))),
    };
    if w_in != in_c {
        return Err(Error::ChannelMismatch { expected: w_in, found: in_c });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::DimensionMismatch(format!("conv kernel must be square and odd, got {kh}x{kw}")));
    }
    Ok(Geometry { batch, in_c, out_c, h, w: wd, k: kh })
}

/// Reflect-pads every plane of batch item `n` by `k/2`.
fn pad_item(x: &Tensor, g: &Geometry, n: usize) -> Vec<f64> {
    let (pw, ph, p) = (g.padded_w(), g.padded_h(), g.pad() as isize);
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.in_c * ph * pw];
    let src = x.data();
    for i in 0..g.in_c {
        let base = (n * g.in_c + i) * plane;
        for py in 0..ph {
            let sy = reflect(py as isize - p, g.h);
            for px in 0..pw {
                let sx = reflect(px as isize - p, g.w);
                out[(i * ph + py) * pw + px] = src[base + sy * g.w + sx];
            }
        }
    }
    out
}

/// Stride-1 cross-correlation with reflect padding; output has the input's
/// spatial size. `w` is `(out, in, k, k)` and `b` is `(out)`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let g = geometry(x, w)?;
    if b.numel() != g.out_c {
        return Err(Error::DimensionMismatch(format!("{} biases for {} outputs", b.numel(), g.out_c)));
    }
    let (pw, ph, k) = (g.padded_w(), g.padded_h(), g.k);
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.batch * g.out_c * plane];
    let wd = w.data();
    for n in 0..g.batch {
        let padded = pad_item(x, &g, n);
        for o in 0..g.out_c {
            let dst = &mut out[(n * g.out_c + o) * plane..][..plane];
            dst.fill(b.data()[o]);
            for i in 0..g.in_c {
                let src = &padded[i * ph * pw..][..ph * pw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((o * g.in_c + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..g.h {
                            let row = &src[(y + ky) * pw + kx..][..g.w];
                            for (d, s) in dst[y * g.w..(y + 1) * g.w].iter_mut().zip(row) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.batch, g.out_c, g.h, g.w], out)
}

/// Reverse-mode derivative of [`conv2d_forward`] given the upstream
/// gradient of its output.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let g = geometry(x, w)?;
    if upstream.shape() != [g.batch, g.out_c, g.h, g.w] {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient {:?} for output {:?}",
            upstream.shape(),
            [g.batch, g.out_c, g.h, g.w]
        )));
    }
    let (pw, ph, k, p) = (g.padded_w(), g.padded_h(), g.k, g.pad() as isize);
    let plane = g.h * g.w;
    let wd = w.data();
    let up = upstream.data();
    let mut grad_w = vec![0.0; w.numel()];
    let mut grad_b = vec![0.0; g.out_c];
    let mut grad_x = vec![0.0; x.numel()];
    for n in 0..g.batch {
        let padded = pad_item(x, &g, n);
        let mut grad_pad = vec![0.0; g.in_c * ph * pw];
        for o in 0..g.out_c {
            let go = &up[(n * g.out_c + o) * plane..][..plane];
            grad_b[o] += go.iter().sum::<f64>();
            for i in 0..g.in_c {
                let src = &padded[i * ph * pw..][..ph * pw];
                let gsrc = &mut grad_pad[i * ph * pw..][..ph * pw];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * g.in_c + i) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for y in 0..g.h {
                            let grow = &go[y * g.w..(y + 1) * g.w];
                            let off = (y + ky) * pw + kx;
                            acc += grow.iter().zip(&src[off..off + g.w]).map(|(a, b)| a * b).sum::<f64>();
                            for (d, s) in gsrc[off..off + g.w].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        }
                        grad_w[widx] += acc;
                    }
                }
            }
        }
        // Fold the padded gradient back onto the source samples it mirrors.
        for i in 0..g.in_c {
            let base = (n * g.in_c + i) * plane;
            for py in 0..ph {
                let sy = reflect(py as isize - p, g.h);
                for px in 0..pw {
                    let sx = reflect(px as isize - p, g.w);
                    grad_x[base + sy * g.w + sx] += grad_pad[(i * ph + py) * pw + px];
                }
            }
        }
    }
    Ok(ConvGrads {
        grad_x: Tensor::from_vec(x.shape(), grad_x)?,
        grad_w: Tensor::from_vec(w.shape(), grad_w)?,
        grad_b: Tensor::from_vec(&[g.out_c], grad_b)?,
    })
}
