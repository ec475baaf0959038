//! Helpers shared by the integration tests: dense-matrix forms of the
//! formation operators, random data, and finite differences.

#![allow(dead_code)]

use pxsub::degrade::{Kernel, ScaleFactor};
use pxsub::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix.
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn at(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| self.data[r * self.cols..][..self.cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn transpose(&self) -> Dense {
        let mut t = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *t.at(c, r) = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn mul(&self, other: &Dense) -> Dense {
        assert_eq!(self.cols, other.rows);
        let mut out = Dense::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.data[k * other.cols + c];
                }
            }
        }
        out
    }
}

/// Mirror without repeating the edge sample, by repeated bouncing.
pub fn bounce(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Blur matrix `K` on a `w×h` plane: same-size correlation, reflect padding.
pub fn blur_matrix(w: usize, h: usize, k: &Kernel) -> Dense {
    let r = (k.size() / 2) as isize;
    let mut m = Dense::zeros(w * h, w * h);
    for y in 0..h {
        for x in 0..w {
            for i in 0..k.size() {
                for j in 0..k.size() {
                    let sy = bounce(y as isize + i as isize - r, h);
                    let sx = bounce(x as isize + j as isize - r, w);
                    *m.at(y * w + x, sy * w + sx) += k.tap(i, j);
                }
            }
        }
    }
    m
}

/// Selection matrix `D` keeping `(i·s, j·s)` of a `w×h` plane.
pub fn decimation_matrix(w: usize, h: usize, s: ScaleFactor) -> Dense {
    let s = s.get();
    let (lw, lh) = (w / s, h / s);
    let mut m = Dense::zeros(lw * lh, w * h);
    for y in 0..lh {
        for x in 0..lw {
            *m.at(y * lw + x, y * s * w + x * s) = 1.0;
        }
    }
    m
}

/// Applies a per-plane matrix to every channel.
pub fn apply_planes(m: &Dense, img: &Image, out_w: usize, out_h: usize) -> Image {
    let data = img.planes().flat_map(|p| m.apply(p)).collect();
    Image::from_planar(out_w, out_h, img.channels(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.random::<f64>())
}

/// Random normalised kernel of odd size.
pub fn random_kernel(size: usize, rng: &mut ChaCha8Rng) -> Kernel {
    Kernel::normalized(size, (0..size * size).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst element-wise relative error, with an absolute floor for entries
/// that are zero up to rounding.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let err = (a - n).abs();
            if err < floor {
                0.0
            } else {
                err / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Piecewise-constant colour rectangles over a soft ramp: edges for the
/// refiners to recover, smooth regions in between.
pub fn synthetic_scene(n: usize, seed: u64) -> Image {
    let mut rng = rng(seed);
    let mut img = Image::from_fn(n, n, 3, |c, y, x| 0.3 + 0.2 * ((x + y + c * 7) as f64 / (2 * n) as f64));
    for _ in 0..6 {
        let (x0, y0) = (rng.random_range(0..n), rng.random_range(0..n));
        let (w, h) = (rng.random_range(4..n / 2), rng.random_range(4..n / 2));
        let col: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..(y0 + h).min(n) {
            for x in x0..(x0 + w).min(n) {
                for (c, v) in col.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    }
    img
}
