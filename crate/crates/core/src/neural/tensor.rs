use crate::{Error, Image, Result};

/// Dense row-major array with an optional gradient buffer of the same shape.
///
/// Activations are `(batch, channels, height, width)`; parameters use
/// whatever rank they need (conv weights are `(out, in, k, k)`, biases are
/// rank 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for tensor shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    /// Wraps an image as a batch of one.
    pub fn from_image(img: &Image) -> Self {
        Self {
            shape: vec![1, img.channels(), img.height(), img.width()],
            data: img.data().to_vec(),
            grad: None,
        }
    }

    /// Extracts batch item `n` as an image.
    pub fn to_image(&self, n: usize) -> Result<Image> {
        let (b, c, h, w) = self.dims4()?;
        if n >= b {
            return Err(Error::DimensionMismatch(format!("batch index {n} of {b}")));
        }
        let len = c * h * w;
        Image::from_planar(w, h, c, self.data[n * len..(n + 1) * len].to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        for (a, b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::DimensionMismatch(format!("expected a rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub(crate) fn same_shape_as(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }
}
