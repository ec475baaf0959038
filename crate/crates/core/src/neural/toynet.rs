use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv2d_backward, conv2d_forward, pixel_shuffle, pixel_unshuffle, Tensor};
use crate::{Error, Image, Result};

/// Multiplier applied to every residual branch before the skip addition.
pub const RESIDUAL_SCALE: f64 = 0.1;

const IMAGE_CHANNELS: usize = 3;
const KERNEL: usize = 3;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyNetShape {
    /// Feature width `F`.
    pub features: usize,
    /// Residual block count `R`.
    pub blocks: usize,
    /// Sub-pixel upsampling factor; `None` for HR-input stages.
    pub upscale: Option<usize>,
}

impl ToyNetShape {
    pub fn new(features: usize, blocks: usize, upscale: Option<usize>) -> Self {
        Self { features, blocks, upscale: upscale.filter(|&s| s > 1) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(out_c: usize, in_c: usize) -> Self {
        Self { weight: Tensor::zeros(&[out_c, in_c, KERNEL, KERNEL]), bias: Tensor::zeros(&[out_c]) }
    }

    /// Uniform in `±√(6 / (fan_in + fan_out))`, zero bias.
    fn glorot(out_c: usize, in_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(out_c, in_c);
        let fan = ((in_c + out_c) * KERNEL * KERNEL) as f64;
        let bound = (6.0 / fan).sqrt();
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let g = conv2d_backward(x, &self.weight, upstream)?;
        self.weight.accumulate_grad(g.grad_w.data());
        self.bias.accumulate_grad(g.grad_b.data());
        Ok(g.grad_x)
    }

    fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// conv → ReLU → conv, scaled and added to the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl ResBlock {
    /// `x + 0.1 · conv2(relu(conv1(x)))`; no activation after the addition.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_parts(x).map(|(_, y)| y)
    }

    /// Returns the first conv's pre-activation alongside the output.
    fn forward_parts(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let pre = self.conv1.forward(x)?;
        let branch = self.conv2.forward(&pre.map(|v| v.max(0.0)))?;
        let out = add(x, &branch, RESIDUAL_SCALE)?;
        Ok((pre, out))
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    /// Per block: its input and the pre-activation of its first conv.
    blocks: Vec<(Tensor, Tensor)>,
    body_out: Tensor,
    tail_out: Tensor,
    out_in: Tensor,
}

/// EDSR-style refiner: head conv, residual body with a long skip, tail
/// conv, optional sub-pixel upsampler, output conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    shape: ToyNetShape,
    pub head: ConvLayer,
    pub blocks: Vec<ResBlock>,
    pub tail: ConvLayer,
    pub upsampler: Option<ConvLayer>,
    pub out: ConvLayer,
}

fn add(a: &Tensor, b: &Tensor, scale_b: f64) -> Result<Tensor> {
    a.same_shape_as(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + scale_b * y).collect();
    Tensor::from_vec(a.shape(), data)
}

impl ToyNet {
    /// Randomly initialised network; the output conv starts at zero.
    pub fn new(shape: ToyNetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = shape.features;
        let head = ConvLayer::glorot(f, IMAGE_CHANNELS, &mut rng);
        let blocks = (0..shape.blocks)
            .map(|_| ResBlock { conv1: ConvLayer::glorot(f, f, &mut rng), conv2: ConvLayer::glorot(f, f, &mut rng) })
            .collect();
        let tail = ConvLayer::glorot(f, f, &mut rng);
        let upsampler = shape.upscale.map(|s| ConvLayer::glorot(f * s * s, f, &mut rng));
        Self { shape, head, blocks, tail, upsampler, out: ConvLayer::zeros(IMAGE_CHANNELS, f) }
    }

    /// Network with every weight and bias zero.
    pub fn zeros(shape: ToyNetShape) -> Self {
        let f = shape.features;
        Self {
            shape,
            head: ConvLayer::zeros(f, IMAGE_CHANNELS),
            blocks: (0..shape.blocks)
                .map(|_| ResBlock { conv1: ConvLayer::zeros(f, f), conv2: ConvLayer::zeros(f, f) })
                .collect(),
            tail: ConvLayer::zeros(f, f),
            upsampler: shape.upscale.map(|s| ConvLayer::zeros(f * s * s, f)),
            out: ConvLayer::zeros(IMAGE_CHANNELS, f),
        }
    }

    pub fn shape(&self) -> ToyNetShape {
        self.shape
    }

    pub fn has_upsampler(&self) -> bool {
        self.upsampler.is_some()
    }

    /// Output size factor relative to the input.
    pub fn upscale(&self) -> usize {
        self.shape.upscale.unwrap_or(1)
    }

    fn layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1"), &b.conv1));
            out.push((format!("blocks.{i}.conv2"), &b.conv2));
        }
        out.push(("tail".to_string(), &self.tail));
        if let Some(up) = &self.upsampler {
            out.push(("upsampler".to_string(), up));
        }
        out.push(("out".to_string(), &self.out));
        out
    }

    /// Parameters in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weight), (format!("{name}.bias"), &l.bias)])
            .collect()
    }

    /// Same order as [`ToyNet::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.head.weight, &mut self.head.bias];
        for b in &mut self.blocks {
            out.extend([&mut b.conv1.weight, &mut b.conv1.bias, &mut b.conv2.weight, &mut b.conv2.bias]);
        }
        out.extend([&mut self.tail.weight, &mut self.tail.bias]);
        if let Some(up) = &mut self.upsampler {
            out.extend([&mut up.weight, &mut up.bias]);
        }
        out.extend([&mut self.out.weight, &mut self.out.bias]);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Releases every gradient buffer, e.g. once training is over.
    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (_, c, _, _) = x.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ChannelMismatch { expected: IMAGE_CHANNELS, found: c });
        }
        let head_out = self.head.forward(x)?;
        let mut feat = head_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (pre, next) = b.forward_parts(&feat)?;
            blocks.push((feat, pre));
            feat = next;
        }
        let tail_out = add(&self.tail.forward(&feat)?, &head_out, 1.0)?;
        let out_in = match &self.upsampler {
            Some(up) => pixel_shuffle(&up.forward(&tail_out)?, self.upscale())?,
            None => tail_out.clone(),
        };
        let y = self.out.forward(&out_in)?;
        let cache = ForwardCache { input: x.clone(), blocks, body_out: feat, tail_out, out_in };
        Ok((y, cache))
    }

    /// Back-propagates `upstream` (gradient of the loss w.r.t. the output),
    /// accumulating into every parameter's gradient buffer. Returns the
    /// gradient w.r.t. the network input.
    pub fn backward(&mut self, cache: &ForwardCache, upstream: &Tensor) -> Result<Tensor> {
        let g_out_in = self.out.backward(&cache.out_in, upstream)?;
        let scale = self.upscale();
        let g_tail = match &mut self.upsampler {
            Some(up) => up.backward(&cache.tail_out, &pixel_unshuffle(&g_out_in, scale)?)?,
            None => g_out_in,
        };
        // tail_out = tail(body_out) + head_out
        let mut g_feat = self.tail.backward(&cache.body_out, &g_tail)?;
        for (b, (input, pre)) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let g_branch = g_feat.map(|v| RESIDUAL_SCALE * v);
            let relu_out = pre.map(|v| v.max(0.0));
            let g_relu = b.conv2.backward(&relu_out, &g_branch)?;
            let masked: Vec<f64> = g_relu
                .data()
                .iter()
                .zip(pre.data())
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            let g_pre = Tensor::from_vec(pre.shape(), masked)?;
            let g_in = b.conv1.backward(input, &g_pre)?;
            g_feat = add(&g_feat, &g_in, 1.0)?;
        }
        let g_head = add(&g_feat, &g_tail, 1.0)?;
        self.head.backward(&cache.input, &g_head)
    }

    /// Runs the network on a single 3-channel image.
    pub fn refine_image(&self, img: &Image) -> Result<Image> {
        self.forward(&Tensor::from_image(img))?.to_image(0)
    }

    /// Rebuilds a network from `(name, tensor)` records, inferring `F`, `R`
    /// and the upsampling factor from the tensor shapes.
    pub fn from_named(records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::BTreeMap<String, Tensor> = records.into_iter().collect();
        fn take_layer(map: &mut std::collections::BTreeMap<String, Tensor>, name: &str) -> Result<ConvLayer> {
            let weight = map
                .remove(&format!("{name}.weight"))
                .ok_or_else(|| Error::Weights(format!("missing {name}.weight")))?;
            let bias = map
                .remove(&format!("{name}.bias"))
                .ok_or_else(|| Error::Weights(format!("missing {name}.bias")))?;
            match weight.shape()[..] {
                [o, _, KERNEL, KERNEL] if bias.shape() == [o] => Ok(ConvLayer { weight, bias }),
                _ => Err(Error::Weights(format!(
                    "{name}: weight {:?} / bias {:?} is not a 3x3 conv",
                    weight.shape(),
                    bias.shape()
                ))),
            }
        }
        let head = take_layer(&mut map, "head")?;
        if head.in_channels() != IMAGE_CHANNELS {
            return Err(Error::Weights(format!("head expects {} input channels", head.in_channels())));
        }
        let f = head.out_channels();
        let mut blocks = Vec::new();
        while map.contains_key(&format!("blocks.{}.conv1.weight", blocks.len())) {
            let i = blocks.len();
            blocks.push(ResBlock {
                conv1: take_layer(&mut map, &format!("blocks.{i}.conv1"))?,
                conv2: take_layer(&mut map, &format!("blocks.{i}.conv2"))?,
            });
        }
        let tail = take_layer(&mut map, "tail")?;
        let upsampler = if map.contains_key("upsampler.weight") { Some(take_layer(&mut map, "upsampler")?) } else { None };
        let out = take_layer(&mut map, "out")?;
        if !map.is_empty() {
            let extra: Vec<_> = map.keys().cloned().collect();
            return Err(Error::Weights(format!("unexpected tensors {extra:?}")));
        }
        let upscale = match &upsampler {
            None => None,
            Some(up) => {
                let ratio = up.out_channels() / f.max(1);
                let s = (ratio as f64).sqrt().round() as usize;
                if s * s * f != up.out_channels() || s < 2 {
                    return Err(Error::Weights(format!(
                        "upsampler has {} outputs for {f} features",
                        up.out_channels()
                    )));
                }
                Some(s)
            }
        };
        let shape = ToyNetShape { features: f, blocks: blocks.len(), upscale };
        let net = Self { shape, head, blocks, tail, upsampler, out };
        let expected = ToyNet::zeros(shape);
        for ((name, a), (_, b)) in net.named_params().iter().zip(expected.named_params()) {
            if a.shape() != b.shape() {
                return Err(Error::Weights(format!("{name} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize(net: &mut ToyNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn zero_net_outputs_zeros_of_hr_shape() {
        let net = ToyNet::zeros(ToyNetShape::new(4, 2, Some(2)));
        let y = net.forward(&Tensor::zeros(&[1, 3, 5, 6])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 10, 12]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let net = ToyNet::zeros(ToyNetShape::new(4, 1, None));
        assert_eq!(net.forward(&Tensor::zeros(&[1, 3, 5, 6])).unwrap().shape(), &[1, 3, 5, 6]);
        assert!(net.forward(&Tensor::zeros(&[1, 1, 5, 6])).is_err());
    }

    #[test]
    fn fresh_net_starts_at_zero_output() {
        let net = ToyNet::new(ToyNetShape::new(8, 2, Some(2)), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = net.forward(&random_tensor(&[1, 3, 4, 4], &mut rng)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(net, ToyNet::new(ToyNetShape::new(8, 2, Some(2)), 1));
    }

    #[test]
    fn residual_block_scales_branch_by_a_tenth() {
        // Identity stencils everywhere in the block: for a non-negative
        // feature map a, the block yields a + 0.1·relu(a) = 1.1·a.
        let f = 2;
        let mut net = ToyNet::zeros(ToyNetShape::new(f, 1, None));
        let identity = |c: usize| {
            let mut w = Tensor::zeros(&[c, c, 3, 3]);
            for i in 0..c {
                w.data_mut()[(i * c + i) * 9 + 4] = 1.0;
            }
            w
        };
        net.blocks[0].conv1.weight = identity(f);
        net.blocks[0].conv2.weight = identity(f);
        net.blocks[0].conv2.bias = Tensor::from_vec(&[f], vec![0.5, -0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&[1, f, 4, 4], &mut rng).map(f64::abs);
        let out = net.blocks[0].forward(&a).unwrap();
        for (i, (o, x)) in out.data().iter().zip(a.data()).enumerate() {
            let bias = if i < 16 { 0.05 } else { -0.05 };
            assert!((o - (1.1 * x + bias)).abs() < 1e-12);
        }
    }

    fn check_net_gradients(shape: ToyNetShape, h_in: usize, seed: u64) {
        let mut net = ToyNet::zeros(shape);
        randomize(&mut net, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = random_tensor(&[1, 3, h_in, h_in], &mut rng);
        let (y, cache) = net.forward_cached(&x).unwrap();
        let c = random_tensor(y.shape(), &mut rng);
        net.zero_grad();
        let gx = net.backward(&cache, &c).unwrap();
        let loss = |n: &ToyNet, x: &Tensor| -> f64 {
            n.forward(x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let tol = 1e-3;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad().unwrap().to_vec()).collect();
        for (pi, grads) in analytic.iter().enumerate() {
            for i in 0..grads.len() {
                let mut plus = net.clone();
                plus.params_mut()[pi].data_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data_mut()[i] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                assert!(rel(fd, grads[i]) < tol, "param {pi} index {i}: {} vs {fd}", grads[i]);
            }
        }
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!(rel(fd, gx.data()[i]) < tol, "input {i}");
        }
    }

    #[test]
    fn full_net_gradients_with_upsampler() {
        check_net_gradients(ToyNetShape::new(2, 1, Some(2)), 3, 10);
    }

    #[test]
    fn full_net_gradients_hr_stage() {
        check_net_gradients(ToyNetShape::new(2, 1, None), 6, 20);
    }

    #[test]
    fn named_params_round_trip() {
        let net = ToyNet::new(ToyNetShape::new(3, 2, Some(3)), 4);
        let records: Vec<(String, Tensor)> =
            net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ToyNet::from_named(records.clone()).unwrap();
        assert_eq!(back, net);
        let mut broken = records;
        broken.retain(|(n, _)| n != "tail.bias");
        assert!(matches!(ToyNet::from_named(broken), Err(Error::Weights(_))));
    }
}
