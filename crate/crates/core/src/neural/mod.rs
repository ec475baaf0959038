//! A small convolutional refiner with hand-written reverse-mode gradients.
//!
//! Everything runs in double precision on the CPU. Layers expose explicit
//! forward/backward pairs instead of a tape; [`ToyNet`] strings them together
//! and caches the activations its backward pass needs.

mod adam;
mod conv;
mod loss;
mod shuffle;
mod tensor;
mod toynet;
mod weights;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use loss::{formation_loss, l1_loss};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
pub use tensor::Tensor;
pub use toynet::{ConvLayer, ForwardCache, ResBlock, ToyNet, ToyNetShape, RESIDUAL_SCALE};
pub use weights::{decode as decode_weights, encode as encode_weights, read_weights, write_weights, WEIGHTS_MAGIC};
