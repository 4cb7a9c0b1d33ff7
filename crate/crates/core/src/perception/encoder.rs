//! Frozen local image encoder. Its weights never train, but the graph stays
//! connected to the input so losses on embeddings reach the image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PerceptionError;
use crate::hashing::derive_seed;
use crate::numerics::{conv2d, Tensor, Var};

/// Channel widths of the four stride-2 convolutions.
pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 64];
const SLOPE: f64 = 0.2;

/// Four stride-2 3×3 convolutions with leaky activations, global average
/// pooling and a linear projection to `dim`. Inputs are centered at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenImageEncoder {
    kernels: Vec<Tensor>,
    projection: Tensor,
}

impl FrozenImageEncoder {
    /// Seed-derived weights with fan-in uniform scaling.
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"image-encoder", &seed.to_le_bytes()]));
        let mut kernels = Vec::with_capacity(ENCODER_CHANNELS.len());
        let mut cin = 1;
        for &cout in &ENCODER_CHANNELS {
            let bound = (6.0 / (1.0 + SLOPE * SLOPE) / (cin * 9) as f64).sqrt();
            kernels.push(Tensor::uniform([cout, cin, 3, 3], -bound, bound, &mut rng));
            cin = cout;
        }
        let bound = (3.0 / cin as f64).sqrt();
        let projection = Tensor::uniform([cin, dim], -bound, bound, &mut rng);
        Self { kernels, projection }
    }

    /// Imported weights: four `Cout×Cin×3×3` kernels starting from one input
    /// channel, then a `C×dim` projection.
    pub fn from_weights(kernels: Vec<Tensor>, projection: Tensor) -> Result<Self, PerceptionError> {
        let mut cin = 1;
        for k in &kernels {
            match *k.shape() {
                [_, c, 3, 3] if c == cin => cin = k.shape()[0],
                _ => return Err(PerceptionError::Degenerate(format!("bad encoder kernel shape {:?}", k.shape()))),
            }
        }
        if kernels.is_empty() || projection.ndim() != 2 || projection.shape()[0] != cin {
            return Err(PerceptionError::Degenerate(format!("bad encoder projection shape {:?}", projection.shape())));
        }
        Ok(Self { kernels, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// `images` is `N×1×H×W`; returns `N×dim`.
    pub fn encode<'t>(&self, images: Var<'t>) -> Result<Var<'t>, PerceptionError> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(PerceptionError::Degenerate(format!("encoder input must be N×1×H×W, got {shape:?}")));
        }
        let tape = images.tape();
        let mut x = images.add_scalar(-0.5);
        for k in &self.kernels {
            x = conv2d(x, tape.constant(k.clone()), 2, 1)?.leaky_relu(SLOPE);
        }
        let pooled = x.global_avg_pool()?;
        Ok(pooled.matmul(tape.constant(self.projection.clone()))?)
    }

    /// Embedding of a single `H×W` image, without a caller-managed tape.
    pub fn embed(&self, height: usize, width: usize, pixels: &[f64]) -> Result<Vec<f64>, PerceptionError> {
        let tape = crate::numerics::Tape::new();
        let x = tape.constant(Tensor::new([1, 1, height, width], pixels.to_vec())?);
        Ok(self.encode(x)?.value().data().to_vec())
    }
}
