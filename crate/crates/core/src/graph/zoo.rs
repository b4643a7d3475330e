//! Reference architectures with seeded He-normal initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv2d, Layer, Linear, ModelGraph, Pool};
use crate::tensor::Tensor;

/// Six Conv-BN-ReLU units in three stages of two, each stage closed by a
/// 2x2 max pool, then a two-layer classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub widths: [usize; 6],
    pub hidden: usize,
    pub classes: usize,
    pub input: [usize; 3],
}

impl Default for VggConfig {
    fn default() -> Self {
        VggConfig {
            widths: [16, 16, 32, 32, 64, 64],
            hidden: 64,
            classes: 10,
            input: [3, 32, 32],
        }
    }
}

pub(crate) fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
        .expect("positive extents")
}

pub fn conv_unit(
    inp: usize,
    out: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> [Layer; 3] {
    [
        Layer::Conv2d(Conv2d {
            weight: he_tensor(&[out, inp, kernel, kernel], inp * kernel * kernel, rng),
            bias: None,
            stride: 1,
            padding: kernel / 2,
        }),
        Layer::BatchNorm(BatchNorm::identity(out)),
        Layer::Relu,
    ]
}

/// Fully connected layer with weights uniform in ±1/sqrt(inp) and zero bias.
pub fn linear(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = 1.0 / (inp as f32).sqrt();
    let weight = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
    Layer::Linear(Linear {
        weight: Tensor::from_vec(&[out, inp], weight).expect("positive extents"),
        bias: Some(vec![0.0; out]),
    })
}

/// The VGG-8 fixture: 6 conv units plus 2 linear layers.
pub fn vgg8(cfg: &VggConfig, seed: u64) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let [mut c, mut h, mut w] = cfg.input;
    for (i, &width) in cfg.widths.iter().enumerate() {
        layers.extend(conv_unit(c, width, 3, &mut rng));
        c = width;
        if i % 2 == 1 {
            layers.push(Layer::MaxPool(Pool { kernel: 2, stride: 2 }));
            h /= 2;
            w /= 2;
        }
    }
    layers.push(Layer::Flatten);
    layers.push(linear(c * h * w, cfg.hidden, &mut rng));
    layers.push(Layer::Relu);
    layers.push(linear(cfg.hidden, cfg.classes, &mut rng));
    ModelGraph::new(cfg.input, layers)
}
