//! Layer specifications, the sequential graph with optional identity skips,
//! and the structural queries the pruner relies on.

mod cost;
pub mod zoo;

pub use cost::{count_cost, CostReport, LayerCost};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (out_features, in_features)
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
}

impl Pool {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(Pool),
    AvgPool(Pool),
    Flatten,
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::AvgPool(_) => "avg_pool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Linear(_))
    }
}

/// Identity skip: the output of unit `from` is added to the batch-norm output
/// of unit `to`, ahead of that unit's ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualLink {
    pub from: usize,
    pub to: usize,
}

/// Per-sample feature shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Feature {
    pub fn len(&self) -> usize {
        match *self {
            Feature::Map { c, h, w } => c * h * w,
            Feature::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match *self {
            Feature::Map { c, .. } => c,
            Feature::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerKind {
    Conv,
    /// Linear layer reached through a flatten; each source channel owns
    /// `plane` consecutive input columns.
    Linear { plane: usize },
}

/// The first weighted layer reading a unit's output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumer {
    pub layer: usize,
    pub kind: ConsumerKind,
    /// The consumer is the network's final (classifier) layer.
    pub is_output: bool,
    /// Batch norm directly following a conv consumer, if any.
    pub bn: Option<usize>,
}

/// A prunable Conv2d -> BatchNorm -> ReLU triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub conv: usize,
    pub bn: usize,
    pub relu: usize,
    pub consumer: Option<Consumer>,
    /// Output channels travel through an identity skip.
    pub carried: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInfo {
    pub units: Vec<Unit>,
    /// Output feature of each layer, per sample.
    pub shapes: Vec<Feature>,
}

impl GraphInfo {
    pub fn output(&self, input: Feature) -> Feature {
        self.shapes.last().copied().unwrap_or(input)
    }

    /// Units whose channels may be removed: they have a non-classifier
    /// consumer and are not carried by a skip.
    pub fn prunable_units(&self) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| !u.carried && matches!(u.consumer, Some(c) if !c.is_output))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn unit(&self, unit: usize) -> Result<&Unit> {
        self.units.get(unit).ok_or(Error::Index {
            index: unit,
            extent: self.units.len(),
        })
    }

    pub fn unit_of_conv(&self, layer: usize) -> Option<usize> {
        self.units.iter().position(|u| u.conv == layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// (channels, height, width) of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub residual_links: Vec<ResidualLink>,
}

impl ModelGraph {
    pub fn new(input: [usize; 3], layers: Vec<Layer>) -> Self {
        ModelGraph {
            input,
            layers,
            residual_links: Vec::new(),
        }
    }

    pub fn input_feature(&self) -> Feature {
        let [c, h, w] = self.input;
        Feature::Map { c, h, w }
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        let [c, h, w] = self.input;
        Shape4::new(batch, c, h, w)
    }

    /// Check every structural invariant and derive the unit table.
    pub fn validate(&self) -> Result<GraphInfo> {
        let shapes = infer_shapes(&self.layers, self.input_feature())?;
        let units = self.find_units(&shapes)?;
        let mut carried = vec![false; units.len()];
        for (i, link) in self.residual_links.iter().enumerate() {
            let bad = |msg: String| Error::Residual { link: i, msg };
            if link.from >= link.to || link.to >= units.len() {
                return Err(bad(format!(
                    "needs from < to < {} units, got {} -> {}",
                    units.len(),
                    link.from,
                    link.to
                )));
            }
            let src = shapes[units[link.from].relu];
            let dst = shapes[units[link.to].bn];
            if src.channels() != dst.channels() {
                return Err(bad(format!(
                    "width mismatch: {} channels into {}",
                    src.channels(),
                    dst.channels()
                )));
            }
            if src != dst {
                return Err(bad(format!("shape mismatch: {src:?} into {dst:?}")));
            }
            carried[link.from] = true;
            carried[link.to] = true;
        }
        let units = units
            .into_iter()
            .zip(carried)
            .map(|(mut u, c)| {
                u.carried = c;
                u
            })
            .collect();
        Ok(GraphInfo { units, shapes })
    }

    fn find_units(&self, shapes: &[Feature]) -> Result<Vec<Unit>> {
        let layers = &self.layers;
        let last_weighted = layers.iter().rposition(Layer::is_weighted);
        let mut units = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if !matches!(layer, Layer::Conv2d(_)) {
                continue;
            }
            match (layers.get(i + 1), layers.get(i + 2)) {
                (Some(Layer::Relu), _) => return Err(Error::MissingBatchNorm { layer: i }),
                (Some(Layer::BatchNorm(_)), Some(Layer::Relu)) => {
                    let relu = i + 2;
                    let consumer = find_consumer(layers, shapes, relu, last_weighted);
                    units.push(Unit {
                        conv: i,
                        bn: i + 1,
                        relu,
                        consumer,
                        carried: false,
                    });
                }
                _ => {}
            }
        }
        Ok(units)
    }

    pub fn conv(&self, layer: usize) -> Result<&Conv2d> {
        match self.layers.get(layer) {
            Some(Layer::Conv2d(c)) => Ok(c),
            _ => Err(Error::InvalidLayer {
                layer,
                msg: "expected conv2d".into(),
            }),
        }
    }

    pub fn batch_norm(&self, layer: usize) -> Result<&BatchNorm> {
        match self.layers.get(layer) {
            Some(Layer::BatchNorm(b)) => Ok(b),
            _ => Err(Error::InvalidLayer {
                layer,
                msg: "expected batch_norm".into(),
            }),
        }
    }

    pub fn batch_norm_mut(&mut self, layer: usize) -> Result<&mut BatchNorm> {
        match self.layers.get_mut(layer) {
            Some(Layer::BatchNorm(b)) => Ok(b),
            _ => Err(Error::InvalidLayer {
                layer,
                msg: "expected batch_norm".into(),
            }),
        }
    }

    /// Number of output classes (width of the final linear layer).
    pub fn classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.out_features()),
            _ => None,
        })
    }
}

fn find_consumer(
    layers: &[Layer],
    shapes: &[Feature],
    relu: usize,
    last_weighted: Option<usize>,
) -> Option<Consumer> {
    let mut plane = match shapes[relu] {
        Feature::Map { h, w, .. } => h * w,
        Feature::Flat(_) => 1,
    };
    for (j, layer) in layers.iter().enumerate().skip(relu + 1) {
        match layer {
            Layer::MaxPool(_) | Layer::AvgPool(_) => {
                if let Feature::Map { h, w, .. } = shapes[j] {
                    plane = h * w;
                }
            }
            Layer::Flatten => {}
            Layer::Conv2d(_) => {
                if matches!(layers[j - 1], Layer::Flatten) {
                    return None;
                }
                let bn = matches!(layers.get(j + 1), Some(Layer::BatchNorm(_))).then_some(j + 1);
                return Some(Consumer {
                    layer: j,
                    kind: ConsumerKind::Conv,
                    is_output: Some(j) == last_weighted,
                    bn,
                });
            }
            Layer::Linear(_) => {
                return Some(Consumer {
                    layer: j,
                    kind: ConsumerKind::Linear { plane },
                    is_output: Some(j) == last_weighted,
                    bn: None,
                })
            }
            Layer::BatchNorm(_) | Layer::Relu => return None,
        }
    }
    None
}

/// Per-sample output shape of every layer.
pub fn infer_shapes(layers: &[Layer], input: Feature) -> Result<Vec<Feature>> {
    let mut cur = input;
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let mismatch = |msg: String| Error::ShapeMismatch { layer: i, msg };
        let invalid = |msg: &str| Error::InvalidLayer {
            layer: i,
            msg: msg.into(),
        };
        cur = match (layer, cur) {
            (Layer::Conv2d(conv), Feature::Map { c, h, w }) => {
                if conv.weight.shape().len() != 4 {
                    return Err(invalid("conv weight must be 4-d"));
                }
                if conv.in_channels() != c {
                    return Err(mismatch(format!(
                        "conv expects {} input channels, got {c}",
                        conv.in_channels()
                    )));
                }
                if let Some(b) = &conv.bias {
                    if b.len() != conv.out_channels() {
                        return Err(mismatch(format!(
                            "bias has {} entries for {} filters",
                            b.len(),
                            conv.out_channels()
                        )));
                    }
                }
                let (oh, ow) = conv
                    .output_hw(h, w)
                    .ok_or_else(|| invalid("kernel larger than padded input or zero stride"))?;
                Feature::Map {
                    c: conv.out_channels(),
                    h: oh,
                    w: ow,
                }
            }
            (Layer::BatchNorm(bn), Feature::Map { c, .. }) => {
                let n = bn.gamma.len();
                if [bn.beta.len(), bn.running_mean.len(), bn.running_var.len()]
                    .iter()
                    .any(|&l| l != n)
                {
                    return Err(invalid("batch norm vectors differ in length"));
                }
                if n != c {
                    return Err(mismatch(format!("batch norm over {n} channels, got {c}")));
                }
                if bn.running_var.iter().any(|&v| !(v > 0.0)) {
                    return Err(invalid("running_var must be positive"));
                }
                if !(bn.eps >= 0.0) {
                    return Err(invalid("epsilon must be non-negative"));
                }
                cur
            }
            (Layer::Relu, f) => f,
            (Layer::MaxPool(p) | Layer::AvgPool(p), Feature::Map { c, h, w }) => {
                let (oh, ow) = p
                    .output_hw(h, w)
                    .ok_or_else(|| invalid("pool window larger than input or zero stride"))?;
                Feature::Map { c, h: oh, w: ow }
            }
            (Layer::Flatten, f) => Feature::Flat(f.len()),
            (Layer::Linear(lin), Feature::Flat(n)) => {
                if lin.weight.shape().len() != 2 {
                    return Err(invalid("linear weight must be 2-d"));
                }
                if lin.in_features() != n {
                    return Err(mismatch(format!(
                        "linear expects {} inputs, got {n}",
                        lin.in_features()
                    )));
                }
                if let Some(b) = &lin.bias {
                    if b.len() != lin.out_features() {
                        return Err(mismatch("bias length differs from outputs".into()));
                    }
                }
                Feature::Flat(lin.out_features())
            }
            (Layer::Linear(_), Feature::Map { .. }) => {
                return Err(mismatch("linear layer needs a flatten first".into()))
            }
            (_, Feature::Flat(_)) => {
                return Err(mismatch(format!("{} needs a spatial input", layer.kind())))
            }
        };
        out.push(cur);
    }
    Ok(out)
}

/// Dense (rows x cols) matrix of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Aggregated consumer weights W(j, k): the response of consumer channel `j`
/// to a unit-valued constant on source channel `k`, with kernels summed over
/// their spatial extent (or, for a linear consumer, over the columns fed by
/// channel `k`).
pub fn downstream_weights(graph: &ModelGraph, unit: usize) -> Result<Matrix> {
    let info = graph.validate()?;
    downstream_weights_with(graph, &info, unit)
}

pub(crate) fn downstream_weights_with(
    graph: &ModelGraph,
    info: &GraphInfo,
    unit: usize,
) -> Result<Matrix> {
    let consumer = match info.unit(unit)?.consumer {
        Some(c) if !c.is_output => c,
        _ => return Err(Error::NoConsumer { unit }),
    };
    match (&graph.layers[consumer.layer], consumer.kind) {
        (Layer::Conv2d(conv), ConsumerKind::Conv) => {
            let (o, i) = (conv.out_channels(), conv.in_channels());
            let (kh, kw) = conv.kernel();
            let taps = kh * kw;
            let mut m = Matrix::zeros(o, i);
            for (idx, chunk) in conv.weight.data().chunks_exact(taps).enumerate() {
                m.data[idx] = chunk.iter().map(|&v| v as f64).sum();
            }
            Ok(m)
        }
        (Layer::Linear(lin), ConsumerKind::Linear { plane }) => {
            let (o, n) = (lin.out_features(), lin.in_features());
            let channels = n / plane;
            let mut m = Matrix::zeros(o, channels);
            for j in 0..o {
                let row = &lin.weight.data()[j * n..(j + 1) * n];
                for k in 0..channels {
                    m.data[j * channels + k] = row[k * plane..(k + 1) * plane]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                }
            }
            Ok(m)
        }
        _ => Err(Error::NoConsumer { unit }),
    }
}

#[cfg(test)]
mod tests {
    use super::zoo::{vgg8, VggConfig};
    use super::*;
    use crate::infer::forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv(out: usize, inp: usize, k: usize, pad: usize) -> Layer {
        Layer::Conv2d(Conv2d {
            weight: Tensor::new(&[out, inp, k, k], 0.1).unwrap(),
            bias: None,
            stride: 1,
            padding: pad,
        })
    }

    #[test]
    fn vgg8_has_six_units() {
        let g = vgg8(&VggConfig::default(), 0);
        let info = g.validate().unwrap();
        assert_eq!(info.units.len(), 6);
        // Last conv unit feeds the hidden linear layer, not the classifier.
        assert_eq!(info.prunable_units(), vec![0, 1, 2, 3, 4, 5]);
        let last = info.units[5].consumer.unwrap();
        assert!(matches!(last.kind, ConsumerKind::Linear { plane: 16 }));
    }

    #[test]
    fn conv_width_mismatch_names_layer() {
        let g = ModelGraph::new(
            [3, 8, 8],
            vec![
                conv(16, 3, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(16)),
                Layer::Relu,
                conv(4, 8, 3, 1),
            ],
        );
        match g.validate() {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv_relu_without_bn() {
        let g = ModelGraph::new([3, 8, 8], vec![conv(4, 3, 3, 1), Layer::Relu]);
        assert!(matches!(
            g.validate(),
            Err(Error::MissingBatchNorm { layer: 0 })
        ));
    }

    #[test]
    fn residual_width_mismatch() {
        let mut g = ModelGraph::new(
            [3, 8, 8],
            vec![
                conv(4, 3, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                conv(6, 4, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(6)),
                Layer::Relu,
            ],
        );
        g.residual_links.push(ResidualLink { from: 0, to: 1 });
        assert!(matches!(g.validate(), Err(Error::Residual { link: 0, .. })));
    }

    #[test]
    fn residual_marks_units_carried() {
        let mut g = ModelGraph::new(
            [3, 8, 8],
            vec![
                conv(4, 3, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                conv(6, 4, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(6)),
                Layer::Relu,
                conv(4, 6, 3, 1),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                conv(4, 4, 3, 1),
            ],
        );
        g.residual_links.push(ResidualLink { from: 0, to: 2 });
        let info = g.validate().unwrap();
        assert!(info.units[0].carried && info.units[2].carried);
        assert!(!info.units[1].carried);
        assert_eq!(info.prunable_units(), vec![1]);
    }

    #[test]
    fn bad_running_var() {
        let mut bn = BatchNorm::identity(4);
        bn.running_var[2] = 0.0;
        let g = ModelGraph::new([3, 8, 8], vec![conv(4, 3, 3, 1), Layer::BatchNorm(bn)]);
        assert!(matches!(g.validate(), Err(Error::InvalidLayer { layer: 1, .. })));
    }

    fn unit_then_conv(weight: Tensor) -> ModelGraph {
        let (o, i) = (weight.shape()[0], weight.shape()[1]);
        let padding = weight.shape()[2] / 2;
        ModelGraph::new(
            [2, 6, 6],
            vec![
                conv(i, 2, 1, 0),
                Layer::BatchNorm(BatchNorm::identity(i)),
                Layer::Relu,
                Layer::Conv2d(Conv2d {
                    weight,
                    bias: None,
                    stride: 1,
                    padding,
                }),
                Layer::BatchNorm(BatchNorm::identity(o)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::new(&[2, o * 36], 0.01).unwrap(),
                    bias: None,
                }),
            ],
        )
    }

    #[test]
    fn aggregation_of_1x1_kernels_is_raw() {
        let w = Tensor::from_vec(&[2, 3, 1, 1], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let m = downstream_weights(&unit_then_conv(w.clone()), 0).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        for (a, b) in m.data.iter().zip(w.data()) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn aggregation_of_ones_is_nine() {
        let w = Tensor::new(&[2, 3, 3, 3], 1.0).unwrap();
        let m = downstream_weights(&unit_then_conv(w), 0).unwrap();
        assert!(m.data.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn classifier_consumer_is_rejected() {
        let w = Tensor::new(&[2, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            downstream_weights(&unit_then_conv(w), 1),
            Err(Error::NoConsumer { unit: 1 })
        ));
    }

    #[test]
    fn aggregation_matches_constant_input_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (o, i) = (3, 4);
        let data: Vec<f32> = (0..o * i * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(&[o, i, 3, 3], data).unwrap();
        let m = downstream_weights(&unit_then_conv(w.clone()), 0).unwrap();
        // Oracle: push a constant map on channel k through the bare conv and
        // read an interior output pixel.
        let c = 1.75f32;
        for k in 0..i {
            let mut input = Tensor::zeros(&[1, i, 6, 6]).unwrap();
            for v in &mut input.data_mut()[k * 36..(k + 1) * 36] {
                *v = c;
            }
            let probe = ModelGraph::new(
                [i, 6, 6],
                vec![Layer::Conv2d(Conv2d {
                    weight: w.clone(),
                    bias: None,
                    stride: 1,
                    padding: 1,
                })],
            );
            let out = forward(&probe, &input).unwrap();
            for j in 0..o {
                let interior = out.data()[j * 36 + 2 * 6 + 3] as f64 / c as f64;
                assert!((interior - m.get(j, k)).abs() < 1e-5, "{j},{k}");
            }
        }
    }

    #[test]
    fn linear_consumer_sums_column_groups() {
        let lin = Tensor::from_vec(&[1, 8], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let g = ModelGraph::new(
            [1, 4, 4],
            vec![
                conv(2, 1, 1, 0),
                Layer::BatchNorm(BatchNorm::identity(2)),
                Layer::Relu,
                Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: lin,
                    bias: None,
                }),
                Layer::Relu,
                Layer::Linear(Linear {
                    weight: Tensor::new(&[2, 1], 1.0).unwrap(),
                    bias: None,
                }),
            ],
        );
        let m = downstream_weights(&g, 0).unwrap();
        assert_eq!(m.data, vec![10.0, 26.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn aggregation_is_linear_in_consumer_weights(seed in any::<u64>(), c in -4.0f32..4.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w = Tensor::from_vec(&[2, 3, 3, 3], data.clone()).unwrap();
                let scaled = Tensor::from_vec(&[2, 3, 3, 3], data.iter().map(|v| v * c).collect()).unwrap();
                let a = downstream_weights(&unit_then_conv(w), 0).unwrap();
                let b = downstream_weights(&unit_then_conv(scaled), 0).unwrap();
                for (x, y) in a.data.iter().zip(&b.data) {
                    prop_assert!((x * c as f64 - y).abs() < 1e-5);
                }
            }
        }
    }
}
