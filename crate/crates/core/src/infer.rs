//! Inference-mode forward pass, empirical statistics collection and
//! accuracy evaluation.

use std::collections::HashMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Feature, GraphInfo, Layer, ModelGraph};
use crate::ops::{self, ConvGeom, ConvScratch};
use crate::tensor::{Moments, Tensor};

pub const EVAL_BATCH: usize = 250;

/// Run `batch` (N, C, H, W) through the network; returns (N, classes) logits
/// (or the final feature map for graphs without a classifier head).
pub fn forward(graph: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    let info = graph.validate()?;
    run(graph, &info, batch, |_, _, _, _| {})
}

/// Forward pass calling `tap(layer, output, feature, batch)` after each layer.
pub(crate) fn run(
    graph: &ModelGraph,
    info: &GraphInfo,
    batch: &Tensor,
    mut tap: impl FnMut(usize, &[f32], Feature, usize),
) -> Result<Tensor> {
    let s = batch.dims4()?;
    if [s.channels, s.height, s.width] != graph.input {
        return Err(Error::Shape(format!(
            "batch sample shape {:?} does not match graph input {:?}",
            [s.channels, s.height, s.width],
            graph.input
        )));
    }
    let n = s.batch;
    // relu layer of a skip source -> saved activations; bn layer of a skip
    // target -> relu layer whose activations get added.
    let mut saved: HashMap<usize, Vec<f32>> = HashMap::new();
    let add_at: HashMap<usize, usize> = graph
        .residual_links
        .iter()
        .map(|l| (info.units[l.to].bn, info.units[l.from].relu))
        .collect();

    let mut cur = batch.data().to_vec();
    let mut feat = graph.input_feature();
    let mut next = Vec::new();
    let mut scratch = ConvScratch::default();
    for (i, layer) in graph.layers.iter().enumerate() {
        let out_feat = info.shapes[i];
        let (in_len, out_len) = (feat.len(), out_feat.len());
        match layer {
            Layer::Conv2d(conv) => {
                let Feature::Map { h, w, .. } = feat else {
                    unreachable!("validated")
                };
                let g = ConvGeom::new(conv, h, w);
                next.resize(n * out_len, 0.0);
                ops::conv_forward_batch(conv, &g, &cur, n, &mut scratch, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            Layer::BatchNorm(bn) => {
                let Feature::Map { c, h, w } = feat else {
                    unreachable!("validated")
                };
                let plane = h * w;
                for ch in 0..c {
                    let scale = bn.gamma[ch] / (bn.running_var[ch] + bn.eps).sqrt();
                    let shift = bn.beta[ch] - bn.running_mean[ch] * scale;
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        for v in &mut cur[start..start + plane] {
                            *v = *v * scale + shift;
                        }
                    }
                }
                if let Some(src) = add_at.get(&i) {
                    let skip = &saved[src];
                    for (v, s) in cur.iter_mut().zip(skip) {
                        *v += s;
                    }
                }
            }
            Layer::Relu => {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
            Layer::MaxPool(p) | Layer::AvgPool(p) => {
                let Feature::Map { c, h, w } = feat else {
                    unreachable!("validated")
                };
                next.resize(n * out_len, 0.0);
                for b in 0..n {
                    let x = &cur[b * in_len..(b + 1) * in_len];
                    let y = &mut next[b * out_len..(b + 1) * out_len];
                    if matches!(layer, Layer::MaxPool(_)) {
                        ops::max_pool(p, c, h, w, x, y, None);
                    } else {
                        ops::avg_pool(p, c, h, w, x, y);
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
            Layer::Flatten => {}
            Layer::Linear(lin) => {
                let (o, k) = (lin.out_features(), lin.in_features());
                next.resize(n * o, 0.0);
                // (n x k) * (o x k)^T
                ops::gemm(n, k, o, &cur, false, lin.weight.data(), true, &mut next, false);
                if let Some(bias) = &lin.bias {
                    for row in next.chunks_exact_mut(o) {
                        for (v, b) in row.iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
        }
        cur.truncate(n * out_len);
        if graph.residual_links.iter().any(|l| info.units[l.from].relu == i) {
            saved.insert(i, cur.clone());
        }
        tap(i, &cur, out_feat, n);
        feat = out_feat;
    }
    let shape: Vec<usize> = match feat {
        Feature::Map { c, h, w } => vec![n, c, h, w],
        Feature::Flat(k) => vec![n, k],
    };
    Tensor::from_vec(&shape, cur)
}

/// Per-channel moments of one batch of layer output.
fn batch_moments(out: &[f32], feat: Feature, n: usize) -> Vec<Moments> {
    let (c, plane) = match feat {
        Feature::Map { c, h, w } => (c, h * w),
        Feature::Flat(k) => (k, 1),
    };
    let stride = c * plane;
    (0..c)
        .map(|ch| {
            let values = (0..n).flat_map(|b| {
                let start = b * stride + ch * plane;
                out[start..start + plane].iter().map(|&v| v as f64)
            });
            let count = (n * plane) as u64;
            let mean = values.clone().sum::<f64>() / count as f64;
            let m2 = values.map(|v| (v - mean) * (v - mean)).sum();
            Moments { count, mean, m2 }
        })
        .collect()
}

/// Empirical per-channel statistics gathered in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    /// Output moments of every conv and linear layer, indexed by layer. For a
    /// unit's conv these are the pre-BN input statistics of that unit.
    pub layer_outputs: Vec<Option<Vec<Moments>>>,
    /// Post-ReLU moments of every unit.
    pub post_relu: Vec<Vec<Moments>>,
    pub samples: usize,
}

impl EmpiricalStats {
    pub fn layer(&self, layer: usize) -> Result<&[Moments]> {
        self.layer_outputs
            .get(layer)
            .and_then(|m| m.as_deref())
            .ok_or_else(|| Error::Stats(format!("no statistics recorded for layer {layer}")))
    }

    pub fn pre_bn(&self, info: &GraphInfo, unit: usize) -> Result<&[Moments]> {
        self.layer(info.unit(unit)?.conv)
    }

    pub fn post_relu(&self, unit: usize) -> Result<&[Moments]> {
        self.post_relu
            .get(unit)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Stats(format!("no statistics recorded for unit {unit}")))
    }

    pub fn merge(&mut self, other: &EmpiricalStats) -> Result<()> {
        if self.layer_outputs.len() != other.layer_outputs.len()
            || self.post_relu.len() != other.post_relu.len()
        {
            return Err(Error::Stats("merging statistics of different graphs".into()));
        }
        for (a, b) in self.layer_outputs.iter_mut().zip(&other.layer_outputs) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
            }
        }
        for (a, b) in self.post_relu.iter_mut().zip(&other.post_relu) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        self.samples += other.samples;
        Ok(())
    }
}

/// Stream the dataset through the graph, accumulating conv/linear output
/// and post-ReLU moments. `max_batches` caps the number of batches read.
pub fn collect_stats(
    graph: &ModelGraph,
    dataset: &Dataset,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<EmpiricalStats> {
    let info = graph.validate()?;
    let relu_to_unit: HashMap<usize, usize> =
        info.units.iter().enumerate().map(|(u, x)| (x.relu, u)).collect();
    let mut stats = EmpiricalStats {
        layer_outputs: graph
            .layers
            .iter()
            .map(|l| matches!(l, Layer::Conv2d(_) | Layer::Linear(_)).then(Vec::new))
            .collect(),
        post_relu: vec![Vec::new(); info.units.len()],
        samples: 0,
    };
    let limit = max_batches.unwrap_or(usize::MAX);
    for (images, _) in dataset.batches(batch_size).take(limit) {
        let n = images.shape()[0];
        run(graph, &info, &images, |layer, out, feat, n| {
            let slot = if let Some(&u) = relu_to_unit.get(&layer) {
                Some(&mut stats.post_relu[u])
            } else {
                stats.layer_outputs[layer].as_mut()
            };
            if let Some(acc) = slot {
                let batch = batch_moments(out, feat, n);
                if acc.is_empty() {
                    *acc = batch;
                } else {
                    acc.iter_mut().zip(&batch).for_each(|(a, b)| a.merge(b));
                }
            }
        })?;
        stats.samples += n;
    }
    if stats.samples == 0 {
        return Err(Error::Stats("no samples processed".into()));
    }
    Ok(stats)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over the dataset.
pub fn evaluate(graph: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    let info = graph.validate()?;
    let mut correct = 0usize;
    for (images, labels) in dataset.batches(EVAL_BATCH) {
        let logits = run(graph, &info, &images, |_, _, _, _| {})?;
        let classes = logits.shape()[1..].iter().product::<usize>();
        for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
            correct += usize::from(argmax(row) == label as usize);
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
