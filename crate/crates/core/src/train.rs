//! Minibatch SGD with momentum and hand-written backward passes for the
//! supported layer set.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Feature, GraphInfo, Layer, ModelGraph};
use crate::ops::{self, ConvGeom, ConvScratch};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 1,
            lr_steps: Vec::new(),
            lr_gamma: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr == 0 is accepted as the documented no-op.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Config(format!("lr gamma {} must be > 0", self.lr_gamma)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let steps = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.lr * self.lr_gamma.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

/// Learnable tensors of a layer, in a fixed order.
fn params(layer: &Layer) -> Vec<&[f32]> {
    match layer {
        Layer::Conv2d(c) => {
            let mut v = vec![c.weight.data()];
            v.extend(c.bias.as_deref());
            v
        }
        Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
        Layer::Linear(l) => {
            let mut v = vec![l.weight.data()];
            v.extend(l.bias.as_deref());
            v
        }
        _ => Vec::new(),
    }
}

fn params_mut(layer: &mut Layer) -> Vec<&mut [f32]> {
    match layer {
        Layer::Conv2d(c) => {
            let mut v = vec![c.weight.data_mut()];
            v.extend(c.bias.as_deref_mut());
            v
        }
        Layer::BatchNorm(bn) => vec![&mut bn.gamma[..], &mut bn.beta[..]],
        Layer::Linear(l) => {
            let mut v = vec![l.weight.data_mut()];
            v.extend(l.bias.as_deref_mut());
            v
        }
        _ => Vec::new(),
    }
}

/// Per layer, per learnable tensor gradients. Conv and linear layers list
/// weight then bias, batch norms gamma then beta.
pub type Grads = Vec<Vec<Vec<f32>>>;

fn zero_grads(graph: &ModelGraph) -> Grads {
    graph
        .layers
        .iter()
        .map(|l| params(l).iter().map(|p| vec![0.0; p.len()]).collect())
        .collect()
}

fn channels_plane(feat: Feature) -> (usize, usize) {
    match feat {
        Feature::Map { c, h, w } => (c, h * w),
        Feature::Flat(k) => (k, 1),
    }
}

/// Training-mode activations kept for the backward pass.
struct Tape {
    n: usize,
    /// Input of every layer followed by the network output.
    acts: Vec<Vec<f32>>,
    /// Batch mean and 1/std per batch-norm layer.
    bn: HashMap<usize, (Vec<f32>, Vec<f32>)>,
    /// Biased batch variance per batch-norm layer.
    batch_var: HashMap<usize, Vec<f32>>,
    argmax: HashMap<usize, Vec<u32>>,
    /// Skip target bn layer -> skip source relu layer.
    add_at: HashMap<usize, usize>,
}

fn forward_train(graph: &ModelGraph, info: &GraphInfo, batch: &Tensor) -> Result<Tape> {
    let s = batch.dims4()?;
    if [s.channels, s.height, s.width] != graph.input {
        return Err(Error::Shape(format!(
            "batch sample shape {:?} does not match graph input {:?}",
            [s.channels, s.height, s.width],
            graph.input
        )));
    }
    let n = s.batch;
    let add_at: HashMap<usize, usize> = graph
        .residual_links
        .iter()
        .map(|l| (info.units[l.to].bn, info.units[l.from].relu))
        .collect();
    let mut tape = Tape {
        n,
        acts: vec![batch.data().to_vec()],
        bn: HashMap::new(),
        batch_var: HashMap::new(),
        argmax: HashMap::new(),
        add_at,
    };
    let mut feat = graph.input_feature();
    let mut scratch = ConvScratch::default();
    for (i, layer) in graph.layers.iter().enumerate() {
        let out_feat = info.shapes[i];
        let (in_len, out_len) = (feat.len(), out_feat.len());
        let x = &tape.acts[i];
        let mut y = vec![0.0f32; n * out_len];
        let mut bn_saved = None;
        let mut arg_saved = None;
        match layer {
            Layer::Conv2d(conv) => {
                let Feature::Map { h, w, .. } = feat else {
                    unreachable!("validated")
                };
                let g = ConvGeom::new(conv, h, w);
                ops::conv_forward_batch(conv, &g, x, n, &mut scratch, &mut y);
            }
            Layer::BatchNorm(bn) => {
                let (c, plane) = channels_plane(feat);
                let m = (n * plane) as f64;
                let mut means = vec![0.0f32; c];
                let mut inv = vec![0.0f32; c];
                let mut vars = vec![0.0f32; c];
                for ch in 0..c {
                    let values = (0..n).flat_map(|b| {
                        let start = (b * c + ch) * plane;
                        x[start..start + plane].iter().map(|&v| v as f64)
                    });
                    let mean = values.clone().sum::<f64>() / m;
                    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let inv_std = 1.0 / (var + bn.eps as f64).sqrt();
                    means[ch] = mean as f32;
                    vars[ch] = var as f32;
                    inv[ch] = inv_std as f32;
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        for (o, &v) in y[start..start + plane].iter_mut().zip(&x[start..start + plane]) {
                            *o = bn.gamma[ch] * ((v - means[ch]) * inv[ch]) + bn.beta[ch];
                        }
                    }
                }
                if let Some(src) = tape.add_at.get(&i) {
                    for (o, s) in y.iter_mut().zip(&tape.acts[src + 1]) {
                        *o += s;
                    }
                }
                bn_saved = Some((means, inv, vars));
            }
            Layer::Relu => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            Layer::MaxPool(p) => {
                let (c, _) = channels_plane(feat);
                let Feature::Map { h, w, .. } = feat else {
                    unreachable!("validated")
                };
                let mut arg = vec![0u32; n * out_len];
                for b in 0..n {
                    ops::max_pool(
                        p,
                        c,
                        h,
                        w,
                        &x[b * in_len..(b + 1) * in_len],
                        &mut y[b * out_len..(b + 1) * out_len],
                        Some(&mut arg[b * out_len..(b + 1) * out_len]),
                    );
                }
                arg_saved = Some(arg);
            }
            Layer::AvgPool(p) => {
                let Feature::Map { c, h, w } = feat else {
                    unreachable!("validated")
                };
                for b in 0..n {
                    ops::avg_pool(
                        p,
                        c,
                        h,
                        w,
                        &x[b * in_len..(b + 1) * in_len],
                        &mut y[b * out_len..(b + 1) * out_len],
                    );
                }
            }
            Layer::Flatten => y.copy_from_slice(x),
            Layer::Linear(lin) => {
                let (o, k) = (lin.out_features(), lin.in_features());
                ops::gemm(n, k, o, x, false, lin.weight.data(), true, &mut y, false);
                if let Some(bias) = &lin.bias {
                    for row in y.chunks_exact_mut(o) {
                        for (v, b) in row.iter_mut().zip(bias) {
                            *v += b;
                        }
                    }
                }
            }
        }
        if let Some((means, inv, vars)) = bn_saved {
            tape.bn.insert(i, (means, inv));
            tape.batch_var.insert(i, vars);
        }
        if let Some(arg) = arg_saved {
            tape.argmax.insert(i, arg);
        }
        tape.acts.push(y);
        feat = out_feat;
    }
    Ok(tape)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn softmax_xent(logits: &[f32], labels: &[u8], classes: usize) -> Result<(f64, Vec<f32>)> {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let label = label as usize;
        if label >= classes {
            return Err(Error::Index {
                index: label,
                extent: classes,
            });
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label] as f64;
        for (k, e) in exps.iter().enumerate() {
            let p = e / z - if k == label { 1.0 } else { 0.0 };
            grad[b * classes + k] = (p / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

fn backward(graph: &ModelGraph, info: &GraphInfo, tape: &Tape, dlogits: Vec<f32>) -> Grads {
    let n = tape.n;
    let mut grads = zero_grads(graph);
    let mut pending: HashMap<usize, Vec<f32>> = HashMap::new();
    let mut g = dlogits;
    let mut scratch = ConvScratch::default();
    for i in (0..graph.layers.len()).rev() {
        if let Some(extra) = pending.remove(&i) {
            for (a, b) in g.iter_mut().zip(extra) {
                *a += b;
            }
        }
        if let Some(&src) = tape.add_at.get(&i) {
            pending.insert(src, g.clone());
        }
        let in_feat = if i == 0 {
            graph.input_feature()
        } else {
            info.shapes[i - 1]
        };
        let (in_len, out_len) = (in_feat.len(), info.shapes[i].len());
        let x = &tape.acts[i];
        let need_dx = i > 0;
        let mut dx = vec![0.0f32; if need_dx { n * in_len } else { 0 }];
        match &graph.layers[i] {
            Layer::Conv2d(conv) => {
                let Feature::Map { h, w, .. } = in_feat else {
                    unreachable!("validated")
                };
                let geom = ConvGeom::new(conv, h, w);
                let (gw, gb) = grads[i].split_at_mut(1);
                ops::conv_backward_batch(
                    conv,
                    &geom,
                    x,
                    &g,
                    n,
                    &mut scratch,
                    &mut gw[0],
                    gb.first_mut().map(|v| &mut v[..]),
                    need_dx.then_some(&mut dx[..]),
                );
            }
            Layer::BatchNorm(bn) => {
                let (c, plane) = channels_plane(in_feat);
                let (means, inv) = &tape.bn[&i];
                let m = (n * plane) as f64;
                for ch in 0..c {
                    let idx = |b: usize| (b * c + ch) * plane;
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let s = idx(b);
                        for (&dy, &v) in g[s..s + plane].iter().zip(&x[s..s + plane]) {
                            let xhat = (v - means[ch]) * inv[ch];
                            sum_dy += dy as f64;
                            sum_dy_xhat += (dy * xhat) as f64;
                        }
                    }
                    grads[i][0][ch] = sum_dy_xhat as f32;
                    grads[i][1][ch] = sum_dy as f32;
                    if need_dx {
                        let scale = bn.gamma[ch] * inv[ch];
                        let (mean_dy, mean_dy_xhat) = ((sum_dy / m) as f32, (sum_dy_xhat / m) as f32);
                        for b in 0..n {
                            let s = idx(b);
                            for ((d, &dy), &v) in dx[s..s + plane].iter_mut().zip(&g[s..s + plane]).zip(&x[s..s + plane]) {
                                let xhat = (v - means[ch]) * inv[ch];
                                *d = scale * (dy - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    }
                }
            }
            Layer::Relu => {
                for ((d, &dy), &v) in dx.iter_mut().zip(&g).zip(x) {
                    *d = if v > 0.0 { dy } else { 0.0 };
                }
            }
            Layer::MaxPool(_) => {
                let arg = &tape.argmax[&i];
                for b in 0..n {
                    let dxs = &mut dx[b * in_len..(b + 1) * in_len];
                    for (&a, &dy) in arg[b * out_len..(b + 1) * out_len].iter().zip(&g[b * out_len..(b + 1) * out_len]) {
                        dxs[a as usize] += dy;
                    }
                }
            }
            Layer::AvgPool(p) => {
                let Feature::Map { c, h, w } = in_feat else {
                    unreachable!("validated")
                };
                for b in 0..n {
                    ops::avg_pool_backward(
                        p,
                        c,
                        h,
                        w,
                        &g[b * out_len..(b + 1) * out_len],
                        &mut dx[b * in_len..(b + 1) * in_len],
                    );
                }
            }
            Layer::Flatten => {
                if need_dx {
                    dx.copy_from_slice(&g);
                }
            }
            Layer::Linear(lin) => {
                let (o, k) = (lin.out_features(), lin.in_features());
                // dW = dY^T (o x n) * X (n x k)
                ops::gemm(o, n, k, &g, true, x, false, &mut grads[i][0], false);
                if lin.bias.is_some() {
                    let gb = &mut grads[i][1];
                    for row in g.chunks_exact(o) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                if need_dx {
                    ops::gemm(n, o, k, &g, false, lin.weight.data(), false, &mut dx, false);
                }
            }
        }
        g = dx;
    }
    grads
}

/// Training-mode loss of one batch and the gradient of every learnable
/// tensor; the graph is not modified.
pub fn loss_and_grads(graph: &ModelGraph, batch: &Tensor, labels: &[u8]) -> Result<(f64, Grads)> {
    let info = graph.validate()?;
    let (loss, grads, _) = step_pass(graph, &info, batch, labels)?;
    Ok((loss, grads))
}

/// Worst relative error between the analytic gradient and central
/// differences with step `h`, over every learnable entry. In f32 a step
/// near 5e-3 balances truncation against rounding. The denominator
/// is floored at 1e-2 so near-zero gradients compare absolutely.
pub fn gradient_check(graph: &ModelGraph, batch: &Tensor, labels: &[u8], h: f32) -> Result<f64> {
    let info = graph.validate()?;
    let (_, grads, _) = step_pass(graph, &info, batch, labels)?;
    let mut worst = 0.0f64;
    for l in 0..graph.layers.len() {
        for t in 0..grads[l].len() {
            for e in 0..grads[l][t].len() {
                let mut plus = graph.clone();
                params_mut(&mut plus.layers[l])[t][e] += h;
                let mut minus = graph.clone();
                params_mut(&mut minus.layers[l])[t][e] -= h;
                let lp = step_pass(&plus, &info, batch, labels)?.0;
                let lm = step_pass(&minus, &info, batch, labels)?.0;
                let numeric = (lp - lm) / (2.0 * h as f64);
                let analytic = grads[l][t][e] as f64;
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn step_pass(
    graph: &ModelGraph,
    info: &GraphInfo,
    batch: &Tensor,
    labels: &[u8],
) -> Result<(f64, Grads, Tape)> {
    let tape = forward_train(graph, info, batch)?;
    let classes = match info.shapes.last() {
        Some(Feature::Flat(k)) => *k,
        _ => return Err(Error::InvalidLayer {
            layer: graph.layers.len().saturating_sub(1),
            msg: "training needs a flat logits output".into(),
        }),
    };
    let logits = tape.acts.last().expect("output");
    let (loss, dlogits) = softmax_xent(logits, labels, classes)?;
    let grads = backward(graph, info, &tape, dlogits);
    Ok((loss, grads, tape))
}

fn update_running_stats(graph: &mut ModelGraph, info: &GraphInfo, tape: &Tape) {
    for (&layer, (means, _)) in &tape.bn {
        let vars = &tape.batch_var[&layer];
        let in_feat = if layer == 0 {
            graph.input_feature()
        } else {
            info.shapes[layer - 1]
        };
        let m = (tape.n * channels_plane(in_feat).1) as f32;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        if let Layer::BatchNorm(bn) = &mut graph.layers[layer] {
            for ch in 0..bn.channels() {
                bn.running_mean[ch] = (1.0 - BN_MOMENTUM) * bn.running_mean[ch] + BN_MOMENTUM * means[ch];
                bn.running_var[ch] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[ch] + BN_MOMENTUM * vars[ch] * unbias;
            }
        }
    }
}

/// Train a copy of `graph`. Returns the trained graph and the per-step loss.
pub fn train(
    graph: &ModelGraph,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, Vec<LossPoint>)> {
    cfg.validate()?;
    let info = graph.validate()?;
    if dataset.is_empty() {
        return Err(Error::Stats("empty training set".into()));
    }
    let mut graph = graph.clone();
    let mut velocity = zero_grads(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.gather(chunk)?;
            let (loss, grads, tape) = step_pass(&graph, &info, &batch.images, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: loss as f32,
                });
            }
            update_running_stats(&mut graph, &info, &tape);
            for ((layer, g), v) in graph.layers.iter_mut().zip(&grads).zip(&mut velocity) {
                for ((p, g), v) in params_mut(layer).into_iter().zip(g).zip(v) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        let g = g + cfg.weight_decay * *p;
                        *v = cfg.momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            curve.push(LossPoint {
                step,
                loss: loss as f32,
                lr,
            });
            step += 1;
        }
    }
    graph.validate()?;
    Ok((graph, curve))
}

/// Fine-tune every parameter for `epochs` epochs with `cfg`'s optimizer
/// settings.
pub fn finetune_layer(
    graph: &ModelGraph,
    dataset: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<ModelGraph> {
    let cfg = TrainConfig {
        epochs,
        ..cfg.clone()
    };
    Ok(train(graph, dataset, &cfg)?.0)
}

pub fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNorm, Conv2d, Linear, Pool, ResidualLink};
    use crate::infer::evaluate;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn conv(o: usize, i: usize, k: usize, stride: usize, bias: bool, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Conv2d(Conv2d {
            weight: rand_tensor(&[o, i, k, k], 0.5, rng),
            bias: bias.then(|| (0..o).map(|_| rng.random_range(-0.2..0.2)).collect()),
            stride,
            padding: k / 2,
        })
    }

    /// Channel 0 mostly inactive after the ReLU, the others mostly active, so
    /// finite differences rarely straddle the kink.
    fn bn(c: usize, rng: &mut ChaCha8Rng) -> Layer {
        let mut b = BatchNorm::identity(c);
        for k in 0..c {
            b.gamma[k] = rng.random_range(0.5..0.8);
            b.beta[k] = if k == 0 { -2.5 } else { 2.5 };
        }
        Layer::BatchNorm(b)
    }

    fn linear(o: usize, i: usize, rng: &mut ChaCha8Rng) -> Layer {
        Layer::Linear(Linear {
            weight: rand_tensor(&[o, i], 0.5, rng),
            bias: Some((0..o).map(|_| rng.random_range(-0.2..0.2)).collect()),
        })
    }

    /// conv(bias) - bn - relu - maxpool - flatten - linear; 102 parameters.
    fn micro_max(rng: &mut ChaCha8Rng) -> ModelGraph {
        ModelGraph::new(
            [2, 4, 4],
            vec![
                conv(3, 2, 3, 1, true, rng),
                bn(3, rng),
                Layer::Relu,
                Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
                Layer::Flatten,
                linear(3, 12, rng),
            ],
        )
    }

    /// strided conv - bn - relu - 1x1 conv - bn - relu - avgpool - linear.
    fn micro_avg(rng: &mut ChaCha8Rng) -> ModelGraph {
        ModelGraph::new(
            [2, 6, 6],
            vec![
                conv(3, 2, 3, 2, false, rng),
                bn(3, rng),
                Layer::Relu,
                conv(4, 3, 1, 1, false, rng),
                bn(4, rng),
                Layer::Relu,
                Layer::AvgPool(Pool { kernel: 3, stride: 3 }),
                Layer::Flatten,
                linear(3, 4, rng),
            ],
        )
    }

    /// Three units with a skip from unit 0 into unit 2.
    fn micro_residual(rng: &mut ChaCha8Rng) -> ModelGraph {
        let mut g = ModelGraph::new(
            [1, 4, 4],
            vec![
                conv(2, 1, 3, 1, false, rng),
                bn(2, rng),
                Layer::Relu,
                conv(2, 2, 3, 1, false, rng),
                bn(2, rng),
                Layer::Relu,
                conv(2, 2, 1, 1, false, rng),
                bn(2, rng),
                Layer::Relu,
                Layer::Flatten,
                linear(3, 32, rng),
            ],
        );
        g.residual_links.push(ResidualLink { from: 0, to: 2 });
        g
    }

    fn batch(graph: &ModelGraph, n: usize, classes: u8, rng: &mut ChaCha8Rng) -> (Tensor, Vec<u8>) {
        let [c, h, w] = graph.input;
        let x = rand_tensor(&[n, c, h, w], 1.0, rng);
        let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (x, y)
    }

    fn gradcheck(graph: &ModelGraph, x: &Tensor, y: &[u8]) -> f64 {
        gradient_check(graph, x, y, 5e-3).unwrap()
    }

    #[test]
    fn gradcheck_conv_bn_maxpool_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = micro_max(&mut rng);
        let n_params: usize = g.layers.iter().flat_map(params).map(|p| p.len()).sum();
        assert!(n_params <= 200);
        let (x, y) = batch(&g, 4, 3, &mut rng);
        let err = gradcheck(&g, &x, &y);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn gradcheck_strided_pointwise_avgpool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = micro_avg(&mut rng);
        let (x, y) = batch(&g, 4, 3, &mut rng);
        let err = gradcheck(&g, &x, &y);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn gradcheck_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = micro_residual(&mut rng);
        let (x, y) = batch(&g, 3, 3, &mut rng);
        let err = gradcheck(&g, &x, &y);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn input_gradient_of_linear_matches_differences() {
        // Perturbing the flatten input exercises dx of every layer above it.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = micro_max(&mut rng);
        let info = g.validate().unwrap();
        let (x, y) = batch(&g, 2, 3, &mut rng);
        let tape = forward_train(&g, &info, &x).unwrap();
        let (_, dlogits) = softmax_xent(tape.acts.last().unwrap(), &y, 3).unwrap();
        let (loss0, _) = softmax_xent(tape.acts.last().unwrap(), &y, 3).unwrap();
        // d loss / d logits against differences of the loss in the logits.
        let logits = tape.acts.last().unwrap().clone();
        for e in 0..logits.len() {
            let mut p = logits.clone();
            p[e] += 1e-3;
            let mut m = logits.clone();
            m[e] -= 1e-3;
            let num = (softmax_xent(&p, &y, 3).unwrap().0 - softmax_xent(&m, &y, 3).unwrap().0) / 2e-3;
            assert!((num - dlogits[e] as f64).abs() < 1e-3, "{num} vs {}", dlogits[e]);
        }
        assert!(loss0.is_finite());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = micro_max(&mut rng);
        let (x, _) = batch(&g, 20, 3, &mut rng);
        let ds = Dataset::new(x, (0..20).map(|i| (i % 3) as u8).collect()).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (t, curve) = train(&g, &ds, &cfg).unwrap();
        assert_eq!(curve.len(), 15);
        for (a, b) in g.layers.iter().zip(&t.layers) {
            assert_eq!(params(a), params(b));
        }
    }

    #[test]
    fn zero_epochs_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = micro_max(&mut rng);
        let (x, _) = batch(&g, 8, 3, &mut rng);
        let ds = Dataset::new(x, vec![0; 8]).unwrap();
        assert_eq!(finetune_layer(&g, &ds, 0, &TrainConfig::default()).unwrap(), g);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = micro_avg(&mut rng);
        let (x, _) = batch(&g, 30, 3, &mut rng);
        let ds = Dataset::new(x, (0..30).map(|i| (i % 3) as u8).collect()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&g, &ds, &cfg).unwrap();
        let b = train(&g, &ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn running_stats_follow_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = micro_max(&mut rng);
        let (x, _) = batch(&g, 16, 3, &mut rng);
        let ds = Dataset::new(x, vec![1; 16]).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 150,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (t, _) = train(&g, &ds, &cfg).unwrap();
        // With frozen weights and one full batch the running stats converge
        // to that batch's statistics of the conv output.
        let stats = crate::infer::collect_stats(&g, &ds, 16, None).unwrap();
        let bn = t.batch_norm(1).unwrap();
        for (ch, m) in stats.layer(0).unwrap().iter().enumerate() {
            let unbiased = m.m2 / (m.count as f64 - 1.0);
            assert!((bn.running_mean[ch] as f64 - m.mean).abs() < 1e-3);
            assert!((bn.running_var[ch] as f64 - unbiased).abs() < 1e-3 * (1.0 + unbiased));
        }
    }

    #[test]
    fn divergence_reports_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ModelGraph::new([1, 2, 2], vec![Layer::Flatten, linear(3, 4, &mut rng)]);
        let (mut x, _) = batch(&g, 8, 3, &mut rng);
        x.data_mut()[5] = f32::NAN;
        let ds = Dataset::new(x, vec![0; 8]).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        // Sample 1 sits in the first or second batch of the shuffled epoch.
        assert!(matches!(
            train(&g, &ds, &cfg),
            Err(Error::Divergence { step: 0 | 1, .. })
        ));
    }

    #[test]
    fn small_lr_loss_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = micro_max(&mut rng);
        let (x, y) = batch(&g, 12, 3, &mut rng);
        let ds = Dataset::new(x, y).unwrap();
        let cfg = TrainConfig {
            lr: 1e-4,
            momentum: 0.0,
            epochs: 10,
            batch_size: 12,
            ..TrainConfig::default()
        };
        let (_, curve) = train(&g, &ds, &cfg).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].loss <= w[0].loss, "{:?}", w);
        }
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 200;
        let mut data = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for _y in 0..8 {
                for x in 0..8 {
                    let bright = (x < 4) == (label == 0);
                    data.push(if bright { 0.7 } else { 0.3 } + rng.random_range(-0.2..0.2));
                }
            }
            labels.push(label);
        }
        let ds = Dataset::new(Tensor::from_vec(&[n, 1, 8, 8], data).unwrap(), labels).unwrap();
        let g = ModelGraph::new(
            [1, 8, 8],
            vec![
                conv(4, 1, 3, 1, false, &mut rng),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                Layer::MaxPool(Pool { kernel: 2, stride: 2 }),
                Layer::Flatten,
                linear(2, 64, &mut rng),
            ],
        );
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 50,
            batch_size: 20,
            seed: 3,
            ..TrainConfig::default()
        };
        let (t, _) = train(&g, &ds, &cfg).unwrap();
        assert!(evaluate(&t, &ds).unwrap() >= 0.95);
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_steps: vec![2, 4],
            lr_gamma: 0.5,
            ..TrainConfig::default()
        };
        let lrs: Vec<f32> = (0..6).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn config_rejects_bad_values() {
        for cfg in [
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
