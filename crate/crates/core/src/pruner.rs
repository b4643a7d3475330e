//! Channel scoring, selection, structural removal and the post-prune
//! batch-norm statistics correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{check_mask, estimate_with, Activation, LambdaTable};
use crate::graph::{downstream_weights_with, ConsumerKind, GraphInfo, Layer, ModelGraph};
use crate::infer::EmpiricalStats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fsm,
    L1,
    Random,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Fsm => "fsm",
            Method::L1 => "l1",
            Method::Random => "random",
        }
    }
}

/// Per-channel importance of one unit with the ascending ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub unit: usize,
    pub method: Method,
    pub scores: Vec<f64>,
    /// Channel indices sorted by ascending score, lower index first on ties.
    pub ranking: Vec<usize>,
}

impl ScoreReport {
    fn new(unit: usize, method: Method, scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        ScoreReport {
            unit,
            method,
            scores,
            ranking,
        }
    }
}

fn scored_unit(info: &GraphInfo, unit: usize) -> Result<()> {
    match info.unit(unit)?.consumer {
        Some(c) if !c.is_output => Ok(()),
        _ => Err(Error::NoConsumer { unit }),
    }
}

/// Feature-shift score: `delta_k = sum_j |W(j, k)| * E[relu_k]` with the
/// analytic rectified mean.
pub fn score_unit(graph: &ModelGraph, unit: usize) -> Result<ScoreReport> {
    score_unit_with(graph, unit, Activation::PostRelu, None)
}

/// Feature-shift score with a choice of activation reading, optionally
/// taking per-channel means from empirical statistics instead.
pub fn score_unit_with(
    graph: &ModelGraph,
    unit: usize,
    activation: Activation,
    empirical: Option<&EmpiricalStats>,
) -> Result<ScoreReport> {
    let info = graph.validate()?;
    scored_unit(&info, unit)?;
    let weights = downstream_weights_with(graph, &info, unit)?;
    let means: Vec<f64> = match (empirical, activation) {
        (Some(stats), Activation::PostRelu) => {
            stats.post_relu(unit)?.iter().map(|m| m.mean).collect()
        }
        (Some(stats), Activation::PostBn) => {
            // Post-BN mean of an inference-mode BN fed its own statistics.
            let bn = graph.batch_norm(info.units[unit].bn)?;
            stats
                .pre_bn(&info, unit)?
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let scale = bn.gamma[k] as f64 / (bn.running_var[k] as f64 + bn.eps as f64).sqrt();
                    (m.mean - bn.running_mean[k] as f64) * scale + bn.beta[k] as f64
                })
                .collect()
        }
        (None, a) => {
            let full = vec![true; weights.cols];
            estimate_with(graph, &info, unit, &full, a)?.relu_means
        }
    };
    if means.len() != weights.cols {
        return Err(Error::Stats(format!(
            "unit {unit}: {} channel means for {} channels",
            means.len(),
            weights.cols
        )));
    }
    let scores = (0..weights.cols)
        .map(|k| {
            (0..weights.rows)
                .map(|j| (weights.get(j, k) * means[k]).abs())
                .sum()
        })
        .collect();
    Ok(ScoreReport::new(unit, Method::Fsm, scores))
}

/// l1 norm of each output filter of the unit's own conv.
pub fn score_l1(graph: &ModelGraph, unit: usize) -> Result<ScoreReport> {
    let info = graph.validate()?;
    scored_unit(&info, unit)?;
    let conv = graph.conv(info.units[unit].conv)?;
    let per = conv.weight.len() / conv.out_channels();
    let scores = conv
        .weight
        .data()
        .chunks_exact(per)
        .map(|f| f.iter().map(|v| v.abs() as f64).sum())
        .collect();
    Ok(ScoreReport::new(unit, Method::L1, scores))
}

/// Uniform random scores from a seeded generator.
pub fn score_random(graph: &ModelGraph, unit: usize, seed: u64) -> Result<ScoreReport> {
    let info = graph.validate()?;
    scored_unit(&info, unit)?;
    let d = graph.batch_norm(info.units[unit].bn)?.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (unit as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let scores = (0..d).map(|_| rng.random::<f64>()).collect();
    Ok(ScoreReport::new(unit, Method::Random, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Drop the lowest scores first.
    #[default]
    Ascending,
    /// Drop the highest scores first.
    Reverse,
}

/// Number of channels dropped out of `d` at compression `rate`.
pub fn drop_count(rate: f64, d: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Selection(format!("rate {rate} outside [0, 1)")));
    }
    // Guard against 0.29 * 100 = 28.999999999999996.
    let n = (rate * d as f64 + 1e-9).floor() as usize;
    if n >= d {
        return Err(Error::Selection(format!(
            "rate {rate} would drop all {d} channels"
        )));
    }
    Ok(n)
}

/// Keep mask dropping `floor(rate * d)` channels in the given order.
pub fn select_channels(report: &ScoreReport, rate: f64, order: Order) -> Result<Vec<bool>> {
    let d = report.scores.len();
    let n = drop_count(rate, d)?;
    let mut mask = vec![true; d];
    let dropped: Box<dyn Iterator<Item = &usize>> = match order {
        Order::Ascending => Box::new(report.ranking.iter()),
        Order::Reverse => {
            // Highest first, lower index first on ties.
            let mut by_desc = report.ranking.clone();
            by_desc.sort_by(|&a, &b| {
                report.scores[b]
                    .total_cmp(&report.scores[a])
                    .then(a.cmp(&b))
            });
            return Ok({
                for &k in by_desc.iter().take(n) {
                    mask[k] = false;
                }
                mask
            });
        }
    };
    for &k in dropped.take(n) {
        mask[k] = false;
    }
    Ok(mask)
}

fn select_rows(t: &Tensor, axis: usize, keep: &[bool]) -> Result<Tensor> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let mut data = Vec::with_capacity(t.len());
    for o in 0..outer {
        for (k, _) in keep.iter().enumerate().filter(|(_, &x)| x) {
            let start = (o * extent + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.iter().filter(|&&k| k).count();
    Tensor::from_vec(&new_shape, data)
}

fn filter<T: Copy>(v: &[T], keep: &[bool]) -> Vec<T> {
    v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect()
}

/// Remove the unit's dropped output channels and the matching consumer
/// inputs, returning a new graph.
pub fn apply_prune(graph: &ModelGraph, unit: usize, keep_mask: &[bool]) -> Result<ModelGraph> {
    let info = graph.validate()?;
    let u = info.unit(unit)?.clone();
    if u.carried {
        return Err(Error::UnsupportedStructure {
            unit,
            msg: "output channels are carried by a residual link".into(),
        });
    }
    let consumer = match u.consumer {
        Some(c) if !c.is_output => c,
        _ => return Err(Error::NoConsumer { unit }),
    };
    let d = graph.conv(u.conv)?.out_channels();
    check_mask(keep_mask, d)?;
    let mut out = graph.clone();
    if let Layer::Conv2d(conv) = &mut out.layers[u.conv] {
        conv.weight = select_rows(&conv.weight, 0, keep_mask)?;
        if let Some(b) = &mut conv.bias {
            *b = filter(b, keep_mask);
        }
    }
    if let Layer::BatchNorm(bn) = &mut out.layers[u.bn] {
        bn.gamma = filter(&bn.gamma, keep_mask);
        bn.beta = filter(&bn.beta, keep_mask);
        bn.running_mean = filter(&bn.running_mean, keep_mask);
        bn.running_var = filter(&bn.running_var, keep_mask);
    }
    match (&mut out.layers[consumer.layer], consumer.kind) {
        (Layer::Conv2d(conv), ConsumerKind::Conv) => {
            conv.weight = select_rows(&conv.weight, 1, keep_mask)?;
        }
        (Layer::Linear(lin), ConsumerKind::Linear { plane }) => {
            let columns: Vec<bool> = keep_mask
                .iter()
                .flat_map(|&k| std::iter::repeat_n(k, plane))
                .collect();
            lin.weight = select_rows(&lin.weight, 1, &columns)?;
        }
        _ => return Err(Error::NoConsumer { unit }),
    }
    out.validate().map_err(|e| e.at_unit(unit))?;
    Ok(out)
}

/// Pruning decision and correction settings for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPlan {
    pub unit: usize,
    pub keep_mask: Vec<bool>,
    pub original: usize,
    pub kept: usize,
    pub use_lambda: bool,
    pub var_coeff: f64,
}

impl UnitPlan {
    pub fn new(unit: usize, keep_mask: Vec<bool>, use_lambda: bool, var_coeff: f64) -> Self {
        let kept = keep_mask.iter().filter(|&&k| k).count();
        UnitPlan {
            unit,
            original: keep_mask.len(),
            kept,
            keep_mask,
            use_lambda,
            var_coeff,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub units: Vec<UnitPlan>,
}

/// Whether the unit's consumer is followed by a batch norm that
/// [`distribution_optimize`] can rewrite.
pub fn has_adjustable_consumer(graph: &ModelGraph, unit: usize) -> Result<bool> {
    let info = graph.validate()?;
    Ok(matches!(info.unit(unit)?.consumer, Some(c) if c.bn.is_some()))
}

/// Rewrite the consumer batch norm's running statistics after `unit` was
/// pruned per `plan`: the mean becomes the analytic estimate over the
/// surviving channels divided by λ, the variance is scaled by
/// `var_coeff * kept / original`. `graph` must already be pruned.
pub fn distribution_optimize(
    graph: &ModelGraph,
    unit: usize,
    plan: &UnitPlan,
    lambda: Option<&LambdaTable>,
) -> Result<ModelGraph> {
    let info = graph.validate()?;
    let u = info.unit(unit)?;
    let consumer = u.consumer.ok_or(Error::NoConsumer { unit })?;
    let bn_layer = consumer.bn.ok_or_else(|| Error::UnsupportedStructure {
        unit,
        msg: "consumer has no batch norm to adjust".into(),
    })?;
    let width = graph.batch_norm(u.bn)?.channels();
    if width != plan.kept {
        return Err(Error::Domain(format!(
            "unit {unit} has {width} channels but the plan keeps {}",
            plan.kept
        )));
    }
    let lambdas = if plan.use_lambda {
        Some(
            lambda
                .ok_or_else(|| Error::Calibration("λ correction requested without a table".into()))?
                .unit(unit)?,
        )
    } else {
        None
    };
    if plan.kept == plan.original {
        return Ok(graph.clone());
    }
    let est = estimate_with(graph, &info, unit, &vec![true; width], Activation::PostRelu)?;
    let var_scale = (plan.var_coeff * plan.kept as f64 / plan.original as f64) as f32;
    let mut out = graph.clone();
    let bn = out.batch_norm_mut(bn_layer)?;
    if let Some(ls) = lambdas {
        if ls.len() != bn.channels() {
            return Err(Error::Calibration(format!(
                "λ table has {} channels, consumer has {}",
                ls.len(),
                bn.channels()
            )));
        }
    }
    for (j, &estimate) in est.next_means.iter().enumerate() {
        match lambdas {
            Some(ls) => {
                if let Some(l) = ls[j] {
                    bn.running_mean[j] = (estimate / l) as f32;
                }
            }
            None => bn.running_mean[j] = estimate as f32,
        }
        bn.running_var[j] *= var_scale;
    }
    Ok(out)
}
