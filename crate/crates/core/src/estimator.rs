//! Analytic post-ReLU expectations and pruning-induced mean shifts, computed
//! from batch-norm parameters and consumer weights alone.
//!
//! A unit's post-BN activation on channel `k` is modeled as `N(beta_k,
//! gamma_k^2)`, so its post-ReLU mean is the rectified Gaussian mean. The
//! consumer's input mean on channel `j` is the weighted sum of those means
//! over the surviving source channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{downstream_weights_with, GraphInfo, Layer, Matrix, ModelGraph};
use crate::infer::EmpiricalStats;

/// Empirical means below this magnitude get no λ correction.
pub const LAMBDA_EPS: f64 = 1e-6;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `E[max(0, Y)]` for `Y ~ N(mean, std^2)`: `mean * Phi(mean/std) + std * phi(mean/std)`.
pub fn relu_gauss_mean(mean: f64, std: f64) -> Result<f64> {
    if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::Domain(format!(
            "rectified Gaussian mean needs finite mean and std > 0, got ({mean}, {std})"
        )));
    }
    let z = mean / std;
    Ok((mean * std_normal_cdf(z) + std * std_normal_pdf(z)).max(0.0))
}

/// Which post-BN quantity drives the per-channel activation mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Post-ReLU mean of N(beta, gamma^2).
    #[default]
    PostRelu,
    /// Post-BN mean, i.e. beta itself.
    PostBn,
}

/// Analytic post-ReLU means of a unit's output channels.
///
/// A negative gamma flips the sign of the normalized activation but not its
/// spread, so `|gamma|` is the std; a zero gamma leaves the constant `beta`.
pub fn unit_relu_means(graph: &ModelGraph, info: &GraphInfo, unit: usize) -> Result<Vec<f64>> {
    let bn = graph.batch_norm(info.unit(unit)?.bn)?;
    bn.gamma
        .iter()
        .zip(&bn.beta)
        .map(|(&g, &b)| {
            let (g, b) = (g as f64, b as f64);
            if g == 0.0 {
                Ok(b.max(0.0))
            } else {
                relu_gauss_mean(b, g.abs())
            }
        })
        .collect()
}

/// Analytic estimate for one unit and keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub unit: usize,
    /// Post-ReLU mean per source channel (all channels, kept or not).
    pub relu_means: Vec<f64>,
    /// Consumer input mean per consumer channel, summed over kept sources.
    pub next_means: Vec<f64>,
}

fn consumer_bias(graph: &ModelGraph, layer: usize) -> Option<&[f32]> {
    match &graph.layers[layer] {
        Layer::Conv2d(c) => c.bias.as_deref(),
        Layer::Linear(l) => l.bias.as_deref(),
        _ => None,
    }
}

pub(crate) fn check_mask(mask: &[bool], channels: usize) -> Result<()> {
    if mask.len() != channels {
        return Err(Error::Domain(format!(
            "mask has {} entries for {channels} channels",
            mask.len()
        )));
    }
    if !mask.iter().any(|&k| k) {
        return Err(Error::Domain("mask keeps no channel".into()));
    }
    Ok(())
}

/// Estimate the consumer input means of `unit` when only the channels with
/// `keep_mask[k] == true` survive.
pub fn estimate_layer_means(
    graph: &ModelGraph,
    unit: usize,
    keep_mask: &[bool],
) -> Result<ChannelEstimate> {
    let info = graph.validate()?;
    estimate_with(graph, &info, unit, keep_mask, Activation::PostRelu)
}

pub(crate) fn estimate_with(
    graph: &ModelGraph,
    info: &GraphInfo,
    unit: usize,
    keep_mask: &[bool],
    activation: Activation,
) -> Result<ChannelEstimate> {
    let weights = downstream_weights_with(graph, info, unit)?;
    check_mask(keep_mask, weights.cols)?;
    let relu_means = match activation {
        Activation::PostRelu => unit_relu_means(graph, info, unit)?,
        Activation::PostBn => graph
            .batch_norm(info.units[unit].bn)?
            .beta
            .iter()
            .map(|&b| b as f64)
            .collect(),
    };
    let consumer = info.units[unit].consumer.expect("weights imply a consumer");
    let bias = consumer_bias(graph, consumer.layer);
    let next_means = weighted_sums(&weights, &relu_means, keep_mask, bias);
    Ok(ChannelEstimate {
        unit,
        relu_means,
        next_means,
    })
}

fn weighted_sums(w: &Matrix, means: &[f64], mask: &[bool], bias: Option<&[f32]>) -> Vec<f64> {
    (0..w.rows)
        .map(|j| {
            let s: f64 = w
                .row(j)
                .iter()
                .zip(means)
                .zip(mask)
                .filter(|(_, &keep)| keep)
                .map(|((wjk, m), _)| wjk * m)
                .sum();
            s + bias.map_or(0.0, |b| b[j] as f64)
        })
        .collect()
}

/// Per-channel λ = analytic / empirical consumer input mean, or `None`
/// where the empirical mean is too small to divide by.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTable {
    /// Indexed by unit; empty for units without a consumer.
    pub units: Vec<Vec<Option<f64>>>,
}

impl LambdaTable {
    pub fn unit(&self, unit: usize) -> Result<&[Option<f64>]> {
        match self.units.get(unit) {
            Some(l) if !l.is_empty() => Ok(l),
            _ => Err(Error::Calibration(format!("no λ calibrated for unit {unit}"))),
        }
    }

    /// `value / λ`, or `value` unchanged for no-correction channels.
    pub fn correct(lambda: Option<f64>, value: f64) -> f64 {
        match lambda {
            Some(l) => value / l,
            None => value,
        }
    }
}

/// Calibrate λ for every unit with a consumer, from statistics collected on
/// the unpruned graph.
pub fn calibrate_lambda(graph: &ModelGraph, stats: &EmpiricalStats) -> Result<LambdaTable> {
    let info = graph.validate()?;
    let mut units = Vec::with_capacity(info.units.len());
    for (u, unit) in info.units.iter().enumerate() {
        let consumer = match unit.consumer {
            Some(c) if !c.is_output => c,
            _ => {
                units.push(Vec::new());
                continue;
            }
        };
        let full = vec![true; graph.batch_norm(unit.bn)?.channels()];
        let est = estimate_with(graph, &info, u, &full, Activation::PostRelu)?;
        let empirical = stats
            .layer(consumer.layer)
            .map_err(|e| Error::Calibration(format!("unit {u}: {e}")))?;
        if empirical.len() != est.next_means.len() {
            return Err(Error::Calibration(format!(
                "unit {u}: statistics cover {} consumer channels, graph has {}",
                empirical.len(),
                est.next_means.len()
            )));
        }
        units.push(
            est.next_means
                .iter()
                .zip(empirical)
                .map(|(&a, e)| (e.mean.abs() >= LAMBDA_EPS).then(|| a / e.mean))
                .collect(),
        );
    }
    Ok(LambdaTable { units })
}

/// Consumer-side shift implied by a keep mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftEstimate {
    /// Corrected full-mask minus corrected masked estimate, per consumer channel.
    pub delta: Vec<f64>,
    /// Std factor sqrt(Var_hat / Var) under the d_hat/d variance rule.
    pub std_factor: f64,
    /// Sum of |delta|.
    pub total: f64,
}

pub fn shift_of_plan(
    graph: &ModelGraph,
    unit: usize,
    keep_mask: &[bool],
    lambda: Option<&LambdaTable>,
) -> Result<ShiftEstimate> {
    let info = graph.validate()?;
    let full = vec![true; keep_mask.len()];
    let base = estimate_with(graph, &info, unit, &full, Activation::PostRelu)?;
    let masked = estimate_with(graph, &info, unit, keep_mask, Activation::PostRelu)?;
    let lambdas = lambda.map(|t| t.unit(unit)).transpose()?;
    let delta: Vec<f64> = base
        .next_means
        .iter()
        .zip(&masked.next_means)
        .enumerate()
        .map(|(j, (&b, &m))| {
            let l = lambdas.and_then(|ls| ls[j]);
            LambdaTable::correct(l, b) - LambdaTable::correct(l, m)
        })
        .collect();
    let kept = keep_mask.iter().filter(|&&k| k).count();
    Ok(ShiftEstimate {
        total: delta.iter().map(|d| d.abs()).sum(),
        delta,
        std_factor: (kept as f64 / keep_mask.len() as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNorm, Conv2d, Layer, Linear};
    use crate::tensor::{Moments, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_normal_rectified_mean() {
        // E[max(0, N(0,1))] = 1/sqrt(2 pi); Monte Carlo agrees to ~1e-4.
        let v = relu_gauss_mean(0.0, 1.0).unwrap();
        assert!((v - 0.398942).abs() < 1e-4);
    }

    #[test]
    fn saturation_limits() {
        assert!((relu_gauss_mean(5.0, 0.1).unwrap() - 5.0).abs() < 1e-6);
        assert!(relu_gauss_mean(-8.0, 0.5).unwrap().abs() < 1e-6);
    }

    #[test]
    fn bad_std_is_domain_error() {
        assert!(matches!(relu_gauss_mean(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(relu_gauss_mean(0.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn monotone_and_bounded_on_grid() {
        for gi in 1..=20 {
            let g = gi as f64 * 0.1;
            let mut prev = -1.0;
            for bi in -40..=40 {
                let b = bi as f64 * 0.1;
                let v = relu_gauss_mean(b, g).unwrap();
                assert!(v >= prev, "not increasing in beta at ({b}, {g})");
                assert!(v >= b.max(0.0) - 1e-12 && v <= b.abs() + g + 1e-12);
                prev = v;
                if b < 0.0 {
                    assert!(relu_gauss_mean(b, g + 0.05).unwrap() >= v);
                }
            }
        }
    }

    /// Unit 0 (2 channels, hand-set BN) feeding a 1x1 conv with bias.
    fn two_channel_graph(gamma: [f32; 2], beta: [f32; 2], w: [f32; 6]) -> ModelGraph {
        ModelGraph::new(
            [1, 3, 3],
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Tensor::new(&[2, 1, 1, 1], 1.0).unwrap(),
                    bias: None,
                    stride: 1,
                    padding: 0,
                }),
                Layer::BatchNorm(BatchNorm {
                    gamma: gamma.to_vec(),
                    beta: beta.to_vec(),
                    running_mean: vec![0.0; 2],
                    running_var: vec![1.0; 2],
                    eps: 1e-5,
                }),
                Layer::Relu,
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_vec(&[3, 2, 1, 1], w.to_vec()).unwrap(),
                    bias: Some(vec![0.5, 0.0, -1.0]),
                    stride: 1,
                    padding: 0,
                }),
                Layer::BatchNorm(BatchNorm::identity(3)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::new(&[2, 27], 0.1).unwrap(),
                    bias: None,
                }),
            ],
        )
    }

    #[test]
    fn hand_evaluated_weighted_sum() {
        let g = two_channel_graph([1.0, 2.0], [0.0, 1.0], [1.0, -2.0, 0.5, 0.25, 0.0, 3.0]);
        let est = estimate_layer_means(&g, 0, &[true, true]).unwrap();
        // Rectified means: phi(0) = 0.398942..., and 1*Phi(0.5) + 2*phi(0.5).
        let m0 = 0.398_942_280_401_432_7;
        let m1 = 0.691_462_461_274_013_1 + 2.0 * 0.352_065_326_764_299_5;
        assert!((est.relu_means[0] - m0).abs() < 1e-12);
        assert!((est.relu_means[1] - m1).abs() < 1e-12);
        let expect = [0.5 + m0 - 2.0 * m1, 0.5 * m0 + 0.25 * m1, 3.0 * m1 - 1.0];
        for (a, b) in est.next_means.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_channel_contributes_nothing() {
        let g = two_channel_graph([1.0, 0.5], [0.3, -8.0], [1.0, -2.0, 0.5, 0.25, 0.0, 3.0]);
        let full = estimate_layer_means(&g, 0, &[true, true]).unwrap();
        let masked = estimate_layer_means(&g, 0, &[true, false]).unwrap();
        for (a, b) in full.next_means.iter().zip(&masked.next_means) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_domain_error() {
        let g = two_channel_graph([1.0, 1.0], [0.0, 0.0], [1.0; 6]);
        assert!(matches!(
            estimate_layer_means(&g, 0, &[false, false]),
            Err(Error::Domain(_))
        ));
    }

    fn stats_with_consumer_means(g: &ModelGraph, means: &[f64]) -> EmpiricalStats {
        let mut layer_outputs = vec![None; g.layers.len()];
        layer_outputs[3] = Some(
            means
                .iter()
                .map(|&mean| Moments {
                    count: 9,
                    mean,
                    m2: 1.0,
                })
                .collect(),
        );
        EmpiricalStats {
            layer_outputs,
            post_relu: vec![vec![], vec![]],
            samples: 1,
        }
    }

    #[test]
    fn lambda_ratio_definitions() {
        let g = two_channel_graph([1.0, 2.0], [0.0, 1.0], [1.0, -2.0, 0.5, 0.25, 0.0, 3.0]);
        let est = estimate_layer_means(&g, 0, &[true, true]).unwrap();
        let exact = calibrate_lambda(&g, &stats_with_consumer_means(&g, &est.next_means)).unwrap();
        for l in exact.unit(0).unwrap() {
            assert!((l.unwrap() - 1.0).abs() < 1e-12);
        }
        let doubled: Vec<f64> = est.next_means.iter().map(|m| 2.0 * m).collect();
        let half = calibrate_lambda(&g, &stats_with_consumer_means(&g, &doubled)).unwrap();
        for l in half.unit(0).unwrap() {
            assert!((l.unwrap() - 0.5).abs() < 1e-12);
        }
        // Corrected estimate reproduces the empirical mean.
        for (j, l) in half.unit(0).unwrap().iter().enumerate() {
            assert!((LambdaTable::correct(*l, est.next_means[j]) - doubled[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn near_zero_empirical_mean_is_flagged() {
        let g = two_channel_graph([1.0, 2.0], [0.0, 1.0], [1.0; 6]);
        let t = calibrate_lambda(&g, &stats_with_consumer_means(&g, &[1.0, 5e-7, -2.0])).unwrap();
        let l = t.unit(0).unwrap();
        assert!(l[0].is_some() && l[1].is_none() && l[2].is_some());
        assert!(t.unit(1).is_err());
    }

    #[test]
    fn missing_layer_stats_is_calibration_error() {
        let g = two_channel_graph([1.0, 2.0], [0.0, 1.0], [1.0; 6]);
        let mut s = stats_with_consumer_means(&g, &[1.0, 1.0, 1.0]);
        s.layer_outputs[3] = None;
        assert!(matches!(calibrate_lambda(&g, &s), Err(Error::Calibration(_))));
    }

    fn random_graph(seed: u64, d: usize) -> ModelGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma: Vec<f32> = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
        let beta: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f32> = (0..4 * d * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        ModelGraph::new(
            [1, 4, 4],
            vec![
                Layer::Conv2d(Conv2d {
                    weight: Tensor::new(&[d, 1, 1, 1], 1.0).unwrap(),
                    bias: None,
                    stride: 1,
                    padding: 0,
                }),
                Layer::BatchNorm(BatchNorm {
                    gamma,
                    beta,
                    running_mean: vec![0.0; d],
                    running_var: vec![1.0; d],
                    eps: 1e-5,
                }),
                Layer::Relu,
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_vec(&[4, d, 3, 3], w).unwrap(),
                    bias: None,
                    stride: 1,
                    padding: 1,
                }),
                Layer::BatchNorm(BatchNorm::identity(4)),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::new(&[2, 64], 0.1).unwrap(),
                    bias: None,
                }),
            ],
        )
    }

    #[test]
    fn full_mask_has_no_shift() {
        let g = random_graph(1, 6);
        let s = shift_of_plan(&g, 0, &[true; 6], None).unwrap();
        assert_eq!(s.total, 0.0);
        assert_eq!(s.std_factor, 1.0);
    }

    #[test]
    fn single_survivor_shift_by_hand() {
        let g = random_graph(2, 5);
        let mut mask = [false; 5];
        mask[2] = true;
        let s = shift_of_plan(&g, 0, &mask, None).unwrap();
        let w = crate::graph::downstream_weights(&g, 0).unwrap();
        let info = g.validate().unwrap();
        let m = unit_relu_means(&g, &info, 0).unwrap();
        let mut expect = 0.0;
        for j in 0..4 {
            let dropped: f64 = (0..5).filter(|&k| k != 2).map(|k| w.get(j, k) * m[k]).sum();
            expect += dropped.abs();
        }
        assert!((s.total - expect).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shifts_of_disjoint_drops_add(seed in any::<u64>(), a in 0usize..6, b in 0usize..6) {
                prop_assume!(a != b);
                let g = random_graph(seed, 6);
                let drop = |set: &[usize]| {
                    let mask: Vec<bool> = (0..6).map(|k| !set.contains(&k)).collect();
                    shift_of_plan(&g, 0, &mask, None).unwrap().delta
                };
                let (da, db, dab) = (drop(&[a]), drop(&[b]), drop(&[a, b]));
                for j in 0..4 {
                    prop_assert!((da[j] + db[j] - dab[j]).abs() < 1e-10);
                }
            }

            #[test]
            fn rectified_mean_bounds(b in -3.0f64..3.0, g in 1e-3f64..2.0) {
                let v = relu_gauss_mean(b, g).unwrap();
                prop_assert!(v >= b.max(0.0) - 1e-12);
                prop_assert!(v <= b.abs() + g + 1e-12);
            }
        }
    }
}
