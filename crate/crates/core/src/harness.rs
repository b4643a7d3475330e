//! The end-to-end procedures behind the command-line tool: sequential
//! pruning with fine-tuning, per-unit accuracy sweeps and estimator
//! fidelity reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{calibrate_lambda, estimate_layer_means, shift_of_plan, LambdaTable};
use crate::graph::{count_cost, CostReport, ModelGraph};
use crate::infer::{collect_stats, evaluate, EVAL_BATCH};
use crate::io::RateConfig;
use crate::pruner::{
    apply_prune, distribution_optimize, has_adjustable_consumer, score_l1, score_random,
    score_unit, select_channels, Order, PrunePlan, ScoreReport, UnitPlan,
};
use crate::train::finetune_layer;

/// How channels are ranked for removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Drop the smallest feature-shift scores first.
    Fsm,
    /// Drop the largest feature-shift scores first.
    FsmR,
    Random,
    L1,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Fsm => "fsm",
            Strategy::FsmR => "fsm-r",
            Strategy::Random => "random",
            Strategy::L1 => "l1",
        }
    }

    pub const ALL: [Strategy; 4] = [Strategy::Fsm, Strategy::FsmR, Strategy::Random, Strategy::L1];
}

/// Score `unit` and choose its keep mask at `rate`.
pub fn choose_mask(
    graph: &ModelGraph,
    unit: usize,
    rate: f64,
    method: Strategy,
    seed: u64,
) -> Result<(ScoreReport, Vec<bool>)> {
    let (report, order) = match method {
        Strategy::Fsm => (score_unit(graph, unit)?, Order::Ascending),
        Strategy::FsmR => (score_unit(graph, unit)?, Order::Reverse),
        Strategy::Random => (score_random(graph, unit, seed)?, Order::Ascending),
        Strategy::L1 => (score_l1(graph, unit)?, Order::Ascending),
    };
    let mask = select_channels(&report, rate, order)?;
    Ok((report, mask))
}

fn calibrate(graph: &ModelGraph, data: &Dataset, max_batches: Option<usize>) -> Result<LambdaTable> {
    let stats = collect_stats(graph, data, EVAL_BATCH, max_batches)?;
    calibrate_lambda(graph, &stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptions {
    pub method: Strategy,
    pub distribution_opt: bool,
    /// Overrides the config's λ flag.
    pub lambda: Option<bool>,
    /// Overrides the config's variance coefficient.
    pub var_coeff: Option<f64>,
    /// Overrides the config's per-unit fine-tune epochs.
    pub finetune_epochs: Option<usize>,
    /// Overrides the config's final retrain epochs.
    pub final_epochs: Option<usize>,
    /// Overrides the config's seed.
    pub seed: Option<u64>,
    /// Caps the batches used for λ calibration.
    pub max_batches: Option<usize>,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            method: Strategy::Fsm,
            distribution_opt: true,
            lambda: None,
            var_coeff: None,
            finetune_epochs: None,
            final_epochs: None,
            seed: None,
            max_batches: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitSummary {
    pub unit: usize,
    pub rate: f64,
    pub original: usize,
    pub kept: usize,
    /// Test accuracy right after pruning (and correction), before fine-tuning.
    pub accuracy_pruned: f64,
    /// Test accuracy after this unit's fine-tuning.
    pub accuracy_finetuned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneSummary {
    pub method: Strategy,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_reduction: f64,
    pub params_reduction: f64,
    pub units: Vec<UnitSummary>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub graph: ModelGraph,
    pub plan: PrunePlan,
    pub summary: PruneSummary,
}

/// Prune every unit with a positive rate, in index order: calibrate λ,
/// score, select, remove, correct the consumer statistics, fine-tune. Then
/// retrain for the configured final epochs.
pub fn prune_model(
    graph: &ModelGraph,
    cfg: &RateConfig,
    train: &Dataset,
    test: &Dataset,
    opts: &PruneOptions,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let info = graph.validate()?;
    for &unit in cfg.rates.keys() {
        info.unit(unit)?;
    }
    let use_lambda = opts.lambda.unwrap_or(cfg.lambda);
    let var_coeff = opts.var_coeff.unwrap_or(cfg.var_coeff);
    let finetune_epochs = opts.finetune_epochs.unwrap_or(cfg.finetune_epochs);
    let final_epochs = opts.final_epochs.unwrap_or(cfg.final_epochs);
    let seed = opts.seed.unwrap_or(cfg.seed);
    let shape = graph.input_shape(1);
    let cost_before = count_cost(graph, shape)?;
    let accuracy_before = evaluate(graph, test)?;

    let mut current = graph.clone();
    let mut plan = PrunePlan::default();
    let mut units = Vec::new();
    for (&unit, &rate) in &cfg.rates {
        if rate == 0.0 {
            continue;
        }
        let step = |current: &ModelGraph| -> Result<(ModelGraph, UnitPlan, UnitSummary)> {
            let lambda = if use_lambda && opts.distribution_opt {
                Some(calibrate(current, train, opts.max_batches)?)
            } else {
                None
            };
            let unit_seed = seed.wrapping_add(unit as u64);
            let (_, mask) = choose_mask(current, unit, rate, opts.method, unit_seed)?;
            let unit_plan = UnitPlan::new(unit, mask, use_lambda, var_coeff);
            let mut next = apply_prune(current, unit, &unit_plan.keep_mask)?;
            if opts.distribution_opt && has_adjustable_consumer(&next, unit)? {
                next = distribution_optimize(&next, unit, &unit_plan, lambda.as_ref())?;
            }
            let accuracy_pruned = evaluate(&next, test)?;
            let train_cfg = crate::train::TrainConfig {
                seed: unit_seed,
                ..cfg.train.clone()
            };
            next = finetune_layer(&next, train, finetune_epochs, &train_cfg)?;
            let summary = UnitSummary {
                unit,
                rate,
                original: unit_plan.original,
                kept: unit_plan.kept,
                accuracy_pruned,
                accuracy_finetuned: evaluate(&next, test)?,
            };
            Ok((next, unit_plan, summary))
        };
        let (next, unit_plan, summary) = step(&current).map_err(|e| e.at_unit(unit))?;
        current = next;
        plan.units.push(unit_plan);
        units.push(summary);
    }
    if final_epochs > 0 {
        let train_cfg = crate::train::TrainConfig {
            seed: seed.wrapping_add(1 << 32),
            ..cfg.train.clone()
        };
        current = finetune_layer(&current, train, final_epochs, &train_cfg)?;
    }
    let cost_after = count_cost(&current, shape)?;
    let (flops_reduction, params_reduction) = cost_after.reduction_from(&cost_before);
    let summary = PruneSummary {
        method: opts.method,
        accuracy_before,
        accuracy_after: evaluate(&current, test)?,
        flops_before: cost_before.flops,
        flops_after: cost_after.flops,
        params_before: cost_before.params,
        params_after: cost_after.params,
        flops_reduction,
        params_reduction,
        units,
    };
    Ok(PruneOutcome {
        graph: current,
        plan,
        summary,
    })
}

/// One point of a single-unit accuracy-versus-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub unit: usize,
    pub rate: f64,
    pub method: String,
    pub r#do: String,
    pub lambda: String,
    pub var_coeff: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub shift_sum: f64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveOptions {
    /// Units to sweep; empty means every prunable unit.
    pub units: Vec<usize>,
    pub rates: Vec<f64>,
    pub methods: Vec<Strategy>,
    pub lambda: bool,
    /// Variance coefficients to sweep for the corrected rows.
    pub var_coeffs: Vec<f64>,
    pub seed: u64,
    pub max_batches: Option<usize>,
}

fn on_off(flag: bool) -> String {
    if flag { "on" } else { "off" }.to_string()
}

/// Prune each unit alone from the pristine graph at every (rate, method,
/// variance coefficient), with and without the statistics correction, and
/// evaluate without fine-tuning. Rows come out sorted in that key order.
pub fn accuracy_curve(
    graph: &ModelGraph,
    calib: &Dataset,
    test: &Dataset,
    opts: &CurveOptions,
) -> Result<Vec<CurveRecord>> {
    let info = graph.validate()?;
    let mut units = if opts.units.is_empty() {
        info.prunable_units()
    } else {
        opts.units.clone()
    };
    units.sort_unstable();
    units.dedup();
    let mut rates = opts.rates.clone();
    for &r in &rates {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("rate {r} outside [0, 1)")));
        }
    }
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut coeffs = opts.var_coeffs.clone();
    if coeffs.is_empty() || coeffs.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::Config(format!("variance coefficients {coeffs:?} must be positive")));
    }
    coeffs.sort_by(f64::total_cmp);
    coeffs.dedup();
    let mut methods = opts.methods.clone();
    methods.sort();
    methods.dedup();
    let lambda = if opts.lambda {
        Some(calibrate(graph, calib, opts.max_batches)?)
    } else {
        None
    };
    let shape = graph.input_shape(1);
    let mut rows = Vec::new();
    for &unit in &units {
        let mut sweep = || -> Result<()> {
            for &rate in &rates {
                for &method in &methods {
                    let (_, mask) = choose_mask(graph, unit, rate, method, opts.seed)?;
                    let shift = shift_of_plan(graph, unit, &mask, lambda.as_ref())?;
                    let pruned = apply_prune(graph, unit, &mask)?;
                    let cost = count_cost(&pruned, shape)?;
                    let uncorrected = evaluate(&pruned, test)?;
                    let adjustable = has_adjustable_consumer(&pruned, unit)?;
                    for &var_coeff in &coeffs {
                        for correct in [false, true] {
                            let accuracy = if correct && adjustable {
                                let plan = UnitPlan::new(unit, mask.clone(), opts.lambda, var_coeff);
                                evaluate(&distribution_optimize(&pruned, unit, &plan, lambda.as_ref())?, test)?
                            } else {
                                uncorrected
                            };
                            rows.push(CurveRecord {
                                unit,
                                rate,
                                method: method.tag().into(),
                                r#do: on_off(correct),
                                lambda: on_off(opts.lambda),
                                var_coeff,
                                seed: opts.seed,
                                accuracy,
                                shift_sum: shift.total,
                                flops: cost.flops,
                                params: cost.params,
                            });
                        }
                    }
                }
            }
            Ok(())
        };
        sweep().map_err(|e| e.at_unit(unit))?;
    }
    Ok(rows)
}

/// Analytic versus empirical mean of one consumer channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub unit: usize,
    pub channel: usize,
    pub empirical: f64,
    pub analytic: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitFidelity {
    pub unit: usize,
    pub channels: usize,
    /// Rank correlation of analytic and empirical means; absent when either
    /// side is constant.
    pub spearman: Option<f64>,
    pub mean_rel_error: f64,
}

/// Ranks with ties sharing their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// For every unit feeding a hidden layer, compare the analytic full-mask
/// estimate of the consumer's output means with the measured ones.
pub fn estimator_fidelity(
    graph: &ModelGraph,
    data: &Dataset,
    max_batches: Option<usize>,
) -> Result<(Vec<FidelityRow>, Vec<UnitFidelity>)> {
    let info = graph.validate()?;
    let stats = collect_stats(graph, data, EVAL_BATCH, max_batches)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (u, unit) in info.units.iter().enumerate() {
        let consumer = match unit.consumer {
            Some(c) if !c.is_output => c,
            _ => continue,
        };
        let mut run = || -> Result<()> {
            let full = vec![true; graph.batch_norm(unit.bn)?.channels()];
            let est = estimate_layer_means(graph, u, &full)?;
            let empirical: Vec<f64> = stats.layer(consumer.layer)?.iter().map(|m| m.mean).collect();
            let mut rel_sum = 0.0;
            for (j, (&e, &a)) in empirical.iter().zip(&est.next_means).enumerate() {
                let rel_error = (a - e).abs() / e.abs().max(1e-12);
                rel_sum += rel_error;
                rows.push(FidelityRow {
                    unit: u,
                    channel: j,
                    empirical: e,
                    analytic: a,
                    rel_error,
                });
            }
            summary.push(UnitFidelity {
                unit: u,
                channels: empirical.len(),
                spearman: spearman(&est.next_means, &empirical),
                mean_rel_error: rel_sum / empirical.len() as f64,
            });
            Ok(())
        };
        run().map_err(|e| e.at_unit(u))?;
    }
    Ok((rows, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
    pub flops: u64,
    pub params: u64,
}

pub fn eval_report(graph: &ModelGraph, test: &Dataset) -> Result<(EvalReport, CostReport)> {
    let cost = count_cost(graph, graph.input_shape(1))?;
    Ok((
        EvalReport {
            accuracy: evaluate(graph, test)?,
            samples: test.len(),
            flops: cost.flops,
            params: cost.params,
        },
        cost,
    ))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV text of `rows`, for writing to stdout.
pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Stats(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
