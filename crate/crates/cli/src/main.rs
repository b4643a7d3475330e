use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsm_core::estimator::Activation;
use fsm_core::graph::zoo::{vgg8, VggConfig};
use fsm_core::harness::{
    accuracy_curve, choose_mask, csv_string, estimator_fidelity, eval_report, prune_model,
    write_csv, CurveOptions, PruneOptions, Strategy,
};
use fsm_core::infer::{collect_stats, EVAL_BATCH};
use fsm_core::io::{load_cifar10, load_model, load_rates, save_model, Normalization, RateConfig, Split};
use fsm_core::pruner::score_unit_with;
use fsm_core::synth::{write_synthetic_cifar, SynthConfig};
use fsm_core::train::{train, write_loss_csv, TrainConfig};
use fsm_core::{Dataset, Error, ModelGraph, Result};
use serde_json::json;

/// Channel pruning driven by analytic feature-shift estimates.
#[derive(Parser)]
#[command(name = "fsm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare analytic and measured consumer means per unit.
    Stats(StatsArgs),
    /// Print channel scores and ranking for one unit.
    Score(ScoreArgs),
    /// Prune a model unit by unit with fine-tuning.
    Prune(PruneArgs),
    /// Report test accuracy, FLOPs and parameters.
    Eval(EvalArgs),
    /// Sweep single-unit prune rates and methods into a CSV.
    Curve(CurveArgs),
    /// Train the VGG-8 fixture from scratch.
    Train(TrainArgs),
    /// Write a synthetic dataset in CIFAR-10 binary layout.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Order {
    Fsm,
    Reverse,
    Random,
    L1,
}

impl From<Order> for Strategy {
    fn from(o: Order) -> Self {
        match o {
            Order::Fsm => Strategy::Fsm,
            Order::Reverse => Strategy::FsmR,
            Order::Random => Strategy::Random,
            Order::L1 => Strategy::L1,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding CIFAR-10 binary batches.
    #[arg(long)]
    data: PathBuf,
    /// Use at most this many training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use at most this many test images.
    #[arg(long)]
    test_limit: Option<usize>,
    /// Per-channel normalization mean, e.g. 0.49,0.48,0.45.
    #[arg(long, value_delimiter = ',', requires = "norm_std")]
    norm_mean: Option<Vec<f32>>,
    #[arg(long, value_delimiter = ',', requires = "norm_mean")]
    norm_std: Option<Vec<f32>>,
}

impl DataArgs {
    fn normalization(&self) -> Result<Option<Normalization>> {
        let triple = |v: &Vec<f32>| -> Result<[f32; 3]> {
            v.as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("normalization needs 3 values, got {}", v.len())))
        };
        match (&self.norm_mean, &self.norm_std) {
            (Some(m), Some(s)) => Ok(Some(Normalization {
                mean: triple(m)?,
                std: triple(s)?,
            })),
            _ => Ok(None),
        }
    }

    fn load(&self, split: Split, fallback: Option<&Normalization>) -> Result<Dataset> {
        let norm = self.normalization()?;
        let ds = load_cifar10(&self.data, split, norm.as_ref().or(fallback))?;
        let limit = match split {
            Split::Train => self.train_limit,
            Split::Test => self.test_limit,
        };
        match limit {
            Some(n) => ds.head(n),
            None => Ok(ds),
        }
    }
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Per-channel CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    PostRelu,
    PostBn,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    unit: usize,
    #[arg(long, value_enum, default_value = "fsm")]
    order: Order,
    /// Activation whose mean enters the feature-shift score.
    #[arg(long, value_enum, default_value = "post-relu")]
    activation: ActivationArg,
    /// Take channel means from this dataset's training split instead of
    /// the analytic estimate.
    #[arg(long)]
    empirical: Option<PathBuf>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// TOML pruning schedule.
    #[arg(long)]
    rates: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the pruned archive, plan and summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "fsm")]
    order: Order,
    #[arg(long = "do", value_enum, default_value = "on")]
    distribution_opt: Switch,
    #[arg(long, value_enum)]
    lambda: Option<Switch>,
    #[arg(long)]
    var_coeff: Option<f64>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    final_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Units to sweep; all prunable units when absent.
    #[arg(long, value_delimiter = ',')]
    units: Vec<usize>,
    /// Compression rates to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    grid: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fsm,reverse,random,l1")]
    methods: Vec<Order>,
    #[arg(long, value_enum, default_value = "on")]
    lambda: Switch,
    /// Variance coefficients for the corrected rows.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    var_coeff: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_batches: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the trained archive.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "8,8,16,16,32,32")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Epochs at which the learning rate drops tenfold.
    #[arg(long, value_delimiter = ',')]
    lr_steps: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-step loss curve here.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 2_000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stats(a: StatsArgs) -> Result<()> {
    let graph = load_model(&a.model)?;
    let data = a.data.load(Split::Train, None)?;
    let (rows, summary) = estimator_fidelity(&graph, &data, a.max_batches)?;
    match &a.out {
        Some(path) => write_csv(path, &rows)?,
        None if !a.json => print!("{}", csv_string(&rows)?),
        None => {}
    }
    if a.json {
        print_json(&json!({ "units": summary }))?;
    } else {
        for s in &summary {
            let rho = s.spearman.map_or("n/a".to_string(), |r| format!("{r:.4}"));
            eprintln!(
                "unit {}: {} channels, spearman {rho}, mean relative error {:.4}",
                s.unit, s.channels, s.mean_rel_error
            );
        }
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let graph = load_model(&a.model)?;
    let activation = match a.activation {
        ActivationArg::PostRelu => Activation::PostRelu,
        ActivationArg::PostBn => Activation::PostBn,
    };
    let feature_shift = matches!(a.order, Order::Fsm | Order::Reverse);
    let report = if feature_shift && (a.empirical.is_some() || activation != Activation::PostRelu) {
        let stats = match &a.empirical {
            Some(dir) => {
                let data = load_cifar10(dir, Split::Train, None)?;
                Some(collect_stats(&graph, &data, EVAL_BATCH, a.max_batches)?)
            }
            None => None,
        };
        score_unit_with(&graph, a.unit, activation, stats.as_ref())?
    } else {
        choose_mask(&graph, a.unit, 0.0, a.order.into(), a.seed)?.0
    };
    if a.json {
        print_json(&serde_json::to_value(&report)?)?;
    } else {
        println!("channel,score,rank");
        let mut rank = vec![0; report.scores.len()];
        for (r, &c) in report.ranking.iter().enumerate() {
            rank[c] = r;
        }
        for (c, s) in report.scores.iter().enumerate() {
            println!("{c},{s},{}", rank[c]);
        }
    }
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    let graph = load_model(&a.model)?;
    let cfg: RateConfig = load_rates(&a.rates)?;
    let train_ds = a.data.load(Split::Train, cfg.normalization.as_ref())?;
    let test_ds = a.data.load(Split::Test, cfg.normalization.as_ref())?;
    let opts = PruneOptions {
        method: a.order.into(),
        distribution_opt: a.distribution_opt.on(),
        lambda: a.lambda.map(Switch::on),
        var_coeff: a.var_coeff,
        finetune_epochs: a.finetune_epochs,
        final_epochs: a.final_epochs,
        seed: a.seed,
        max_batches: a.max_batches,
    };
    let out = prune_model(&graph, &cfg, &train_ds, &test_ds, &opts)?;
    create_dir(&a.out)?;
    save_model(&out.graph, &a.out)?;
    write_json(&a.out.join("plan.json"), &out.plan)?;
    write_json(&a.out.join("summary.json"), &out.summary)?;
    let s = &out.summary;
    if a.json {
        print_json(&serde_json::to_value(s)?)?;
    } else {
        for u in &s.units {
            println!(
                "unit {}: kept {}/{}, accuracy {:.4} after prune, {:.4} after fine-tune",
                u.unit, u.kept, u.original, u.accuracy_pruned, u.accuracy_finetuned
            );
        }
        println!("accuracy {:.4} -> {:.4}", s.accuracy_before, s.accuracy_after);
        println!(
            "flops {} -> {} ({:.2}% reduction), params {} -> {} ({:.2}% reduction)",
            s.flops_before,
            s.flops_after,
            100.0 * s.flops_reduction,
            s.params_before,
            s.params_after,
            100.0 * s.params_reduction
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let graph = load_model(&a.model)?;
    let test = a.data.load(Split::Test, None)?;
    let (report, cost) = eval_report(&graph, &test)?;
    if a.json {
        print_json(&json!({
            "accuracy": report.accuracy,
            "samples": report.samples,
            "flops": report.flops,
            "params": report.params,
            "per_layer": cost.per_layer,
        }))?;
    } else {
        println!("accuracy {:.4} on {} images", report.accuracy, report.samples);
        println!("flops {}", report.flops);
        println!("params {}", report.params);
    }
    Ok(())
}

fn curve(a: CurveArgs) -> Result<()> {
    let graph = load_model(&a.model)?;
    let calib = a.data.load(Split::Train, None)?;
    let test = a.data.load(Split::Test, None)?;
    let opts = CurveOptions {
        units: a.units,
        rates: a.grid,
        methods: a.methods.into_iter().map(Strategy::from).collect(),
        lambda: a.lambda.on(),
        var_coeffs: a.var_coeff,
        seed: a.seed,
        max_batches: a.max_batches,
    };
    let rows = accuracy_curve(&graph, &calib, &test, &opts)?;
    match &a.out {
        Some(path) => write_csv(path, &rows),
        None => {
            print!("{}", csv_string(&rows)?);
            Ok(())
        }
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let train_ds = a.data.load(Split::Train, None)?;
    let test_ds = a.data.load(Split::Test, None)?;
    let vgg = VggConfig {
        widths: a.widths.as_slice().try_into().map_err(|_| {
            Error::Config(format!("--widths needs 6 values, got {}", a.widths.len()))
        })?,
        hidden: a.hidden,
        classes: 10,
        input: train_ds.sample_shape(),
    };
    let init: ModelGraph = vgg8(&vgg, a.seed);
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        lr_steps: a.lr_steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (graph, curve) = train(&init, &train_ds, &cfg)?;
    create_dir(&a.out)?;
    save_model(&graph, &a.out)?;
    if let Some(path) = &a.loss_csv {
        write_loss_csv(path, &curve)?;
    }
    let (report, _) = eval_report(&graph, &test_ds)?;
    if a.json {
        print_json(&json!({
            "accuracy": report.accuracy,
            "final_loss": curve.last().map(|p| p.loss),
            "steps": curve.len(),
            "flops": report.flops,
            "params": report.params,
        }))?;
    } else {
        println!("test accuracy {:.4} after {} steps", report.accuracy, curve.len());
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    write_synthetic_cifar(&a.out, a.train, a.test, a.seed, &SynthConfig::default())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Stats(a) => stats(a),
        Cmd::Score(a) => score(a),
        Cmd::Prune(a) => prune(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Curve(a) => curve(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
