use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedpmt::convex::{compare_full_vs_partial, ComparisonConfig, QuadraticTaskConfig};
use fedpmt::masking::build_width_menu;
use fedpmt::nn::ModelSpec;
use fedpmt::sim::{cost_report, run_experiment, summarize, write_outputs, CostReport, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedpmt", version, about = "Partial model training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment from a TOML config.
    Run(RunArgs),
    /// Print per-width FLOP totals, ratios and matched dropout rates.
    Cost(CostArgs),
    /// Check the convergence rate on a strongly convex task.
    ConvexLab(ConvexArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Report the model and menu of this experiment instead of the built-in architectures.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    batch: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ConvexArgs {
    /// First seed; `--seeds` consecutive seeds are run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 10_000)]
    rounds: usize,
    #[arg(long, default_value_t = 5)]
    devices: usize,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    /// Width per device in the partial runs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,2,3,3")]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    heterogeneity: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    local_steps: usize,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Cost(a) => cost(a),
        Command::ConvexLab(a) => convex_lab(a),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = run_experiment(&cfg)?;
    write_outputs(&args.out_dir, &cfg, &out)?;
    let s = summarize(&cfg, &out);
    println!(
        "{} rounds, {:.3} s simulated, final accuracy {}",
        s.rounds,
        s.total_seconds,
        s.final_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"))
    );
    for t in &s.time_to_accuracy {
        match t.seconds {
            Some(sec) => println!("  target {:.4}: {sec:.3} s", t.target),
            None => println!("  target {:.4}: not reached", t.target),
        }
    }
    println!("outputs in {}", args.out_dir.display());
    Ok(())
}

fn cost(args: CostArgs) -> Result<()> {
    let reports = match &args.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path)?;
            let (train, _) = fedpmt::sim::load_data(&cfg)?;
            let spec = cfg.build_model(train.sample_shape(), train.classes())?;
            let menu = build_width_menu(
                spec.trainable_count(),
                cfg.strategy.widths,
                cfg.strategy.layer_counts.as_deref(),
            )?;
            let name = cfg.name.clone().unwrap_or_else(|| "model".into());
            vec![cost_report(&name, &spec, cfg.training.batch_size, &menu, None)?]
        }
        None => {
            let fcnn = ModelSpec::fcnn_mnist();
            let cnn = ModelSpec::cnn_cifar10();
            vec![
                cost_report(
                    "FCNN-MNIST",
                    &fcnn,
                    args.batch,
                    &build_width_menu(fcnn.trainable_count(), 4, None)?,
                    Some(15_305_968),
                )?,
                cost_report(
                    "CNN-CIFAR10",
                    &cnn,
                    args.batch,
                    &build_width_menu(cnn.trainable_count(), 5, None)?,
                    Some(28_068_800),
                )?,
            ]
        }
    };
    let text: String = reports.iter().map(CostReport::to_text).collect::<Vec<_>>().join("\n");
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cost.txt"), &text)?;
        let mut csv = String::new();
        for (i, r) in reports.iter().enumerate() {
            let body = r.to_csv();
            csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
        }
        std::fs::write(dir.join("cost.csv"), csv)?;
    }
    Ok(())
}

fn convex_lab(args: ConvexArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = ComparisonConfig {
        task: QuadraticTaskConfig {
            devices: args.devices,
            dim: args.dim,
            blocks: args.blocks,
            heterogeneity: args.heterogeneity,
            mu: 1.0,
            seed: args.seed,
        },
        widths: args.widths,
        epsilon: args.epsilon,
        local_steps: args.local_steps,
        rounds: args.rounds,
        noise_variance: args.noise,
        fit_window: ((args.rounds / 100).clamp(1, 100), args.rounds),
        seeds: (args.seed..args.seed + args.seeds).collect(),
    };
    let c = compare_full_vs_partial(&cfg)?;
    println!("lambda {:.4}  psi {:.4}", c.lambda, c.psi.proof_form);
    println!("slope of mean gap: full {:.4}  partial {:.4}", c.full_slope, c.partial_slope);
    println!("{:>6} {:>14} {:>14}", "seed", "full gap", "partial gap");
    for p in &c.pairs {
        println!("{:>6} {:>14.6e} {:>14.6e}", p.seed, p.full_gap, p.partial_gap);
    }
    println!(
        "partial ended no closer on {}/{} seeds; {} bound violations",
        c.partial_not_better,
        c.pairs.len(),
        c.bound_violations
    );
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("convex.json"), serde_json::to_string_pretty(&c)? + "\n")?;
    }
    Ok(())
}
