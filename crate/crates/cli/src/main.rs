use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mec_offload::check;
use mec_offload::nn::OptimizerKind;
use mec_offload::harness::{
    emit_csv, emit_sweep_csv, emit_trace, run_with, sweep, Experiment, PolicyKind, RunConfig,
};

#[derive(Parser)]
#[command(name = "mec-offload", version, about = "Edge offloading simulator and learning agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-episode metrics.
    Run(RunArgs),
    /// Repeat an experiment over a list of values of one config key.
    Sweep(SweepArgs),
    /// Run the built-in invariant and oracle checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Metrics CSV to create.
    #[arg(long, short)]
    output: PathBuf,
    /// Replace output files that already exist.
    #[arg(long)]
    overwrite: bool,
    /// Also write a per-slot event trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save one checkpoint per learning device into this directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Numeric config key to vary, e.g. `arrival_probability`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Comma-separated master seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Summary CSV to create, one line per (value, seed).
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Master seed for the randomized checks.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Config file plus one flag per config key; flags win over the file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_devices: Option<usize>,
    #[arg(long)]
    num_edges: Option<usize>,
    #[arg(long)]
    episode_slots: Option<u32>,
    #[arg(long)]
    slot_seconds: Option<f64>,
    #[arg(long)]
    device_ghz: Option<f64>,
    #[arg(long)]
    edge_ghz: Option<f64>,
    #[arg(long)]
    tran_mbps: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    task_sizes_mbits: Option<Vec<f64>>,
    #[arg(long)]
    density_gcycles_per_mbit: Option<f64>,
    #[arg(long)]
    deadline_slots: Option<u32>,
    #[arg(long)]
    arrival_probability: Option<f64>,
    #[arg(long)]
    drop_penalty: Option<f64>,
    #[arg(long)]
    history_slots: Option<usize>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<u64>,
    #[arg(long)]
    eval_epsilon: Option<f64>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    fc1_hidden: Option<usize>,
    #[arg(long)]
    fc2_hidden: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    replace_threshold: Option<u64>,
    #[arg(long)]
    memory_capacity: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long, value_delimiter = ',')]
    device_policies: Option<Vec<PolicyKind>>,
    #[arg(long)]
    seed: Option<u64>,
}

macro_rules! apply {
    ($cfg:ident, $args:ident, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })+
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let args = self;
        apply!(
            cfg,
            args,
            num_devices,
            num_edges,
            episode_slots,
            slot_seconds,
            device_ghz,
            edge_ghz,
            tran_mbps,
            task_sizes_mbits,
            density_gcycles_per_mbit,
            deadline_slots,
            arrival_probability,
            drop_penalty,
            history_slots,
            episodes,
            eval_episodes,
            eval_epsilon,
            lstm_hidden,
            fc1_hidden,
            fc2_hidden,
            head_hidden,
            learning_rate,
            discount,
            batch_size,
            replace_threshold,
            memory_capacity,
            optimizer,
            policy,
            device_policies,
            seed,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        bail!("{} already exists; pass --overwrite to replace it", path.display());
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    // Fail before a long run rather than after it.
    refuse_existing(&args.output, args.overwrite)?;
    if let Some(trace) = &args.trace {
        refuse_existing(trace, args.overwrite)?;
    }

    let mut exp = Experiment::new(&cfg)?;
    if args.trace.is_some() {
        exp.enable_trace();
    }
    let outcome = run_with(&mut exp, &cfg)?;
    emit_csv(&outcome.all_rows(), &args.output, args.overwrite)
        .with_context(|| format!("writing metrics to {}", args.output.display()))?;
    if let Some(trace) = &args.trace {
        emit_trace(&exp.take_trace(), trace, args.overwrite)?;
    }
    if let Some(dir) = &args.checkpoint_dir {
        let written = exp.save_checkpoints(dir)?;
        info!("wrote {} checkpoints to {}", written.len(), dir.display());
    }

    let s = outcome.summary();
    println!(
        "{} episodes ({} evaluated): drop_ratio {:.4}, avg_delay {:.4} s, mean_cost {:.4}, {} train steps in {:.1} s",
        outcome.training.len() + outcome.evaluation.len(),
        s.episodes,
        s.drop_ratio,
        s.avg_delay_s,
        s.mean_cost,
        outcome.train_steps,
        outcome.wall_clock.as_secs_f64(),
    );
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    refuse_existing(&args.output, args.overwrite)?;
    // Reject a bad axis before any run starts.
    cfg.with_value(&args.axis, args.values[0])?;
    let seeds = if args.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        args.seeds.clone()
    };
    let rows = sweep(&cfg, &args.axis, &args.values, &seeds)?;
    emit_sweep_csv(&rows, &args.output, args.overwrite)?;
    println!("{} runs written to {}", rows.len(), args.output.display());
    Ok(())
}

fn run_check(args: CheckArgs) -> Result<()> {
    let results = check::run_all(args.seed);
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Check(args) => run_check(args),
    }
}
