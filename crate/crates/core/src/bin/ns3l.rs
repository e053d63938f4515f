use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ns3l_core::config::ExperimentConfig;
use ns3l_core::data::{split_labeled_unlabeled, ToyBias};
use ns3l_core::experiments::{
    mean_std, run_seeds, run_sweep, run_toy_demo, sweep_csv, ToyDemoConfig, DEFAULT_SWEEP_LAMBDA1,
    DEFAULT_SWEEP_T,
};
use ns3l_core::model::Params;
use ns3l_core::train::{evaluate, metrics_csv};
use ns3l_core::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};
use ns3l_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ns3l", version, about = "Negative-sampling semi-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more seeds and report the test error at the best
    /// validation step.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a config.
    Eval(EvalArgs),
    /// Finite-difference check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One-dimensional biased-label demo.
    DemoToy(ToyArgs),
    /// Grid over the threshold T and weight lambda1.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "T")]
    t: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "E")]
    e: Option<f64>,
    #[arg(long = "A")]
    a: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        put("method", self.method.clone());
        put("T", self.t.map(|v| v.to_string()));
        put("lambda1", self.lambda1.map(|v| v.to_string()));
        put("lambda2", self.lambda2.map(|v| v.to_string()));
        put("lambda3", self.lambda3.map(|v| v.to_string()));
        put("epsilon", self.epsilon.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("E", self.e.map(|v| v.to_string()));
        put("A", self.a.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                msg: "--set expects key=value".into(),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        ExperimentConfig::load(self.config.as_deref(), &pairs)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: Overrides,
    /// Number of seeds, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0.6)]
    bias: f64,
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Directory for the boundary trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: Overrides,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long = "T-grid", value_delimiter = ',')]
    t_grid: Vec<f64>,
    /// Comma-separated weights.
    #[arg(long = "lambda1-grid", value_delimiter = ',')]
    lambda1_grid: Vec<f64>,
}

fn seed_list(cfg: &ExperimentConfig, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Invalid("--seeds must be at least 1".into()));
    }
    Ok((0..n).map(|i| cfg.seed + i).collect())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    // load before touching the output directory so a bad input leaves
    // nothing behind
    let ds = cfg.dataset.build()?;
    let seeds = seed_list(&cfg, args.seeds)?;
    let runs = run_seeds(&cfg, &ds, &seeds)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.txt"), cfg.emit())?;
    let mut errors = Vec::new();
    for (seed, run) in seeds.iter().zip(&runs) {
        fs::write(args.out.join(format!("metrics_seed{seed}.csv")), metrics_csv(&run.metrics))?;
        run.selected_params
            .save(&args.out.join(format!("checkpoint_seed{seed}.bin")))?;
        println!(
            "seed {seed}: test error {:.4} (best validation {:.4} at step {})",
            run.test_error, run.best_val_error, run.best_step
        );
        errors.push(run.test_error);
    }
    let (m, s) = mean_std(&errors);
    println!("{}: test error {:.4} ± {:.4} over {} seeds", cfg.method.name(), m, s, errors.len());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let ds = cfg.dataset.build()?;
    let split = split_labeled_unlabeled(&ds, &cfg.split_spec(), cfg.seed)?;
    let params = Params::load(&args.checkpoint)?;
    let x = ds.x.select_rows(&split.test);
    let y: Vec<usize> = split.test.iter().map(|&i| ds.y[i]).collect();
    let err = evaluate(&params, &x, &y, cfg.leaky_slope)?;
    println!("test error {err:.4} on {} rows", y.len());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let reports = gradcheck_suite(seed)?;
    let mut ok = true;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} max rel error {:.3e}  {verdict}", r.name, r.max_rel_error);
        ok &= r.passed();
    }
    if !ok {
        eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
    }
    Ok(ok)
}

fn cmd_demo_toy(args: &ToyArgs) -> Result<()> {
    let cfg = ToyDemoConfig {
        bias: ToyBias {
            bias: args.bias,
            offset: args.offset,
        },
        lambda1: args.lambda1,
        steps: args.steps,
        seeds: (0..args.seeds).collect(),
        ..ToyDemoConfig::default()
    };
    let rep = run_toy_demo(&cfg)?;
    let (sup, ns) = rep.mean_errors();
    println!("w* = {}", rep.w_star);
    println!("supervised:        mean |w_hat - w*| = {sup:.4}");
    println!("supervised + ns3l: mean |w_hat - w*| = {ns:.4}");
    let g = &rep.gradients;
    println!("unlabeled point x_u = {:.4}, mu_u = {:.4}", g.x_u, g.mu_u);
    println!("  inductive SSL  -(1 - mu_u) x_u = {:+.6}", g.inductive);
    println!("  ns3l           mu_u x_u        = {:+.6}", g.ns3l);
    println!(
        "  measured slope gradients: pseudo-label {:+.6}, ns3l {:+.6}",
        g.measured_inductive, g.measured_ns3l
    );
    println!(
        "  literal gradients point in opposite directions: {}",
        if g.opposite_signs() { "yes" } else { "no" }
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("toy_boundary.csv"), rep.trace_csv())?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    let ds = cfg.dataset.build()?;
    let seeds = seed_list(&cfg, args.seeds)?;
    let ts = if args.t_grid.is_empty() { DEFAULT_SWEEP_T.to_vec() } else { args.t_grid.clone() };
    let ls = if args.lambda1_grid.is_empty() {
        DEFAULT_SWEEP_LAMBDA1.to_vec()
    } else {
        args.lambda1_grid.clone()
    };
    let cells = run_sweep(&cfg, &ds, &ts, &ls, &seeds)?;
    write_new(&args.out, "sweep.csv", &sweep_csv(&cells))?;
    for c in &cells {
        let (m, s) = mean_std(&c.test_errors);
        println!("T={:<6} lambda1={:<4} test error {m:.4} ± {s:.4}", c.threshold, c.lambda1);
    }
    Ok(())
}

fn write_new(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
        Command::DemoToy(a) => cmd_demo_toy(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
