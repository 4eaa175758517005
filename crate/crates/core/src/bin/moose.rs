//! Command-line frontend for the offline policy-search pipeline.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `report`, `grid`, `verify`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or contract error.
//! The environment variable `MOOSE_OUT_ROOT`, when set, is prepended to
//! every relative output path.

use clap::{Args, Parser, Subcommand};
use moose::behavior::{BehaviorPolicy, Tier};
use moose::config::RunConfig;
use moose::dataset::Dataset;
use moose::dynamics::{compute_norm_stats, train_ensemble, DynamicsEnsemble};
use moose::env::EnvKind;
use moose::eval::{
    evaluate_policy, mc_gaussian_square, mc_percentile_factor, quantile_factor_asymptotic,
    robust_percentile, PerfMatrix,
};
use moose::grid::{diagnostics_csv, run_experiment_grid};
use moose::policy::{train_policy, DeterministicPolicy};
use moose::report::write_report;
use moose::seeding;
use moose::vae::{train_vae, SupportVae};
use moose::Error;
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "moose",
    version,
    about = "Model-based offline policy search with ensembles"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a batch of transitions with a tiered behavior policy.
    GenData(GenDataArgs),
    /// Train the dynamics ensemble, the support autoencoder, and the policy.
    Train(TrainArgs),
    /// Evaluate a policy checkpoint in the true environment.
    Eval(EvalArgs),
    /// Aggregate curve files into the robust summary table and charts.
    Report(ReportArgs),
    /// Run the full experiment grid (tiers x epsilons x algorithms x seeds).
    Grid(GridArgs),
    /// Run the Monte Carlo verification checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigOpt {
    /// Key-value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigOpt {
    fn load(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// point-mass or noisy-point-mass
    #[arg(long)]
    env: Option<String>,
    /// bad, mediocre or optimized
    #[arg(long)]
    tier: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and diagnostics.
    #[arg(long)]
    out: PathBuf,
    /// Reuse a dynamics-ensemble checkpoint instead of training one.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Reuse an autoencoder checkpoint instead of training one.
    #[arg(long)]
    vae: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    policy_steps: Option<usize>,
    #[arg(long)]
    policy_lr: Option<f64>,
    /// sgd or adam
    #[arg(long)]
    policy_optimizer: Option<String>,
    #[arg(long)]
    model_mode: Option<String>,
    #[arg(long)]
    model_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Policy checkpoint to evaluate.
    #[arg(long)]
    policy: PathBuf,
    /// point-mass or noisy-point-mass
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    traj_len: Option<usize>,
    /// Iteration label recorded in the curve row.
    #[arg(long, default_value_t = 0)]
    iteration: usize,
    /// Curve file to append to (created with a header when absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing curve_{tier}_{eps}_{alg}.csv files.
    #[arg(long)]
    curves: PathBuf,
    /// Summary CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-cell SVG charts.
    #[arg(long)]
    charts: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated tier list override.
    #[arg(long)]
    tiers: Option<String>,
    /// Comma-separated epsilon list override.
    #[arg(long)]
    epsilons: Option<String>,
    /// Comma-separated algorithm list override.
    #[arg(long)]
    algorithms: Option<String>,
    /// Comma-separated training-seed list override.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller replication counts for a fast smoke run.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}

/// Usage and contract problems exit 2, runtime failures exit 1.
fn error_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Format { .. } => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

/// Prefix relative output paths with MOOSE_OUT_ROOT when set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("MOOSE_OUT_ROOT") {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Report(a) => report(a),
        Cmd::Grid(a) => grid(a),
        Cmd::Verify(a) => verify(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let mut cfg = a.config.load()?;
    if let Some(env) = &a.env {
        cfg.env = EnvKind::parse(env)?;
    }
    if let Some(tier) = &a.tier {
        cfg.tier = Tier::parse(tier)?;
    }
    if let Some(eps) = a.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let env = cfg.env_spec();
    let policy = BehaviorPolicy::for_tier(cfg.tier, &env);
    let ds = moose::behavior::generate_dataset(&env, &policy, cfg.epsilon, cfg.steps, cfg.seed)?;
    let out = out_path(&a.out);
    ds.save(&out)?;

    let (lo, hi) = ds.state_ranges();
    println!("wrote {} transitions to {}", ds.len(), out.display());
    println!("mean reward: {}", ds.mean_reward());
    println!("mean episode return: {}", ds.mean_episode_return());
    for d in 0..env.state_dim {
        println!("state[{d}] observed range: [{}, {}]", lo[d], hi[d]);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.policy_steps {
        cfg.policy_steps = v;
    }
    if let Some(v) = a.policy_lr {
        cfg.policy_lr = v;
    }
    if let Some(v) = &a.policy_optimizer {
        cfg.set("policy_optimizer", v)?;
    }
    if let Some(v) = &a.model_mode {
        cfg.set("model_mode", v)?;
    }
    if let Some(v) = a.model_k {
        cfg.model_k = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let dataset = Dataset::load(&a.data)?;
    let out = out_path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let fresh_stats = compute_norm_stats(&dataset)?;

    let t0 = std::time::Instant::now();
    let ensemble = match &a.ensemble {
        Some(p) => {
            let ens = DynamicsEnsemble::load(p)?;
            if ens.stats != fresh_stats {
                return Err(Error::Contract(format!(
                    "ensemble checkpoint {} was trained on different data: its \
                     normalization statistics do not match this dataset",
                    p.display()
                )));
            }
            println!("reusing ensemble from {}", p.display());
            ens
        }
        None => {
            let trained = train_ensemble(&dataset, &cfg.model_config(cfg.seed))?;
            for (k, mse) in trained.held_out_mse.iter().enumerate() {
                println!("member {k} held-out normalized state MSE: {mse}");
            }
            trained.ensemble
        }
    };

    let vae = match &a.vae {
        Some(p) => {
            let v = SupportVae::load(p)?;
            if v.stats != fresh_stats {
                return Err(Error::Contract(format!(
                    "autoencoder checkpoint {} was trained on different data: its \
                     normalization statistics do not match this dataset",
                    p.display()
                )));
            }
            println!("reusing autoencoder from {}", p.display());
            v
        }
        None => train_vae(&dataset, &ensemble.stats, &cfg.vae_config(cfg.seed))?.vae,
    };

    let mc = cfg.moose_config(cfg.seed);
    let result = train_policy(&dataset, &ensemble, &vae, &mc)?;
    let elapsed = t0.elapsed();

    ensemble.save(&out.join("ensemble.ckpt"))?;
    vae.save(&out.join("vae.ckpt"))?;
    result.policy.save(&out.join("policy.ckpt"))?;
    let diag_path = out.join("diagnostics.csv");
    std::fs::write(&diag_path, diagnostics_csv(&result.diagnostics, mc.is_unpenalized()))
        .map_err(|e| Error::Io {
            path: diag_path.display().to_string(),
            source: e,
        })?;

    println!(
        "trained in {:.1}s; checkpoints and diagnostics in {}",
        elapsed.as_secs_f64(),
        out.display()
    );
    if let Some(last) = result.diagnostics.last() {
        println!(
            "final step: E[R] = {}, E[P] = {}, loss = {}",
            last.expected_return, last.expected_penalty, last.loss
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let mut cfg = a.config.load()?;
    if let Some(env) = &a.env {
        cfg.env = EnvKind::parse(env)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let n_traj = a.n_traj.unwrap_or(cfg.eval_n_traj);
    let traj_len = a.traj_len.unwrap_or(cfg.eval_traj_len);

    let policy = DeterministicPolicy::load(&a.policy)?;
    let env = cfg.env_spec();
    let ret = evaluate_policy(&env, &policy, n_traj, traj_len, cfg.seed)?;

    let out = out_path(&a.out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
    }
    let mut text = if out.exists() {
        std::fs::read_to_string(&out).map_err(|e| Error::Io {
            path: out.display().to_string(),
            source: e,
        })?
    } else {
        "seed,iteration,true_return\n".to_string()
    };
    text.push_str(&format!("{},{},{}\n", cfg.seed, a.iteration, ret));
    std::fs::write(&out, text).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    println!("true return: {ret}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Error> {
    let out = out_path(&a.out);
    let charts = a.charts.as_deref().map(out_path);
    let warnings = write_report(&a.curves, &out, charts.as_deref())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn grid(a: GridArgs) -> Result<(), Error> {
    let mut cfg = a.config.load()?;
    if let Some(v) = &a.tiers {
        cfg.set("grid_tiers", v)?;
    }
    if let Some(v) = &a.epsilons {
        cfg.set("grid_epsilons", v)?;
    }
    if let Some(v) = &a.algorithms {
        cfg.set("grid_algorithms", v)?;
    }
    if let Some(v) = &a.seeds {
        cfg.set("grid_seeds", v)?;
    }
    cfg.validate()?;

    let out = out_path(&a.out);
    let t0 = std::time::Instant::now();
    let outcome = run_experiment_grid(&cfg, &out)?;
    println!(
        "grid finished in {:.1}s; outputs in {}",
        t0.elapsed().as_secs_f64(),
        out.display()
    );
    print!("{}", outcome.summary_csv());
    for cell in &outcome.cells {
        if let Some(e) = &cell.error {
            eprintln!(
                "warning: cell ({}, {}, {}) failed: {e}",
                cell.tier.name(),
                cell.epsilon,
                cell.algorithm.name()
            );
        }
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<(), Error> {
    let (reps_pct, reps_sq, pools) = if a.quick {
        (20_000, 200_000, 20)
    } else {
        (100_000, 1_000_000, 100)
    };
    let mut failures = 0;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{}: {name} ({detail})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let mut rng = seeding::stream(a.seed, "verify-percentile", 0);
    let factor = mc_percentile_factor(1000, reps_pct, &mut rng)?;
    let reference = quantile_factor_asymptotic(0.10);
    check(
        "10th-percentile uncertainty factor in [1.6, 1.8]",
        (1.6..=1.8).contains(&factor),
        format!("measured {factor:.4}, asymptotic {reference:.4}"),
    );

    let mut rng = seeding::stream(a.seed, "verify-square", 0);
    let m1 = mc_gaussian_square(reps_sq, 1.0, &mut rng)?;
    check(
        "mean of squared N(0,1) within 1% of 1",
        (m1 - 1.0).abs() < 0.01,
        format!("measured {m1:.5}"),
    );
    let m2 = mc_gaussian_square(reps_sq, 2.0, &mut rng)?;
    check(
        "mean of squared N(0,4) within 1% of 4",
        (m2 - 4.0).abs() < 0.04,
        format!("measured {m2:.5}"),
    );

    // Percentile summaries against a brute-force sort-and-index oracle.
    let mut rng = seeding::stream(a.seed, "verify-oracle", 0);
    let mut oracle_ok = true;
    for _ in 0..pools {
        let seeds = rng.random_range(1..6);
        let iters = rng.random_range(10..60);
        let rows: Vec<Vec<f64>> = (0..seeds)
            .map(|_| (0..iters).map(|_| rng.random_range(-100.0..100.0)).collect())
            .collect();
        let perf = PerfMatrix::new(rows.clone())?;
        let got = robust_percentile(&perf, 0.10, 0.10)?;
        let tail = ((0.10 * iters as f64).ceil() as usize).clamp(1, iters);
        let mut pool: Vec<f64> = rows
            .iter()
            .flat_map(|r| r[iters - tail..].to_vec())
            .collect();
        pool.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = ((0.10 * pool.len() as f64).ceil() as usize).max(1);
        if got.percentile != pool[rank - 1] {
            oracle_ok = false;
        }
    }
    check(
        "robust percentile equals the brute-force oracle",
        oracle_ok,
        format!("{pools} random pools"),
    );

    if failures > 0 {
        return Err(Error::Diverged(format!("{failures} verification checks failed")));
    }
    Ok(())
}
