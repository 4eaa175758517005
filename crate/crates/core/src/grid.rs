//! Experiment grids: tiers x exploration levels x algorithms x seeds.
//!
//! Each (tier, epsilon) cell generates one batch; each algorithm then trains
//! once per seed on that batch while its true-environment performance is
//! traced every `eval_interval` iterations. Cells are independent jobs keyed
//! by (tier, epsilon, algorithm, seed) and may run fully in parallel; a
//! failing cell is recorded as failed and the grid continues. Outputs are
//! merged and written in a fixed order so identical seeds give identical
//! files.
//!
//! Files written under the output directory:
//!   curves/curve_{tier}_{eps}_{alg}.csv    seed,iteration,true_return
//!   diag/diag_{tier}_{eps}_{alg}_s{seed}.csv   per-update loss diagnostics
//!   summary.csv    tier,epsilon,algorithm,percentile10,stderr,n_pooled

use crate::behavior::{clone_behavior_traced, generate_dataset, BehaviorPolicy, Tier};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::dynamics::train_ensemble;
use crate::eval::{evaluate_policy, robust_percentile, PerfMatrix, RobustSummary};
use crate::policy::{train_policy_traced, StepDiag};
use crate::seeding::derive_seed;
use crate::vae::train_vae;
use crate::{Error, Result};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Penalized policy search (the default lambda).
    Moose,
    /// The lambda = 1 ablation: return only, no support penalty.
    Unpenalized,
    /// Supervised behavior cloning.
    BehaviorClone,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [
        Algorithm::Moose,
        Algorithm::Unpenalized,
        Algorithm::BehaviorClone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Moose => "moose",
            Algorithm::Unpenalized => "unpenalized",
            Algorithm::BehaviorClone => "bc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "moose" => Ok(Algorithm::Moose),
            "unpenalized" => Ok(Algorithm::Unpenalized),
            "bc" => Ok(Algorithm::BehaviorClone),
            other => Err(Error::Contract(format!(
                "unknown algorithm '{other}' (expected moose, unpenalized or bc)"
            ))),
        }
    }
}

/// One (tier, epsilon, algorithm) cell's outcome.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub tier: Tier,
    pub epsilon: f64,
    pub algorithm: Algorithm,
    /// One row per seed, one column per traced evaluation.
    pub perf: Option<PerfMatrix>,
    pub summary: Option<RobustSummary>,
    /// Mean episode return of the generating batch (the baseline).
    pub batch_mean_return: f64,
    /// Set when any seed of this cell failed; the grid keeps going.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub cells: Vec<CellResult>,
}

impl GridOutcome {
    pub fn cell(&self, tier: Tier, epsilon: f64, algorithm: Algorithm) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.tier == tier && c.epsilon == epsilon && c.algorithm == algorithm
        })
    }

    /// The summary table as CSV text.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("tier,epsilon,algorithm,percentile10,stderr,n_pooled\n");
        for c in &self.cells {
            match &c.summary {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        c.tier.name(),
                        c.epsilon,
                        c.algorithm.name(),
                        s.percentile,
                        s.std_err,
                        s.n_pooled
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{},{},{},nan,nan,0",
                        c.tier.name(),
                        c.epsilon,
                        c.algorithm.name()
                    );
                }
            }
        }
        out
    }
}

/// A traced training run: per-iteration true returns plus any diagnostics.
struct RunTrace {
    returns: Vec<f64>,
    diagnostics: Vec<StepDiag>,
    unpenalized: bool,
}

fn run_one(
    cfg: &RunConfig,
    dataset: &Dataset,
    algorithm: Algorithm,
    run_seed: u64,
) -> Result<RunTrace> {
    let env = cfg.env_spec();
    let eval_here = |step: usize, policy: &crate::policy::DeterministicPolicy| -> f64 {
        let eval_seed = derive_seed(run_seed, "trace-eval", step as u64);
        evaluate_policy(&env, policy, cfg.eval_n_traj, cfg.eval_traj_len, eval_seed)
            .unwrap_or(f64::NAN)
    };

    match algorithm {
        Algorithm::Moose | Algorithm::Unpenalized => {
            let trained = train_ensemble(dataset, &cfg.model_config(run_seed))?;
            let vae = train_vae(dataset, &trained.ensemble.stats, &cfg.vae_config(run_seed))?;
            let mut mc = cfg.moose_config(run_seed);
            if algorithm == Algorithm::Unpenalized {
                mc.lambda = 1.0;
            }
            let mut returns = Vec::new();
            let out = train_policy_traced(dataset, &trained.ensemble, &vae.vae, &mc, |step, policy| {
                if step % cfg.eval_interval == 0 {
                    returns.push(eval_here(step, policy));
                }
            })?;
            Ok(RunTrace {
                returns,
                diagnostics: out.diagnostics,
                unpenalized: mc.is_unpenalized(),
            })
        }
        Algorithm::BehaviorClone => {
            let mut returns = Vec::new();
            clone_behavior_traced(dataset, &cfg.bc_config(run_seed), |epoch, policy| {
                if epoch % cfg.eval_interval == 0 {
                    returns.push(eval_here(epoch, policy));
                }
            })?;
            Ok(RunTrace {
                returns,
                diagnostics: Vec::new(),
                unpenalized: false,
            })
        }
    }
}

/// Render one diagnostics CSV (the per-run file `cmd train` also writes).
pub fn diagnostics_csv(diags: &[StepDiag], unpenalized: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# run: {}",
        if unpenalized {
            "unpenalized (lambda = 1)"
        } else {
            "penalized"
        }
    );
    out.push_str("step,expected_return,expected_penalty,loss\n");
    for d in diags {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            d.step, d.expected_return, d.expected_penalty, d.loss
        );
    }
    out
}

/// Render a cell's curve CSV: all seeds' traced returns.
pub fn curve_csv(seeds: &[u64], perf: &PerfMatrix) -> String {
    let mut out = String::from("seed,iteration,true_return\n");
    for (row, seed) in perf.rows.iter().zip(seeds) {
        for (iter, ret) in row.iter().enumerate() {
            let _ = writeln!(out, "{seed},{iter},{ret}");
        }
    }
    out
}

/// Run the whole grid. `out_dir` receives curve, diagnostics, and summary
/// files; the returned outcome carries everything in memory as well.
pub fn run_experiment_grid(cfg: &RunConfig, out_dir: &Path) -> Result<GridOutcome> {
    cfg.validate()?;
    if cfg.grid_seeds.len() < 3 {
        return Err(Error::Contract(format!(
            "the grid needs at least 3 seeds, got {}",
            cfg.grid_seeds.len()
        )));
    }
    let env = cfg.env_spec();

    // One dataset per (tier, epsilon) cell, generated up front.
    let mut datasets: Vec<(Tier, f64, Dataset)> = Vec::new();
    for (ti, &tier) in cfg.grid_tiers.iter().enumerate() {
        for (ei, &eps) in cfg.grid_epsilons.iter().enumerate() {
            let data_seed = derive_seed(cfg.seed, "grid-data", (ti * 100 + ei) as u64);
            let policy = BehaviorPolicy::for_tier(tier, &env);
            let ds = generate_dataset(&env, &policy, eps, cfg.steps, data_seed)?;
            datasets.push((tier, eps, ds));
        }
    }

    // Every (cell, algorithm, seed) run is independent.
    struct Job {
        cell: usize,
        algorithm: Algorithm,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for cell in 0..datasets.len() {
        for &algorithm in &cfg.grid_algorithms {
            for &seed in &cfg.grid_seeds {
                jobs.push(Job {
                    cell,
                    algorithm,
                    seed,
                });
            }
        }
    }
    let traces: Vec<std::result::Result<RunTrace, String>> = jobs
        .par_iter()
        .map(|job| {
            run_one(cfg, &datasets[job.cell].2, job.algorithm, job.seed)
                .map_err(|e| e.to_string())
        })
        .collect();

    // Assemble cells in fixed order and write files.
    let curves_dir = out_dir.join("curves");
    let diag_dir = out_dir.join("diag");
    std::fs::create_dir_all(&curves_dir).map_err(|e| Error::io(&curves_dir, e))?;
    std::fs::create_dir_all(&diag_dir).map_err(|e| Error::io(&diag_dir, e))?;

    let mut cells = Vec::new();
    for (cell_idx, (tier, eps, ds)) in datasets.iter().enumerate() {
        for &algorithm in &cfg.grid_algorithms {
            let mut rows = Vec::new();
            let mut error: Option<String> = None;
            for (job, trace) in jobs.iter().zip(&traces) {
                if job.cell != cell_idx || job.algorithm != algorithm {
                    continue;
                }
                match trace {
                    Ok(t) => {
                        rows.push(t.returns.clone());
                        if !t.diagnostics.is_empty() {
                            let name = format!(
                                "diag_{}_{}_{}_s{}.csv",
                                tier.name(),
                                eps,
                                algorithm.name(),
                                job.seed
                            );
                            let text = diagnostics_csv(&t.diagnostics, t.unpenalized);
                            let p = diag_dir.join(name);
                            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                        }
                    }
                    Err(e) => {
                        error = Some(e.clone());
                    }
                }
            }
            let (perf, summary) = if error.is_none() && !rows.is_empty() {
                let perf = PerfMatrix::new(rows)?;
                let summary = robust_percentile(&perf, 0.10, 0.10)?;
                let name = format!("curve_{}_{}_{}.csv", tier.name(), eps, algorithm.name());
                let p = curves_dir.join(name);
                std::fs::write(&p, curve_csv(&cfg.grid_seeds, &perf)).map_err(|e| Error::io(&p, e))?;
                (Some(perf), Some(summary))
            } else {
                (None, None)
            };
            cells.push(CellResult {
                tier: *tier,
                epsilon: *eps,
                algorithm,
                perf,
                summary,
                batch_mean_return: ds.mean_episode_return(),
                error,
            });
        }
    }

    let outcome = GridOutcome { cells };
    let p = out_dir.join("summary.csv");
    std::fs::write(&p, outcome.summary_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(outcome)
}
