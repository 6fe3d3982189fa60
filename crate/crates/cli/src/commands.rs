//! Command implementations. Each run writes its artifacts plus a
//! `manifest.json` recording the effective configuration, its hash, the
//! seed and the wall time, which is enough to reproduce the run exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use reflected_mfg::convergence::{
    experiment_value_convergence, experiment_w_convergence, run_convergence_suite,
    write_convergence_report,
};
use reflected_mfg::grid::{build_grid, empirical_measure, GridMeasure, TimeGrid};
use reflected_mfg::io;
use reflected_mfg::master::MasterEvaluator;
use reflected_mfg::mfg::solve_mfg;
use reflected_mfg::model::{CouplingWeights, DiscreteModel, HamiltonianSpec, ModelConfig};
use reflected_mfg::nash::solve_nash;
use reflected_mfg::particles::{
    feedback_gap, simulate_coupled, trajectory_gap, write_ensemble, write_ensemble_summary,
    GapEstimate, ParticleParams,
};
use reflected_mfg::{Error, Result};

use crate::config::RunConfig;
use crate::CACHE_ENV_VAR;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CliCommand {
    SolveMfg,
    SolveNash,
    EvalMaster,
    Simulate,
    Converge,
    Check,
}

impl CliCommand {
    pub fn name(self) -> &'static str {
        match self {
            CliCommand::SolveMfg => "solve-mfg",
            CliCommand::SolveNash => "solve-nash",
            CliCommand::EvalMaster => "eval-master",
            CliCommand::Simulate => "simulate",
            CliCommand::Converge => "converge",
            CliCommand::Check => "check",
        }
    }
}

/// Effective configuration plus the flags that modify dispatch.
pub struct RunContext {
    pub config: RunConfig,
    pub expensive: bool,
    pub jobs: Option<usize>,
}

impl RunContext {
    pub fn new(config: RunConfig, expensive: bool, jobs: Option<usize>) -> Self {
        RunContext { config, expensive, jobs }
    }

    pub fn out(&self) -> &Path {
        &self.config.output.directory
    }

    fn cache_dir(&self) -> Option<PathBuf> {
        std::env::var_os(CACHE_ENV_VAR).map(PathBuf::from)
    }

    fn master(&self, model: DiscreteModel, time_grid: TimeGrid) -> Result<MasterEvaluator> {
        let master = MasterEvaluator::new(model, time_grid, self.config.mfg_params())?;
        match self.cache_dir() {
            Some(dir) => master.with_disk_cache(dir),
            None => Ok(master),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub expensive: bool,
    pub jobs: Option<usize>,
    pub wall_seconds: f64,
    /// The full effective configuration, so the run can be repeated without
    /// the original file.
    pub config: RunConfig,
}

pub fn run_command(cmd: CliCommand, ctx: &RunContext) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(ctx.out())?;
    match cmd {
        CliCommand::SolveMfg => cmd_solve_mfg(ctx)?,
        CliCommand::SolveNash => cmd_solve_nash(ctx)?,
        CliCommand::EvalMaster => cmd_eval_master(ctx)?,
        CliCommand::Simulate => cmd_simulate(ctx)?,
        CliCommand::Converge => cmd_converge(ctx)?,
        CliCommand::Check => cmd_check(ctx)?,
    }
    let manifest = RunManifest {
        command: cmd.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ctx.config.hash()?,
        seed: ctx.config.experiment.seed,
        expensive: ctx.expensive,
        jobs: ctx.jobs,
        wall_seconds: started.elapsed().as_secs_f64(),
        config: ctx.config.clone(),
    };
    io::write_json(&ctx.out().join("manifest.json"), &manifest)?;
    Ok(())
}

/// Four-player tensors hold `n^4` cells per slice; they are refused unless
/// explicitly requested and kept on coarse grids.
fn gate_player_count(n_players: usize, n_cells: usize, expensive: bool) -> Result<()> {
    if n_players >= 4 {
        if !expensive {
            return Err(invalid(
                "four-player solves are costly; pass --expensive to enable them",
            ));
        }
        if n_cells > 21 {
            return Err(invalid(format!(
                "four-player solves are capped at 21 cells, the grid has {n_cells}"
            )));
        }
    }
    Ok(())
}

fn cmd_solve_mfg(ctx: &RunContext) -> Result<()> {
    let model = ctx.config.build_model()?;
    let time_grid = ctx.config.time_grid()?;
    let m0 = GridMeasure::uniform(&model.grid);
    let sol = solve_mfg(&model, &time_grid, &m0, &ctx.config.mfg_params())?;
    io::write_mfg_solution(ctx.out(), "mfg", &sol)?;
    println!(
        "solve-mfg: converged in {} iterations, gap {:.3e}, mass error {:.3e}",
        sol.iterations_used, sol.final_gap, sol.max_mass_error
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct NashSidecar {
    n_players: usize,
    n_cells: usize,
    n_steps: usize,
    max_symmetry_defect: f64,
    max_inner_used: usize,
    substeps: usize,
}

fn cmd_solve_nash(ctx: &RunContext) -> Result<()> {
    let n_players = ctx.config.experiment.n_players;
    gate_player_count(n_players, ctx.config.grid.n_cells, ctx.expensive)?;
    let model = ctx.config.build_model()?;
    let time_grid = ctx.config.time_grid()?;
    let nash = solve_nash(&model, &time_grid, n_players, &ctx.config.nash_params())?;
    io::write_flat_binary(
        &ctx.out().join("nash_value.bin"),
        &[n_players as u64, nash.v.n_cells as u64, (time_grid.n_steps + 1) as u64],
        nash.v.data(),
    )?;
    io::write_json(
        &ctx.out().join("nash.json"),
        &NashSidecar {
            n_players,
            n_cells: nash.v.n_cells,
            n_steps: time_grid.n_steps,
            max_symmetry_defect: nash.max_symmetry_defect,
            max_inner_used: nash.max_inner_used,
            substeps: nash.substeps,
        },
    )?;
    println!(
        "solve-nash: {n_players} players, symmetry defect {:.3e}, {} inner iterations at worst",
        nash.max_symmetry_defect, nash.max_inner_used
    );
    Ok(())
}

fn cmd_eval_master(ctx: &RunContext) -> Result<()> {
    let model = ctx.config.build_model()?;
    let time_grid = ctx.config.time_grid()?;
    let n = model.grid.n_cells;
    let master = ctx.master(model, time_grid)?;
    let m0 = GridMeasure::uniform(&master.model.grid);
    let eval = master.eval_u(0, &m0)?;
    io::write_node_csv(&ctx.out().join("master_u0.csv"), &eval.u0)?;
    let lo = eval.u0.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eval.u0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if ctx.expensive {
        let kernel = master.delta_u_kernel(0, &m0)?;
        let rows: Vec<&[f64]> = kernel.chunks(n).collect();
        io::write_matrix_csv(&ctx.out().join("master_kernel.csv"), rows)?;
        println!("eval-master: u0 range [{lo:.4}, {hi:.4}], kernel {n} x {n} assembled");
    } else {
        println!("eval-master: u0 range [{lo:.4}, {hi:.4}] over {n} nodes");
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GapsFile {
    trajectory: Vec<GapEstimate>,
    feedback_control: Vec<GapEstimate>,
    feedback_value: Vec<GapEstimate>,
}

fn cmd_simulate(ctx: &RunContext) -> Result<()> {
    let n_players = ctx.config.experiment.n_players;
    gate_player_count(n_players, ctx.config.grid.n_cells, ctx.expensive)?;
    let model = ctx.config.build_model()?;
    let time_grid = ctx.config.time_grid()?;
    let master = ctx.master(model, time_grid)?;
    let nash = solve_nash(
        &master.model,
        &master.time_grid,
        n_players,
        &ctx.config.nash_params(),
    )?;
    let m0 = GridMeasure::uniform(&master.model.grid);
    let ens = simulate_coupled(&nash, &master, &m0, &ctx.config.particle_params())?;
    write_ensemble(ctx.out(), "ensemble", &ens)?;
    if ctx.config.wants_format("csv") {
        write_ensemble_summary(&ctx.out().join("ensemble_summary.csv"), &ens)?;
    }
    let trajectory = trajectory_gap(&ens);
    let feedback = feedback_gap(&ens, &nash, &master)?;
    if ctx.config.wants_format("json") {
        io::write_json(
            &ctx.out().join("gaps.json"),
            &GapsFile {
                trajectory: trajectory.clone(),
                feedback_control: feedback.control.clone(),
                feedback_value: feedback.value.clone(),
            },
        )?;
    }
    let worst = trajectory
        .iter()
        .map(|g| g.value)
        .fold(0.0_f64, f64::max);
    println!(
        "simulate: {} paths, {} players, worst trajectory gap {:.3e}",
        ens.n_paths, ens.n_players, worst
    );
    Ok(())
}

fn cmd_converge(ctx: &RunContext) -> Result<()> {
    if ctx.config.experiment.n_list.iter().any(|&n| n >= 4) {
        gate_player_count(4, ctx.config.grid.n_cells, ctx.expensive)?;
    }
    let model = ctx.config.build_model()?;
    let time_grid = ctx.config.time_grid()?;
    let m0 = GridMeasure::uniform(&model.grid);
    let params = ctx.config.suite_params(ctx.cache_dir());
    let report = run_convergence_suite(model, time_grid, &m0, &params)?;
    write_convergence_report(ctx.out(), &report)?;
    for row in &report.rows {
        println!(
            "converge: N={} value {:.3e} w {:.3e} trajectory {:.3e} ({:.1} s)",
            row.n_players, row.value_gap, row.w_gap, row.trajectory_gap, row.wall_seconds
        );
    }
    let line = &report.rates[0];
    let show = |r: &Option<reflected_mfg::convergence::RateFit>| match r {
        Some(fit) => format!("{:.2}", fit.slope),
        None => "n/a".to_string(),
    };
    println!(
        "converge: slopes value {} w {} trajectory {}",
        show(&line.value_rate),
        show(&line.w_rate),
        show(&line.trajectory_rate)
    );
    Ok(())
}

/// Deterministic stand-in for a uniform draw, keyed like the particle
/// noise so the check command needs no extra dependencies.
fn unit_stream(seed: u64, a: u64, b: u64) -> f64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&a.to_le_bytes());
    bytes[16..].copy_from_slice(&b.to_le_bytes());
    (io::hash_bytes(&bytes) >> 11) as f64 / (1u64 << 53) as f64
}

struct CheckLog {
    failures: Vec<String>,
}

impl CheckLog {
    fn report(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("check {name}: ok ({detail})");
        } else {
            println!("check {name}: FAILED ({detail})");
            self.failures.push(name.to_string());
        }
    }
}

/// Fast invariant suite: a null model must zero every metric, and the
/// configured model must conserve mass, keep the two-player tensor
/// symmetric, normalize empirical measures and produce monotone couplings.
/// Runs on small internal grids so it stays interactive.
fn cmd_check(ctx: &RunContext) -> Result<()> {
    let seed = ctx.config.experiment.seed;
    let base = &ctx.config.model;
    let mut log = CheckLog { failures: Vec::new() };

    // Null couplings and null Hamiltonian: the game decouples and every
    // value function and gap is exactly zero.
    {
        let config = ModelConfig {
            hamiltonian_spec: HamiltonianSpec::Constant { value: 0.0 },
            coupling_weights: CouplingWeights { c_f: 0.0, c_g: 0.0 },
            ..base.clone()
        };
        let grid = build_grid(12, (config.domain_lo, config.domain_hi))?;
        let model = DiscreteModel::new(config, grid)?;
        let time_grid = TimeGrid::new(0.0, base.horizon_t, 10)?;
        let m0 = GridMeasure::uniform(&model.grid);
        let sol = solve_mfg(&model, &time_grid, &m0, &ctx.config.mfg_params())?;
        let u_sup = sol.u.max_abs();
        log.report("null-mfg", u_sup <= 1e-9, format!("|u| <= {u_sup:.2e}"));

        let master = MasterEvaluator::new(model, time_grid, ctx.config.mfg_params())?;
        let nash =
            solve_nash(&master.model, &master.time_grid, 2, &ctx.config.nash_params())?;
        let v_sup = nash.v.data().iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        log.report("null-nash", v_sup <= 1e-9, format!("|v| <= {v_sup:.2e}"));

        let value_gap = experiment_value_convergence(&master, &nash, 6, 2, 1, seed)?;
        let w_gap = experiment_w_convergence(&master, &nash, &m0, 8, seed)?;
        log.report(
            "null-master-gaps",
            value_gap <= 1e-9 && w_gap <= 1e-9,
            format!("value {value_gap:.2e}, w {w_gap:.2e}"),
        );

        let params = ParticleParams {
            n_paths: 32,
            seed,
            ..ParticleParams::default()
        };
        let ens = simulate_coupled(&nash, &master, &m0, &params)?;
        let gap = trajectory_gap(&ens).iter().fold(0.0_f64, |m, g| m.max(g.value));
        let fb = feedback_gap(&ens, &nash, &master)?;
        let fb_sup = fb
            .control
            .iter()
            .chain(fb.value.iter())
            .fold(0.0_f64, |m, g| m.max(g.value));
        log.report(
            "null-particles",
            gap <= 1e-12 && fb_sup <= 1e-9,
            format!("trajectory {gap:.2e}, feedback {fb_sup:.2e}"),
        );
    }

    // Mass conservation of the forward sweep on the configured model.
    {
        let grid = build_grid(24, (base.domain_lo, base.domain_hi))?;
        let model = DiscreteModel::new(base.clone(), grid)?;
        let time_grid = TimeGrid::new(0.0, base.horizon_t, 16)?;
        let m0 = GridMeasure::uniform(&model.grid);
        let sol = solve_mfg(&model, &time_grid, &m0, &ctx.config.mfg_params())?;
        log.report(
            "mass-conservation",
            sol.max_mass_error <= 1e-10,
            format!("per-step defect {:.2e}", sol.max_mass_error),
        );
    }

    // Exchangeability of the two-player tensor on the configured model.
    {
        let grid = build_grid(10, (base.domain_lo, base.domain_hi))?;
        let model = DiscreteModel::new(base.clone(), grid)?;
        let time_grid = TimeGrid::new(0.0, base.horizon_t, 8)?;
        let nash = solve_nash(&model, &time_grid, 2, &ctx.config.nash_params())?;
        log.report(
            "two-player-symmetry",
            nash.max_symmetry_defect <= 1e-8,
            format!("defect {:.2e}", nash.max_symmetry_defect),
        );
    }

    // Empirical measures normalize exactly, with and without exclusion.
    {
        let grid = build_grid(31, (base.domain_lo, base.domain_hi))?;
        let width = grid.hi - grid.lo;
        let mut worst = 0.0_f64;
        for trial in 0..100u64 {
            let n_players = 2 + (trial % 3) as usize;
            let positions: Vec<f64> = (0..n_players)
                .map(|p| grid.lo + unit_stream(seed, trial, p as u64) * width)
                .collect();
            let full = empirical_measure(&positions, None, &grid)?;
            let excl = empirical_measure(&positions, Some(0), &grid)?;
            worst = worst
                .max((full.total_mass() - 1.0).abs())
                .max((excl.total_mass() - 1.0).abs());
        }
        log.report(
            "empirical-normalization",
            worst <= 1e-12,
            format!("worst mass defect {worst:.2e}"),
        );
    }

    // Monotonicity of the smoothed couplings in the measure.
    {
        let grid = build_grid(31, (base.domain_lo, base.domain_hi))?;
        let model = DiscreteModel::new(base.clone(), grid)?;
        let n = model.grid.n_cells;
        let mut worst = f64::INFINITY;
        for trial in 0..20u64 {
            let draw = |tag: u64| -> Result<GridMeasure> {
                let raw: Vec<f64> =
                    (0..n).map(|i| 0.05 + unit_stream(seed, trial * 2 + tag, i as u64)).collect();
                let total: f64 = raw.iter().sum();
                GridMeasure::from_weights(raw.into_iter().map(|w| w / total).collect())
            };
            let m1 = draw(0)?;
            let m2 = draw(1)?;
            let f1 = model.coupling_f(&m1)?;
            let f2 = model.coupling_f(&m2)?;
            let g1 = model.coupling_g(&m1)?;
            let g2 = model.coupling_g(&m2)?;
            let pair = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b.iter())
                    .zip(m1.weights().iter().zip(m2.weights().iter()))
                    .map(|((va, vb), (wa, wb))| (va - vb) * (wa - wb))
                    .sum()
            };
            worst = worst.min(pair(&f1, &f2)).min(pair(&g1, &g2));
        }
        log.report(
            "coupling-monotonicity",
            worst >= -1e-12,
            format!("smallest quadrature {worst:.2e}"),
        );
    }

    if log.failures.is_empty() {
        println!("check: all invariant groups hold");
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "invariant checks failed: {}",
            log.failures.join(", ")
        )))
    }
}
