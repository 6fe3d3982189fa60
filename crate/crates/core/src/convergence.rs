//! Convergence experiments: how fast the N-player system approaches its
//! mean field limit as N grows. Three metrics are measured per player count
//! and fitted against N on a log-log scale.
//!
//! The value experiment compares `v^N_i(t, x)` with `U(t, x_i, m^N_x)` in
//! the sup norm over sampled configurations. Note the measure: here every
//! player contributes weight `1/N`, including player i, which is a different
//! object from the exclude-one measure (weight `1/(N-1)`) that the
//! projections use. Mixing the two up changes the limit, so the measure
//! builders are kept separate and tested directly.
//!
//! The w experiment integrates the value function against an i.i.d. start:
//! `w^N_i(t_0, x, m_0) = E[v^N_i(t_0, x, X_2, ..., X_N)]` with `X_j ~ m_0`,
//! estimated by Monte Carlo over the drawn configurations and compared with
//! `U(t_0, x, m_0)` in `L^1(m_0)`. In one dimension the expected decay is
//! the `N^{-1/2}` sampling rate, slower than the value metric's `1/N`.
//!
//! The trajectory experiment couples the two particle systems of the
//! particles module with shared noise and reports the sup-in-time mean
//! squared pathwise gap and the feedback mismatch along the played paths.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, invariant, Result};
use crate::grid::{Grid1D, GridMeasure, TimeGrid};
use crate::io;
use crate::master::MasterEvaluator;
use crate::mfg::MfgParams;
use crate::model::DiscreteModel;
use crate::nash::{solve_nash, NashParams, NashSolution};
use crate::particles::{
    feedback_gap, simulate_coupled, trajectory_gap, GapEstimate, ParticleParams,
};

/// Empirical measure of a full configuration: every player contributes
/// `1/N`, player i included.
pub fn full_measure(nodes: &[usize], grid: &Grid1D) -> Result<GridMeasure> {
    if nodes.is_empty() {
        return Err(invalid("configuration must not be empty"));
    }
    let mut weights = vec![0.0; grid.n_cells];
    let share = 1.0 / nodes.len() as f64;
    for &node in nodes {
        if node >= grid.n_cells {
            return Err(invalid(format!("node {node} outside grid of {} cells", grid.n_cells)));
        }
        weights[node] += share;
    }
    GridMeasure::from_weights(weights)
}

fn draw_seed(seed: u64, a: u64, b: u64, tag: u64) -> u64 {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&a.to_le_bytes());
    bytes[16..24].copy_from_slice(&b.to_le_bytes());
    bytes[24..].copy_from_slice(&tag.to_le_bytes());
    io::hash_bytes(&bytes)
}

const TAG_RANDOM_CONFIG: u64 = 1;
const TAG_W_DRAW: u64 = 2;

/// Node index drawn from the weights of `m0` by inverse transform.
fn sample_node(m0: &GridMeasure, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let weights = m0.weights();
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > u {
            return i;
        }
    }
    weights.len() - 1
}

/// Sup over sampled configurations, players and time slices of
/// `|v^N_i(t, x) - U(t, x_i, m^N_x)|`.
///
/// Configurations are node tuples: a full lattice with the given index
/// stride plus `n_random` uniform draws. Time slices are `n_t_slices`
/// evenly spaced indices starting at the initial one; the terminal slice is
/// excluded (the comparison there reduces to the two coupling measures).
pub fn experiment_value_convergence(
    master: &MasterEvaluator,
    nash: &NashSolution,
    lattice_stride: usize,
    n_random: usize,
    n_t_slices: usize,
    seed: u64,
) -> Result<f64> {
    let grid = &master.model.grid;
    let n = grid.n_cells;
    let n_players = nash.v.n_players;
    if nash.v.n_cells != n || nash.time_grid != master.time_grid {
        return Err(invalid("player system and value field live on different grids"));
    }
    if lattice_stride == 0 || n_t_slices == 0 {
        return Err(invalid("need a positive lattice stride and at least one time slice"));
    }

    let mut configs: Vec<Vec<usize>> = Vec::new();
    let lattice: Vec<usize> = (0..n).step_by(lattice_stride).collect();
    let mut stack = vec![0usize; n_players];
    let total = lattice.len().pow(n_players as u32);
    for flat in 0..total {
        let mut rest = flat;
        for slot in (0..n_players).rev() {
            stack[slot] = lattice[rest % lattice.len()];
            rest /= lattice.len();
        }
        configs.push(stack.clone());
    }
    for c in 0..n_random {
        let config: Vec<usize> = (0..n_players)
            .map(|slot| {
                let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(
                    seed,
                    c as u64,
                    slot as u64,
                    TAG_RANDOM_CONFIG,
                ));
                (rng.gen::<f64>() * n as f64) as usize % n
            })
            .collect();
        configs.push(config);
    }

    let n_steps = master.time_grid.n_steps;
    let slices: Vec<usize> =
        (0..n_t_slices).map(|j| j * n_steps / n_t_slices).collect();

    let mut sup = 0.0_f64;
    for &k in &slices {
        for nodes in &configs {
            let measure = full_measure(nodes, grid)?;
            let field = master.eval_u(k, &measure)?.u0;
            for player in 0..n_players {
                let v = nash.value_at_nodes(k, nodes, player)?;
                sup = sup.max((v - field[nodes[player]]).abs());
            }
        }
    }
    if !sup.is_finite() {
        return Err(invariant("value comparison produced a non-finite gap"));
    }
    Ok(sup)
}

/// Exact integrated value profile: `w^N_1(t_0, x) = E[v^N_1(t_0, x, X_{-1})]`
/// computed by contracting the stored tensor against the weights of `m0`
/// over every other axis. Cheap in low dimension and used as the Monte
/// Carlo oracle.
pub fn w_profile_exact(nash: &NashSolution, m0: &GridMeasure) -> Result<Vec<f64>> {
    let n = nash.v.n_cells;
    if m0.len() != n {
        return Err(invalid("measure does not live on the tensor grid"));
    }
    let n_players = nash.v.n_players;
    let slice = nash.v.slice(0);
    let weights = m0.weights();
    let mut out = vec![0.0; n];
    let others = n.pow((n_players - 1) as u32);
    for rest in 0..others {
        let mut prob = 1.0;
        let mut offset = 0usize;
        let mut digits = rest;
        for _ in 1..n_players {
            let node = digits % n;
            digits /= n;
            prob *= weights[node];
            offset = offset * n + node;
        }
        if prob == 0.0 {
            continue;
        }
        let base = offset;
        let stride = others;
        for (x, w) in out.iter_mut().enumerate() {
            *w += prob * slice[x * stride + base];
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of the same profile from `mc_budget` i.i.d. draws
/// of the other players.
pub fn w_profile_monte_carlo(
    nash: &NashSolution,
    m0: &GridMeasure,
    mc_budget: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = nash.v.n_cells;
    if m0.len() != n {
        return Err(invalid("measure does not live on the tensor grid"));
    }
    if mc_budget == 0 {
        return Err(invalid("need at least one draw"));
    }
    let n_players = nash.v.n_players;
    let slice = nash.v.slice(0);
    let stride = n.pow((n_players - 1) as u32);
    let mut out = vec![0.0; n];
    for draw in 0..mc_budget {
        let mut base = 0usize;
        for slot in 1..n_players {
            let node =
                sample_node(m0, draw_seed(seed, draw as u64, slot as u64, TAG_W_DRAW));
            base = base * n + node;
        }
        for (x, w) in out.iter_mut().enumerate() {
            *w += slice[x * stride + base];
        }
    }
    let scale = 1.0 / mc_budget as f64;
    for w in &mut out {
        *w *= scale;
    }
    Ok(out)
}

/// `L^1(m0)` distance between the Monte Carlo `w^N` profile at the initial
/// time and the limiting value field under the same start.
pub fn experiment_w_convergence(
    master: &MasterEvaluator,
    nash: &NashSolution,
    m0: &GridMeasure,
    mc_budget: usize,
    seed: u64,
) -> Result<f64> {
    if nash.v.n_cells != master.model.grid.n_cells || nash.time_grid != master.time_grid {
        return Err(invalid("player system and value field live on different grids"));
    }
    let w = w_profile_monte_carlo(nash, m0, mc_budget, seed)?;
    let limit = master.eval_u(0, m0)?.u0;
    let gap = w
        .iter()
        .zip(limit.iter())
        .zip(m0.weights().iter())
        .map(|((a, b), weight)| (a - b).abs() * weight)
        .sum::<f64>();
    if !gap.is_finite() {
        return Err(invariant("integrated value comparison produced a non-finite gap"));
    }
    Ok(gap)
}

/// Pathwise metrics for one player count, each reported for the worst
/// player (they agree up to noise by exchangeability).
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryConvergence {
    pub n_players: usize,
    /// `sup_t E|X_t - Y_t|^2` with jackknife error.
    pub trajectory: GapEstimate,
    /// Integrated squared feedback mismatch along Y.
    pub feedback: GapEstimate,
    /// Value mismatch at the shared start.
    pub start_value: GapEstimate,
}

fn worst(estimates: &[GapEstimate]) -> GapEstimate {
    let mut best = estimates[0];
    for e in &estimates[1..] {
        if e.value > best.value {
            best = *e;
        }
    }
    best
}

pub fn experiment_trajectories(
    nash: &NashSolution,
    master: &MasterEvaluator,
    m0: &GridMeasure,
    params: &ParticleParams,
) -> Result<TrajectoryConvergence> {
    let ens = simulate_coupled(nash, master, m0, params)?;
    let trajectory = worst(&trajectory_gap(&ens));
    let feedback = feedback_gap(&ens, nash, master)?;
    Ok(TrajectoryConvergence {
        n_players: nash.v.n_players,
        trajectory,
        feedback: worst(&feedback.control),
        start_value: worst(&feedback.value),
    })
}

/// Least-squares slope of `log error` against `log N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fit a power law through the measured errors. Returns `None` when the fit
/// is degenerate: fewer than two points, mismatched inputs, or an error that
/// is not strictly positive (a vanished metric has no slope).
pub fn rate_fit(n_values: &[usize], errors: &[f64]) -> Option<RateFit> {
    if n_values.len() != errors.len() || n_values.len() < 2 {
        return None;
    }
    if errors.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return None;
    }
    let xs: Vec<f64> = n_values.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|&e| e.ln()).collect();
    let count = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / count;
    let y_mean = ys.iter().sum::<f64>() / count;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 =
        xs.iter().zip(ys.iter()).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys.iter())
        .map(|(x, y)| {
            let fit = intercept + slope * x;
            (y - fit) * (y - fit)
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(RateFit { slope, intercept, r_squared })
}

/// Knobs for [`run_convergence_suite`].
#[derive(Clone, Debug)]
pub struct SuiteParams {
    /// Player counts, strictly increasing, from {2, 3, 4}.
    pub n_list: Vec<usize>,
    /// Node-index stride of the configuration lattice.
    pub lattice_stride: usize,
    pub n_random_configs: usize,
    pub n_t_slices: usize,
    pub mc_budget: usize,
    pub particles: ParticleParams,
    pub nash: NashParams,
    pub mfg: MfgParams,
    pub seed: u64,
    /// Persist limit-solve results here so repeated suites share work.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams {
            n_list: vec![2, 3],
            lattice_stride: 8,
            n_random_configs: 500,
            n_t_slices: 4,
            mc_budget: 2000,
            particles: ParticleParams::default(),
            nash: NashParams::default(),
            mfg: MfgParams::default(),
            seed: 1,
            cache_dir: None,
        }
    }
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(invalid("need at least one player count"));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("player counts must be strictly increasing"));
        }
        if self.n_list.iter().any(|&n| !(2..=4).contains(&n)) {
            return Err(invalid("player counts must lie in 2..=4"));
        }
        self.nash.validate()?;
        self.particles.validate()?;
        Ok(())
    }
}

/// One player count's worth of measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n_players: usize,
    pub value_gap: f64,
    pub w_gap: f64,
    pub trajectory_gap: f64,
    pub trajectory_se: f64,
    pub feedback_gap: f64,
    pub feedback_se: f64,
    pub start_value_gap: f64,
    pub start_value_se: f64,
    pub wall_seconds: f64,
}

/// Slot for a spatial dimension's rates. Only the line is implemented, so
/// every row beyond dimension one is carried through empty; downstream
/// consumers keep a stable schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionRates {
    pub dimension: usize,
    pub value_rate: Option<RateFit>,
    pub w_rate: Option<RateFit>,
    pub trajectory_rate: Option<RateFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Hash of the model, grid and time grid the suite ran on.
    pub instance: String,
    pub n_list: Vec<usize>,
    pub rows: Vec<ReportRow>,
    pub rates: Vec<DimensionRates>,
    pub total_wall_seconds: f64,
}

impl ConvergenceReport {
    pub fn check_invariants(&self) -> Result<()> {
        if self.rows.len() != self.n_list.len() {
            return Err(invariant("report rows do not match the player counts"));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(invariant("report player counts are not strictly increasing"));
        }
        for (row, &n) in self.rows.iter().zip(self.n_list.iter()) {
            if row.n_players != n {
                return Err(invariant("report row is out of order"));
            }
            let metrics = [
                row.value_gap,
                row.w_gap,
                row.trajectory_gap,
                row.trajectory_se,
                row.feedback_gap,
                row.feedback_se,
                row.start_value_gap,
                row.start_value_se,
            ];
            if metrics.iter().any(|m| !m.is_finite() || *m < 0.0) {
                return Err(invariant(format!("metrics for N = {n} are not usable numbers")));
            }
        }
        if self.rates.first().map(|r| r.dimension) != Some(1) {
            return Err(invariant("report must lead with the implemented dimension"));
        }
        for r in &self.rates[1..] {
            if r.value_rate.is_some() || r.w_rate.is_some() || r.trajectory_rate.is_some() {
                return Err(invariant(format!(
                    "dimension {} has no implementation and must stay empty",
                    r.dimension
                )));
            }
        }
        Ok(())
    }
}

fn instance_hash(model: &DiscreteModel, time_grid: &TimeGrid) -> Result<String> {
    let blob = serde_json::to_vec(&(
        &model.config,
        model.grid.n_cells,
        time_grid.t_start,
        time_grid.t_end,
        time_grid.n_steps,
    ))?;
    Ok(io::hash_hex(io::hash_bytes(&blob)))
}

/// Run all three experiments over the requested player counts and assemble
/// the fitted report. The same master evaluator (and thus the same solve
/// cache) backs every player count.
pub fn run_convergence_suite(
    model: DiscreteModel,
    time_grid: TimeGrid,
    m0: &GridMeasure,
    params: &SuiteParams,
) -> Result<ConvergenceReport> {
    params.validate()?;
    let started = Instant::now();
    let instance = instance_hash(&model, &time_grid)?;
    let mut master = MasterEvaluator::new(model, time_grid, params.mfg)?;
    if let Some(dir) = &params.cache_dir {
        master = master.with_disk_cache(dir.clone())?;
    }

    let mut rows = Vec::with_capacity(params.n_list.len());
    for &n_players in &params.n_list {
        let clock = Instant::now();
        let nash = solve_nash(&master.model, &master.time_grid, n_players, &params.nash)?;
        let value_gap = experiment_value_convergence(
            &master,
            &nash,
            params.lattice_stride,
            params.n_random_configs,
            params.n_t_slices,
            params.seed,
        )?;
        let w_gap =
            experiment_w_convergence(&master, &nash, m0, params.mc_budget, params.seed)?;
        let mut particle_params = params.particles;
        particle_params.seed = params.seed;
        let paths = experiment_trajectories(&nash, &master, m0, &particle_params)?;
        rows.push(ReportRow {
            n_players,
            value_gap,
            w_gap,
            trajectory_gap: paths.trajectory.value,
            trajectory_se: paths.trajectory.std_error,
            feedback_gap: paths.feedback.value,
            feedback_se: paths.feedback.std_error,
            start_value_gap: paths.start_value.value,
            start_value_se: paths.start_value.std_error,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
    }

    let value_rate =
        rate_fit(&params.n_list, &rows.iter().map(|r| r.value_gap).collect::<Vec<_>>());
    let w_rate = rate_fit(&params.n_list, &rows.iter().map(|r| r.w_gap).collect::<Vec<_>>());
    let trajectory_rate =
        rate_fit(&params.n_list, &rows.iter().map(|r| r.trajectory_gap).collect::<Vec<_>>());
    let mut rates = vec![DimensionRates {
        dimension: 1,
        value_rate,
        w_rate,
        trajectory_rate,
    }];
    for dimension in [2, 3] {
        rates.push(DimensionRates {
            dimension,
            value_rate: None,
            w_rate: None,
            trajectory_rate: None,
        });
    }

    let report = ConvergenceReport {
        instance,
        n_list: params.n_list.clone(),
        rows,
        rates,
        total_wall_seconds: started.elapsed().as_secs_f64(),
    };
    report.check_invariants()?;
    Ok(report)
}

/// Persist the report as JSON plus one CSV per metric family.
pub fn write_convergence_report(dir: &Path, report: &ConvergenceReport) -> Result<()> {
    io::write_json(&dir.join("report.json"), report)?;
    let value_rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| vec![r.n_players as f64, r.value_gap])
        .collect();
    io::write_matrix_csv(&dir.join("value_gap.csv"), value_rows.iter().map(|r| r.as_slice()))?;
    let w_rows: Vec<Vec<f64>> =
        report.rows.iter().map(|r| vec![r.n_players as f64, r.w_gap]).collect();
    io::write_matrix_csv(&dir.join("w_gap.csv"), w_rows.iter().map(|r| r.as_slice()))?;
    let path_rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n_players as f64,
                r.trajectory_gap,
                r.trajectory_se,
                r.feedback_gap,
                r.feedback_se,
                r.start_value_gap,
                r.start_value_se,
            ]
        })
        .collect();
    io::write_matrix_csv(&dir.join("trajectories.csv"), path_rows.iter().map(|r| r.as_slice()))
}

pub fn read_convergence_report(dir: &Path) -> Result<ConvergenceReport> {
    let report: ConvergenceReport = io::read_json(&dir.join("report.json"))?;
    report.check_invariants()?;
    Ok(report)
}
