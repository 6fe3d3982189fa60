//! Coupled particle simulations behind the trajectory comparison. Each of N
//! players carries two positions driven by the same Brownian increments: Y
//! follows the feedback from the N-player value tensor, X follows the
//! feedback obtained by projecting the value field onto the empirical
//! measure of the other particles. Both are reflected at the walls, so the
//! dynamics never leave the domain.
//!
//! Reflection uses the folding map: fold the Euler proposal into `[lo, hi]`
//! by the even periodic extension of the interval. For constant diffusion
//! and zero drift the folded Gaussian is exactly the reflected transition
//! density (method of images), which one test exploits as an oracle. The
//! recorded `|k|` increments, the per-step folding distances, stand in for
//! the local time of the reflected process.
//!
//! Randomness is counter based: every normal increment comes from a fresh
//! generator seeded by hashing (seed, path, player, step), so ensembles are
//! reproducible bitwise regardless of how the paths are scheduled across
//! threads, and the two processes of a pair consume identical noise.
//!
//! The projected feedback needs `U(t, x_i, m_i)` along every path, which
//! would mean a mean field solve per particle per step. Instead the other
//! players' positions are quantized to the nearest grid nodes and the
//! resulting node-atom measures are solved once and cached; the own
//! coordinate stays continuous through interpolation of the cached gradient
//! field. The quantization bias is tied to the grid spacing and is covered
//! by the time-step refinement check.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, invariant, Error, Result};
use crate::grid::{gradient, interpolate, interpolate_tensor, Grid1D, GridMeasure, TimeGrid};
use crate::io;
use crate::master::MasterEvaluator;
use crate::model::{hamiltonian_eval, DiscreteModel};
use crate::nash::{projected_value, representative_coordinates, NashSolution};

/// Controls for [`simulate_coupled`].
#[derive(Clone, Copy, Debug)]
pub struct ParticleParams {
    pub n_paths: usize,
    pub seed: u64,
    /// Cap on the memory held by the ensemble arrays plus the per-step
    /// gradient tensors of the value field.
    pub memory_budget_bytes: usize,
}

impl Default for ParticleParams {
    fn default() -> Self {
        ParticleParams { n_paths: 2000, seed: 1, memory_budget_bytes: 2 << 30 }
    }
}

impl ParticleParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("need at least two paths for error estimates"));
        }
        Ok(())
    }
}

/// One Euler step with folding reflection. The proposal is
/// `x + drift dt + sqrt(2) sigma dW`; if it leaves `[lo, hi]` it is folded
/// back by even reflection at the walls, and the folding distance `|k|`
/// (zero for interior proposals) is returned alongside the new position.
pub fn reflect_step(
    x: f64,
    drift: f64,
    sigma: f64,
    dt: f64,
    dw: f64,
    bounds: (f64, f64),
) -> (f64, f64) {
    let (lo, hi) = bounds;
    let width = hi - lo;
    let star = x + drift * dt + std::f64::consts::SQRT_2 * sigma * dw;
    let mut folded = (star - lo).rem_euclid(2.0 * width);
    if folded > width {
        folded = 2.0 * width - folded;
    }
    let new_x = (lo + folded).clamp(lo, hi);
    (new_x, (star - new_x).abs())
}

fn stream_seed(seed: u64, path: u64, player: u64, step: u64) -> u64 {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&path.to_le_bytes());
    bytes[16..24].copy_from_slice(&player.to_le_bytes());
    bytes[24..].copy_from_slice(&step.to_le_bytes());
    io::hash_bytes(&bytes)
}

fn normal_increment(seed: u64, path: usize, player: usize, step: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, path as u64, player as u64, step as u64));
    rng.sample(StandardNormal)
}

/// Counter value reserved for the time-zero draws, so initial samples and
/// step increments never share a stream.
const INITIAL_DRAW: u64 = u64::MAX;

/// Draw `n_paths` configurations of `n_players` starting positions, i.i.d.
/// from the node-atom reading of `m0` (inverse transform over the weights).
/// Layout is path major: entry `path * n_players + player`.
pub fn sample_initial(
    n_players: usize,
    n_paths: usize,
    m0: &GridMeasure,
    grid: &Grid1D,
    seed: u64,
) -> Result<Vec<f64>> {
    if m0.len() != grid.n_cells {
        return Err(invalid("initial measure does not live on the grid"));
    }
    if n_players == 0 || n_paths == 0 {
        return Err(invalid("need at least one player and one path"));
    }
    let mut cumulative = Vec::with_capacity(grid.n_cells);
    let mut acc = 0.0;
    for &w in m0.weights() {
        acc += w;
        cumulative.push(acc);
    }
    let mut out = vec![0.0; n_paths * n_players];
    for path in 0..n_paths {
        for player in 0..n_players {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                seed,
                path as u64,
                player as u64,
                INITIAL_DRAW,
            ));
            let u: f64 = rng.gen();
            let node = cumulative.partition_point(|&c| c <= u).min(grid.n_cells - 1);
            out[path * n_players + player] = grid.nodes[node];
        }
    }
    Ok(out)
}

/// Paired trajectories of the two feedback systems, path major with layout
/// `(path, step, player)`. The fold logs hold cumulative reflection
/// distances and are nondecreasing along each path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub n_players: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub time_grid: TimeGrid,
    pub bounds: (f64, f64),
    /// Projected-feedback positions, length `n_paths (n_steps+1) n_players`.
    pub x: Vec<f64>,
    /// Value-tensor feedback positions, same layout as `x`.
    pub y: Vec<f64>,
    /// Drift applied to X over step k, length `n_paths n_steps n_players`.
    pub x_drift: Vec<f64>,
    /// Cumulative folding distance of X, same layout as `x`.
    pub x_fold: Vec<f64>,
    pub y_fold: Vec<f64>,
}

impl PathEnsemble {
    pub fn index(&self, path: usize, step: usize, player: usize) -> usize {
        (path * (self.time_grid.n_steps + 1) + step) * self.n_players + player
    }

    pub fn drift_index(&self, path: usize, step: usize, player: usize) -> usize {
        (path * self.time_grid.n_steps + step) * self.n_players + player
    }

    /// Positions of all players of one pair at one step.
    fn positions<'a>(&self, data: &'a [f64], path: usize, step: usize) -> &'a [f64] {
        let at = (path * (self.time_grid.n_steps + 1) + step) * self.n_players;
        &data[at..at + self.n_players]
    }

    pub fn check_invariants(&self) -> Result<()> {
        let (lo, hi) = self.bounds;
        let steps = self.time_grid.n_steps + 1;
        let expect = self.n_paths * steps * self.n_players;
        if self.x.len() != expect
            || self.y.len() != expect
            || self.x_fold.len() != expect
            || self.y_fold.len() != expect
            || self.x_drift.len() != self.n_paths * self.time_grid.n_steps * self.n_players
        {
            return Err(invariant("ensemble arrays have inconsistent lengths"));
        }
        for (arr, name) in [(&self.x, "X"), (&self.y, "Y")] {
            for &v in arr.iter() {
                if !(v >= lo && v <= hi) {
                    return Err(invariant(format!("{name} position {v} escaped [{lo}, {hi}]")));
                }
            }
        }
        for (arr, name) in [(&self.x_fold, "X"), (&self.y_fold, "Y")] {
            for path in 0..self.n_paths {
                for player in 0..self.n_players {
                    let mut prev = 0.0;
                    for step in 0..steps {
                        let v = arr[self.index(path, step, player)];
                        if !(v >= prev) {
                            return Err(invariant(format!(
                                "{name} fold log decreased on path {path}, player {player}"
                            )));
                        }
                        prev = v;
                    }
                }
            }
        }
        for path in 0..self.n_paths {
            for player in 0..self.n_players {
                let i = self.index(path, 0, player);
                if self.x[i].to_bits() != self.y[i].to_bits() {
                    return Err(invariant("paired paths start from different positions"));
                }
            }
        }
        if self.x_drift.iter().any(|v| !v.is_finite()) {
            return Err(invariant("non-finite drift recorded"));
        }
        Ok(())
    }

    /// Per-step summary rows: time, then for each player the mean squared
    /// X-Y gap and the mean cumulative folding distances of both processes.
    pub fn summary_rows(&self) -> Vec<Vec<f64>> {
        let steps = self.time_grid.n_steps + 1;
        let scale = 1.0 / self.n_paths as f64;
        (0..steps)
            .map(|k| {
                let mut row = vec![self.time_grid.time(k)];
                for player in 0..self.n_players {
                    let mut gap = 0.0;
                    let mut fx = 0.0;
                    let mut fy = 0.0;
                    for path in 0..self.n_paths {
                        let i = self.index(path, k, player);
                        let d = self.x[i] - self.y[i];
                        gap += d * d;
                        fx += self.x_fold[i];
                        fy += self.y_fold[i];
                    }
                    row.push(gap * scale);
                    row.push(fx * scale);
                    row.push(fy * scale);
                }
                row
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    n_players: usize,
    n_paths: usize,
    n_steps: usize,
    t_start: f64,
    t_end: f64,
    domain_lo: f64,
    domain_hi: f64,
    seed: u64,
}

/// Persist an ensemble as a flat binary block plus a JSON manifest.
pub fn write_ensemble(dir: &Path, stem: &str, ens: &PathEnsemble) -> Result<()> {
    let manifest = EnsembleManifest {
        n_players: ens.n_players,
        n_paths: ens.n_paths,
        n_steps: ens.time_grid.n_steps,
        t_start: ens.time_grid.t_start,
        t_end: ens.time_grid.t_end,
        domain_lo: ens.bounds.0,
        domain_hi: ens.bounds.1,
        seed: ens.seed,
    };
    io::write_json(&dir.join(format!("{stem}.json")), &manifest)?;
    let mut data =
        Vec::with_capacity(ens.x.len() * 4 + ens.x_drift.len());
    for block in [&ens.x, &ens.y, &ens.x_drift, &ens.x_fold, &ens.y_fold] {
        data.extend_from_slice(block);
    }
    let header = [
        ens.n_paths as u64,
        ens.n_players as u64,
        ens.time_grid.n_steps as u64,
        ens.seed,
    ];
    io::write_flat_binary(&dir.join(format!("{stem}.bin")), &header, &data)
}

pub fn read_ensemble(dir: &Path, stem: &str) -> Result<PathEnsemble> {
    let manifest: EnsembleManifest = io::read_json(&dir.join(format!("{stem}.json")))?;
    let (header, data) = io::read_flat_binary(&dir.join(format!("{stem}.bin")), 4)?;
    if header
        != [
            manifest.n_paths as u64,
            manifest.n_players as u64,
            manifest.n_steps as u64,
            manifest.seed,
        ]
    {
        return Err(invalid("ensemble manifest and binary header disagree"));
    }
    let per = manifest.n_paths * (manifest.n_steps + 1) * manifest.n_players;
    let drift_len = manifest.n_paths * manifest.n_steps * manifest.n_players;
    if data.len() != per * 4 + drift_len {
        return Err(invalid("ensemble binary has unexpected length"));
    }
    let x = data[..per].to_vec();
    let y = data[per..2 * per].to_vec();
    let x_drift = data[2 * per..2 * per + drift_len].to_vec();
    let x_fold = data[2 * per + drift_len..3 * per + drift_len].to_vec();
    let y_fold = data[3 * per + drift_len..].to_vec();
    let ens = PathEnsemble {
        n_players: manifest.n_players,
        n_paths: manifest.n_paths,
        seed: manifest.seed,
        time_grid: TimeGrid::new(manifest.t_start, manifest.t_end, manifest.n_steps)?,
        bounds: (manifest.domain_lo, manifest.domain_hi),
        x,
        y,
        x_drift,
        x_fold,
        y_fold,
    };
    ens.check_invariants()?;
    Ok(ens)
}

/// Write the per-step summary of [`PathEnsemble::summary_rows`] as CSV.
pub fn write_ensemble_summary(path: &Path, ens: &PathEnsemble) -> Result<()> {
    let rows = ens.summary_rows();
    io::write_matrix_csv(path, rows.iter().map(|r| r.as_slice()))
}

fn nearest_node(grid: &Grid1D, x: f64) -> usize {
    let (j, frac) = grid.locate(x);
    if frac >= 0.5 {
        j + 1
    } else {
        j
    }
}

/// Gradient fields of the projected value under quantized empirical
/// measures, filled lazily and shared across paths. The terminal slice falls
/// back to the terminal coupling, which is the value there by definition.
struct QuantizedFeedback<'a> {
    master: &'a MasterEvaluator,
    cache: RwLock<HashMap<(usize, Vec<usize>), Arc<Vec<f64>>>>,
}

impl QuantizedFeedback<'_> {
    fn gradient_field(&self, t_index: usize, mut others: Vec<usize>) -> Result<Arc<Vec<f64>>> {
        others.sort_unstable();
        let key = (t_index, others);
        if let Some(hit) = self.cache.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let grid = &self.master.model.grid;
        let mut weights = vec![0.0; grid.n_cells];
        let share = 1.0 / key.1.len() as f64;
        for &node in &key.1 {
            weights[node] += share;
        }
        let measure = GridMeasure::from_weights(weights)?;
        let field = if t_index == self.master.time_grid.n_steps {
            self.master.model.coupling_g(&measure)?
        } else {
            self.master.eval_u(t_index, &measure)?.u0
        };
        let grad = Arc::new(gradient(&field, grid));
        let mut writer = self.cache.write().unwrap();
        Ok(writer.entry(key).or_insert(grad).clone())
    }
}

struct PathTrack {
    x: Vec<f64>,
    y: Vec<f64>,
    x_drift: Vec<f64>,
    x_fold: Vec<f64>,
    y_fold: Vec<f64>,
}

/// Run the paired simulation: for every path, N players start from shared
/// draws of `m0` and evolve under the two feedbacks with common noise.
pub fn simulate_coupled(
    nash: &NashSolution,
    master: &MasterEvaluator,
    m0: &GridMeasure,
    params: &ParticleParams,
) -> Result<PathEnsemble> {
    params.validate()?;
    let model = &master.model;
    let grid = &model.grid;
    let n_players = nash.v.n_players;
    if nash.v.n_cells != grid.n_cells {
        return Err(invalid("player system and value field live on different grids"));
    }
    if nash.time_grid != master.time_grid {
        return Err(invalid("player system and value field use different time grids"));
    }
    if m0.len() != grid.n_cells {
        return Err(invalid("initial measure does not live on the model grid"));
    }
    let time_grid = master.time_grid.clone();
    let n_steps = time_grid.n_steps;
    let n_paths = params.n_paths;

    let per_array = n_paths
        .checked_mul(n_steps + 1)
        .and_then(|v| v.checked_mul(n_players))
        .ok_or_else(|| invalid("ensemble size overflows"))?;
    let tensors = (n_steps + 1)
        .checked_mul(nash.v.per_slice())
        .ok_or_else(|| invalid("gradient tensor size overflows"))?;
    let bytes = per_array
        .checked_mul(5)
        .and_then(|v| v.checked_add(tensors))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| invalid("ensemble size overflows"))?;
    if bytes > params.memory_budget_bytes {
        return Err(Error::Budget(format!(
            "ensemble needs {bytes} bytes, budget is {}",
            params.memory_budget_bytes
        )));
    }

    let grad_v: Vec<Vec<f64>> =
        (0..=n_steps).map(|k| nash.own_gradient_field(k, grid)).collect();
    let initial = sample_initial(n_players, n_paths, m0, grid, params.seed)?;
    let feedback = QuantizedFeedback { master, cache: RwLock::new(HashMap::new()) };
    let sqrt_dt = time_grid.dt.sqrt();
    let bounds = (grid.lo, grid.hi);

    let tracks: Vec<PathTrack> = (0..n_paths)
        .into_par_iter()
        .map(|path| -> Result<PathTrack> {
            let mut xs = initial[path * n_players..(path + 1) * n_players].to_vec();
            let mut ys = xs.clone();
            let mut track = PathTrack {
                x: vec![0.0; (n_steps + 1) * n_players],
                y: vec![0.0; (n_steps + 1) * n_players],
                x_drift: vec![0.0; n_steps * n_players],
                x_fold: vec![0.0; (n_steps + 1) * n_players],
                y_fold: vec![0.0; (n_steps + 1) * n_players],
            };
            track.x[..n_players].copy_from_slice(&xs);
            track.y[..n_players].copy_from_slice(&ys);
            let mut fold_x = vec![0.0; n_players];
            let mut fold_y = vec![0.0; n_players];
            let mut bx = vec![0.0; n_players];
            let mut by = vec![0.0; n_players];
            for k in 0..n_steps {
                for i in 0..n_players {
                    let others: Vec<usize> = (0..n_players)
                        .filter(|&j| j != i)
                        .map(|j| nearest_node(grid, xs[j]))
                        .collect();
                    let field = feedback.gradient_field(k, others)?;
                    let slope_x = interpolate(&field, grid, xs[i]);
                    let (_, hp_x, _) = hamiltonian_eval(&model.config, xs[i], slope_x)?;
                    bx[i] = -hp_x;

                    let coords = representative_coordinates(&ys, i);
                    let slope_y = interpolate_tensor(&grad_v[k], grid, n_players, &coords)?;
                    let (_, hp_y, _) = hamiltonian_eval(&model.config, ys[i], slope_y)?;
                    by[i] = -hp_y;
                }
                for i in 0..n_players {
                    let noise = normal_increment(params.seed, path, i, k);
                    let dw = sqrt_dt * noise;
                    let (new_x, dk_x) = reflect_step(
                        xs[i],
                        bx[i],
                        model.config.diffusion_at(xs[i]).sqrt(),
                        time_grid.dt,
                        dw,
                        bounds,
                    );
                    let (new_y, dk_y) = reflect_step(
                        ys[i],
                        by[i],
                        model.config.diffusion_at(ys[i]).sqrt(),
                        time_grid.dt,
                        dw,
                        bounds,
                    );
                    track.x_drift[k * n_players + i] = bx[i];
                    xs[i] = new_x;
                    ys[i] = new_y;
                    fold_x[i] += dk_x;
                    fold_y[i] += dk_y;
                }
                let at = (k + 1) * n_players;
                track.x[at..at + n_players].copy_from_slice(&xs);
                track.y[at..at + n_players].copy_from_slice(&ys);
                track.x_fold[at..at + n_players].copy_from_slice(&fold_x);
                track.y_fold[at..at + n_players].copy_from_slice(&fold_y);
            }
            Ok(track)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ens = PathEnsemble {
        n_players,
        n_paths,
        seed: params.seed,
        time_grid,
        bounds,
        x: Vec::with_capacity(per_array),
        y: Vec::with_capacity(per_array),
        x_drift: Vec::with_capacity(n_paths * n_steps * n_players),
        x_fold: Vec::with_capacity(per_array),
        y_fold: Vec::with_capacity(per_array),
    };
    for track in tracks {
        ens.x.extend_from_slice(&track.x);
        ens.y.extend_from_slice(&track.y);
        ens.x_drift.extend_from_slice(&track.x_drift);
        ens.x_fold.extend_from_slice(&track.x_fold);
        ens.y_fold.extend_from_slice(&track.y_fold);
    }
    ens.check_invariants()?;
    Ok(ens)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GapEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn mean_and_error(samples: &[f64]) -> GapEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    GapEstimate { value: mean, std_error: (var / n).sqrt() }
}

/// Per-player `sup_t E|X_t - Y_t|^2`. The error is a jackknife estimate over
/// paths of the whole sup statistic, since the maximizing slice can move
/// when a path is left out.
pub fn trajectory_gap(ens: &PathEnsemble) -> Vec<GapEstimate> {
    let n_paths = ens.n_paths;
    let slices = ens.time_grid.n_steps + 1;
    (0..ens.n_players)
        .map(|player| {
            let mut slice_sums = vec![0.0; slices];
            let mut squared = vec![0.0; n_paths * slices];
            for path in 0..n_paths {
                for k in 0..slices {
                    let i = ens.index(path, k, player);
                    let d = ens.x[i] - ens.y[i];
                    let d2 = d * d;
                    squared[path * slices + k] = d2;
                    slice_sums[k] += d2;
                }
            }
            let full = slice_sums.iter().fold(0.0_f64, |a, &s| a.max(s / n_paths as f64));
            let mut leave_one_out = vec![0.0; n_paths];
            for path in 0..n_paths {
                let mut worst = 0.0_f64;
                for k in 0..slices {
                    let rest = (slice_sums[k] - squared[path * slices + k])
                        / (n_paths - 1) as f64;
                    worst = worst.max(rest);
                }
                leave_one_out[path] = worst;
            }
            let mean = leave_one_out.iter().sum::<f64>() / n_paths as f64;
            let var = leave_one_out.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
                * (n_paths - 1) as f64
                / n_paths as f64;
            GapEstimate { value: full, std_error: var.sqrt() }
        })
        .collect()
}

/// How far the two feedbacks are from each other along the Y paths.
#[derive(Clone, Debug)]
pub struct FeedbackGap {
    /// Per player, `E int_0^T |D v - D u|^2 (t, Y_t) dt` by the trapezoid
    /// rule over the stored slices.
    pub control: Vec<GapEstimate>,
    /// Per player, `E |v(t_0, Z) - u(t_0, Z)|` at the shared start.
    pub value: Vec<GapEstimate>,
}

pub fn feedback_gap(
    ens: &PathEnsemble,
    nash: &NashSolution,
    master: &MasterEvaluator,
) -> Result<FeedbackGap> {
    let model = &master.model;
    let grid = &model.grid;
    let n_players = ens.n_players;
    if nash.v.n_players != n_players
        || nash.v.n_cells != grid.n_cells
        || nash.time_grid != ens.time_grid
        || master.time_grid != ens.time_grid
    {
        return Err(invalid("ensemble, player system and value field disagree"));
    }
    let n_steps = ens.time_grid.n_steps;
    let dt = ens.time_grid.dt;
    let grad_v: Vec<Vec<f64>> =
        (0..=n_steps).map(|k| nash.own_gradient_field(k, grid)).collect();
    let feedback = QuantizedFeedback { master, cache: RwLock::new(HashMap::new()) };

    let mut control = Vec::with_capacity(n_players);
    let mut value = Vec::with_capacity(n_players);
    for player in 0..n_players {
        let integrals: Vec<f64> = (0..ens.n_paths)
            .into_par_iter()
            .map(|path| -> Result<f64> {
                let mut acc = 0.0;
                for k in 0..=n_steps {
                    let ys = ens.positions(&ens.y, path, k);
                    let coords = representative_coordinates(ys, player);
                    let dv = interpolate_tensor(&grad_v[k], grid, n_players, &coords)?;
                    let others: Vec<usize> = (0..n_players)
                        .filter(|&j| j != player)
                        .map(|j| nearest_node(grid, ys[j]))
                        .collect();
                    let du =
                        interpolate(&feedback.gradient_field(k, others)?, grid, ys[player]);
                    let gap = (dv - du) * (dv - du);
                    let weight = if k == 0 || k == n_steps { 0.5 } else { 1.0 };
                    acc += weight * gap;
                }
                Ok(acc * dt)
            })
            .collect::<Result<Vec<_>>>()?;
        control.push(mean_and_error(&integrals));

        let start_gaps: Vec<f64> = (0..ens.n_paths)
            .map(|path| -> Result<f64> {
                let zs = ens.positions(&ens.x, path, 0);
                let u0 = projected_value(master, 0, zs, player)?;
                let coords = representative_coordinates(zs, player);
                let v0 = interpolate_tensor(nash.v.slice(0), grid, n_players, &coords)?;
                Ok((u0 - v0).abs())
            })
            .collect::<Result<Vec<_>>>()?;
        value.push(mean_and_error(&start_gaps));
    }
    Ok(FeedbackGap { control, value })
}

/// Outcome of one weak consistency check of the simulated dynamics.
#[derive(Clone, Copy, Debug)]
pub struct ItoCheck {
    /// `|E phi(X_T) - E phi(X_0) - E int (a phi'' + b phi') dt|`.
    pub defect: f64,
    pub std_error: f64,
}

/// Test the X process against the integrated generator identity for a node
/// field `phi`. For functions compatible with the zero-flux walls there is
/// no boundary term and the defect should vanish within Monte Carlo noise
/// plus a time-discretization remainder; functions with a nonzero normal
/// slope pick up the reflection and the defect survives.
pub fn ito_consistency_check(
    ens: &PathEnsemble,
    model: &DiscreteModel,
    phi: &[f64],
) -> Result<ItoCheck> {
    let grid = &model.grid;
    let n = grid.n_cells;
    if phi.len() != n {
        return Err(invalid("test function does not live on the grid"));
    }
    if (grid.lo, grid.hi) != ens.bounds {
        return Err(invalid("ensemble was generated on a different domain"));
    }
    // One-sided stencils at the walls, not mirrored ghosts: the ghosts would
    // silently impose the zero-flux condition on phi and hide exactly the
    // boundary defect this check exists to expose.
    let h = grid.h;
    let h2 = h * h;
    let mut slope = vec![0.0; n];
    let mut curvature = vec![0.0; n];
    slope[0] = (-3.0 * phi[0] + 4.0 * phi[1] - phi[2]) / (2.0 * h);
    slope[n - 1] = (3.0 * phi[n - 1] - 4.0 * phi[n - 2] + phi[n - 3]) / (2.0 * h);
    curvature[0] = (phi[0] - 2.0 * phi[1] + phi[2]) / h2;
    curvature[n - 1] = (phi[n - 1] - 2.0 * phi[n - 2] + phi[n - 3]) / h2;
    for i in 1..n - 1 {
        slope[i] = (phi[i + 1] - phi[i - 1]) / (2.0 * h);
        curvature[i] = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) / h2;
    }

    let dt = ens.time_grid.dt;
    let n_steps = ens.time_grid.n_steps;
    let per_path: Vec<f64> = (0..ens.n_paths)
        .map(|path| {
            let mut acc = 0.0;
            for player in 0..ens.n_players {
                let x0 = ens.x[ens.index(path, 0, player)];
                let xt = ens.x[ens.index(path, n_steps, player)];
                let mut generator = 0.0;
                for k in 0..n_steps {
                    let xk = ens.x[ens.index(path, k, player)];
                    let b = ens.x_drift[ens.drift_index(path, k, player)];
                    generator += model.config.diffusion_at(xk) * interpolate(&curvature, grid, xk)
                        + b * interpolate(&slope, grid, xk);
                }
                acc += interpolate(phi, grid, xt) - interpolate(phi, grid, x0)
                    - dt * generator;
            }
            acc / ens.n_players as f64
        })
        .collect();
    let estimate = mean_and_error(&per_path);
    Ok(ItoCheck { defect: estimate.value.abs(), std_error: estimate.std_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::mfg::MfgParams;
    use crate::model::{CouplingWeights, HamiltonianSpec, ModelConfig};
    use crate::nash::{solve_nash, NashParams};

    fn model_on(n_cells: usize, config: ModelConfig) -> DiscreteModel {
        let grid = build_grid(n_cells, (config.domain_lo, config.domain_hi)).unwrap();
        DiscreteModel::new(config, grid).unwrap()
    }

    fn small_setup(
        n_cells: usize,
        n_steps: usize,
        n_players: usize,
        config: ModelConfig,
    ) -> (NashSolution, MasterEvaluator) {
        let model = model_on(n_cells, config);
        let tg = TimeGrid::new(0.0, 0.5, n_steps).unwrap();
        let nash = solve_nash(&model, &tg, n_players, &NashParams::default()).unwrap();
        let master = MasterEvaluator::new(model, tg, MfgParams::default()).unwrap();
        (nash, master)
    }

    #[test]
    fn folding_reflection_matches_the_worked_example() {
        // Proposal 0.01 - 0.05 = -0.04 folds to 0.04 with |k| = 0.08.
        let (x, dk) = reflect_step(0.01, -0.5, 0.0, 0.1, 0.0, (0.0, 1.0));
        assert!((x - 0.04).abs() < 1e-15, "{x}");
        assert!((dk - 0.08).abs() < 1e-15, "{dk}");

        // Exactly representable numbers give exact results.
        let (x, dk) = reflect_step(0.25, -1.0, 0.0, 0.5, 0.0, (0.0, 1.0));
        assert_eq!(x, 0.25);
        assert_eq!(dk, 0.5);

        // Interior proposals move freely and log nothing.
        let (x, dk) = reflect_step(0.5, 0.25, 0.0, 1.0, 0.0, (0.0, 1.0));
        assert_eq!(x, 0.75);
        assert_eq!(dk, 0.0);

        // A proposal past the far wall folds twice.
        let (x, dk) = reflect_step(0.5, 1.8, 0.0, 1.0, 0.0, (0.0, 1.0));
        assert!((x - 0.3).abs() < 1e-15, "{x}");
        assert!((dk - 2.0).abs() < 1e-15, "{dk}");

        // Landing exactly on the wall is allowed.
        let (x, dk) = reflect_step(0.5, 0.5, 0.0, 1.0, 0.0, (0.0, 1.0));
        assert_eq!(x, 1.0);
        assert_eq!(dk, 0.0);
    }

    #[test]
    fn initial_samples_follow_the_measure() {
        let grid = build_grid(16, (0.0, 1.0)).unwrap();

        let point = GridMeasure::point_mass(&grid, 5).unwrap();
        let z = sample_initial(3, 40, &point, &grid, 9).unwrap();
        assert!(z.iter().all(|&v| v == grid.nodes[5]));

        let uniform = GridMeasure::uniform(&grid);
        let z = sample_initial(2, 4000, &uniform, &grid, 9).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        // Uniform over nodes has variance ~ 1/12; allow a three sigma band.
        let band = 3.0 * (1.0 / 12.0_f64).sqrt() / (z.len() as f64).sqrt();
        assert!((mean - 0.5).abs() <= band, "mean {mean} outside {band}");

        let again = sample_initial(2, 4000, &uniform, &grid, 9).unwrap();
        assert_eq!(z, again);
        let other = sample_initial(2, 4000, &uniform, &grid, 10).unwrap();
        assert_ne!(z, other);
    }

    #[test]
    fn coupled_paths_coincide_when_the_hamiltonian_is_off() {
        let config = ModelConfig {
            hamiltonian_spec: HamiltonianSpec::Constant { value: 0.0 },
            ..ModelConfig::default()
        };
        let (nash, master) = small_setup(12, 10, 2, config);
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params = ParticleParams { n_paths: 40, seed: 3, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        // Both feedbacks vanish, so the pairs ride the same reflected noise.
        assert_eq!(ens.x, ens.y);
        assert_eq!(ens.x_fold, ens.y_fold);
        for gap in trajectory_gap(&ens) {
            assert_eq!(gap.value, 0.0);
            assert_eq!(gap.std_error, 0.0);
        }
        assert!(ens.x_drift.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn paths_stay_inside_the_domain_and_log_reflections() {
        let (nash, master) = small_setup(16, 20, 2, ModelConfig::default());
        let grid = master.model.grid.clone();
        let m0 = GridMeasure::uniform(&grid);
        let params = ParticleParams { n_paths: 50, seed: 5, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        ens.check_invariants().unwrap();
        // A uniform start keeps some particles near the walls, so this run
        // must fold at least once.
        let total: f64 = ens.x_fold.iter().sum();
        assert!(total > 0.0, "no reflections in a wall-hugging run");

        // A short run from the middle never reaches a wall and logs nothing.
        let center = GridMeasure::point_mass(&grid, 8).unwrap();
        let tg = TimeGrid::new(0.0, 0.015, 3).unwrap();
        let model = model_on(16, ModelConfig::default());
        let nash_short = solve_nash(&model, &tg, 2, &NashParams::default()).unwrap();
        let master_short = MasterEvaluator::new(model, tg, MfgParams::default()).unwrap();
        let quiet = simulate_coupled(&nash_short, &master_short, &center, &params).unwrap();
        assert!(quiet.x_fold.iter().chain(quiet.y_fold.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn identical_seeds_reproduce_the_ensemble_bitwise() {
        let (nash, master) = small_setup(12, 8, 3, ModelConfig::default());
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params = ParticleParams { n_paths: 20, seed: 11, ..ParticleParams::default() };
        let a = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        let b = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        assert_eq!(a, b);
        // And the run is not degenerate: players actually move.
        assert!(a.x.iter().any(|&v| v != a.x[0]));
    }

    #[test]
    fn memory_budget_is_checked_before_simulating() {
        let (nash, master) = small_setup(12, 8, 2, ModelConfig::default());
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params =
            ParticleParams { n_paths: 50, seed: 1, memory_budget_bytes: 1024 };
        let err = simulate_coupled(&nash, &master, &m0, &params).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn ensemble_round_trips_through_disk() {
        let (nash, master) = small_setup(12, 6, 2, ModelConfig::default());
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params = ParticleParams { n_paths: 8, seed: 2, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_ensemble(dir.path(), "pair", &ens).unwrap();
        let back = read_ensemble(dir.path(), "pair").unwrap();
        assert_eq!(ens, back);
        write_ensemble_summary(&dir.path().join("summary.csv"), &ens).unwrap();
        let rows = io::read_matrix_csv(&dir.path().join("summary.csv")).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].len(), 1 + 3 * 2);
    }

    #[test]
    fn reflected_walk_reproduces_the_neumann_eigenfunction_decay() {
        // With zero drift and constant diffusion the folded Gaussian is the
        // exact reflected transition density, so cos(pi x) must decay with
        // the first Neumann eigenvalue a pi^2 up to Monte Carlo noise only.
        let a = 0.1_f64;
        let dt = 0.01_f64;
        let n_steps = 50usize;
        let x0 = 0.3_f64;
        let n_paths = 4000usize;
        let mut samples = Vec::with_capacity(n_paths);
        for path in 0..n_paths {
            let mut x = x0;
            for k in 0..n_steps {
                let dw = dt.sqrt() * normal_increment(77, path, 0, k);
                let (next, _) = reflect_step(x, 0.0, a.sqrt(), dt, dw, (0.0, 1.0));
                x = next;
            }
            samples.push((std::f64::consts::PI * x).cos());
        }
        let est = mean_and_error(&samples);
        let horizon = dt * n_steps as f64;
        let exact = (-a * std::f64::consts::PI.powi(2) * horizon).exp()
            * (std::f64::consts::PI * x0).cos();
        assert!(
            (est.value - exact).abs() <= 3.5 * est.std_error,
            "decay {} vs exact {exact}, se {}",
            est.value,
            est.std_error
        );
    }

    #[test]
    fn ito_identity_holds_for_compatible_functions_and_flags_a_violator() {
        let (nash, master) = small_setup(24, 50, 2, ModelConfig::default());
        let grid = master.model.grid.clone();
        // Start near the left wall so reflections contribute visibly.
        let m0 = GridMeasure::point_mass(&grid, 2).unwrap();
        let params = ParticleParams { n_paths: 600, seed: 21, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        let model = &master.model;

        let pi = std::f64::consts::PI;
        for waves in [1.0, 2.0] {
            let phi: Vec<f64> = grid.nodes.iter().map(|&x| (waves * pi * x).cos()).collect();
            let check = ito_consistency_check(&ens, model, &phi).unwrap();
            assert!(
                check.defect <= 3.0 * check.std_error + 0.02,
                "wave {waves}: defect {} vs se {}",
                check.defect,
                check.std_error
            );
        }

        // The identity must fail for a slope through the wall: the defect is
        // the mean reflection displacement, far outside the noise band.
        let linear: Vec<f64> = grid.nodes.clone();
        let check = ito_consistency_check(&ens, model, &linear).unwrap();
        assert!(
            check.defect > 5.0 * check.std_error,
            "linear defect {} vs se {}",
            check.defect,
            check.std_error
        );
    }

    #[test]
    fn halving_the_time_step_leaves_the_gap_within_noise() {
        // The trajectory gap is a property of the continuous pair, so the
        // time discretization should only move it within its own noise band.
        let gap_at = |n_steps: usize| {
            let (nash, master) = small_setup(16, n_steps, 2, ModelConfig::default());
            let m0 = GridMeasure::uniform(&master.model.grid);
            let params =
                ParticleParams { n_paths: 300, seed: 13, ..ParticleParams::default() };
            let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
            trajectory_gap(&ens)[0]
        };
        let coarse = gap_at(25);
        let fine = gap_at(50);
        let band = 3.0 * (coarse.std_error + fine.std_error);
        assert!(
            (coarse.value - fine.value).abs() <= band,
            "gap moved from {} to {} with band {band}",
            coarse.value,
            fine.value
        );
        assert!(coarse.value > 0.0 && fine.value > 0.0);
    }

    #[test]
    fn feedback_gap_reports_positive_and_finite_estimates() {
        let (nash, master) = small_setup(16, 20, 2, ModelConfig::default());
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params = ParticleParams { n_paths: 60, seed: 17, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        let gap = feedback_gap(&ens, &nash, &master).unwrap();
        assert_eq!(gap.control.len(), 2);
        for est in gap.control.iter().chain(gap.value.iter()) {
            assert!(est.value.is_finite() && est.value >= 0.0);
            assert!(est.std_error.is_finite());
        }
        // The two feedbacks genuinely differ at finite N.
        assert!(gap.control[0].value > 0.0);
    }

    #[test]
    fn null_couplings_make_both_feedbacks_agree() {
        let config = ModelConfig {
            coupling_weights: CouplingWeights { c_f: 0.0, c_g: 0.0 },
            ..ModelConfig::default()
        };
        let (nash, master) = small_setup(12, 10, 2, config);
        let m0 = GridMeasure::uniform(&master.model.grid);
        let params = ParticleParams { n_paths: 30, seed: 4, ..ParticleParams::default() };
        let ens = simulate_coupled(&nash, &master, &m0, &params).unwrap();
        // Zero data makes both value functions vanish identically, so the
        // particles agree and every gap is exactly zero.
        assert_eq!(ens.x, ens.y);
        let gap = feedback_gap(&ens, &nash, &master).unwrap();
        for est in gap.control.iter().chain(gap.value.iter()) {
            assert_eq!(est.value, 0.0);
        }
    }
}
