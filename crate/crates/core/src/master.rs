//! The value of the game as a function of the initial condition:
//!
//! ```text
//! U(t0, x, m0) = u(t0, x),   (u, m) solving the game system on [t0, T]
//! ```
//!
//! together with its derivative in the measure argument. The derivative in
//! direction `rho0` is obtained from the linearization of the game system
//! around the equilibrium `(u, m)`:
//!
//! ```text
//! -z_t - a z_xx + H_p(x, u_x) z_x = dF(x, m)(rho) + h,   z(T) = dG(x, m(T))(rho(T)),
//!  rho_t - (a rho)_xx - (rho H_p)_x - (m H_pp z_x + c)_x = 0,   rho(t0) = rho0,
//! ```
//!
//! with total zero-flux boundary conditions, so the signed mass of `rho` is
//! an invariant of the sweep. Then `z(t0, .)` is the first variation of `U`
//! along `rho0`.
//!
//! Two derived quantities are built on top:
//!
//! * `measure_derivative`: variation along `mollify(e_y) - m0`, a regularized
//!   point perturbation at node `y`. Pairing these fields against any
//!   probability measure reproduces the variation toward that measure,
//!   because the variation along `m0` itself vanishes (the coupling
//!   derivatives are normalized against `m0`).
//! * `intrinsic_derivative`: the `y`-difference quotient of the above, the
//!   object that projects to per-player gradients and drives the optimal
//!   drift of a single representative player.
//!
//! Every distinct `(t0, m0)` keys a full equilibrium solve, so evaluations
//! are memoized in memory and, optionally, on disk.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use crate::error::{invalid, numerical, Result};
use crate::grid::{
    deposit_linear, fokker_planck_diffusion_matrix, gradient, GridMeasure, SpaceTimeField,
    TimeGrid,
};
use crate::io;
use crate::mfg::{solve_mfg, MfgParams, MfgSolution};
use crate::mfg::BackwardStepper;
use crate::model::DiscreteModel;

/// Extra right hand sides for [`solve_linearized`]. All default to zero;
/// `flux_source` enters the distribution equation inside the flux divergence
/// and is given in density-flux units (same units as `a * density_x`).
#[derive(Clone, Copy, Default)]
pub struct LinearizedSources<'a> {
    pub value_source: Option<&'a SpaceTimeField>,
    pub flux_source: Option<&'a SpaceTimeField>,
    pub terminal: Option<&'a [f64]>,
}

/// Solution of the linearized system around a base equilibrium.
#[derive(Clone, Debug)]
pub struct LinearizedSolution {
    /// Value perturbation over `(time, node)`; slice 0 is the derivative field.
    pub z: SpaceTimeField,
    /// Signed weight perturbation over `(time, node)`.
    pub rho: SpaceTimeField,
    pub iterations_used: usize,
    pub final_gap: f64,
}

/// Slice-by-slice data of the base equilibrium that both linearized sweeps
/// consume: Hamiltonian slopes at the nodes for the backward transport, and
/// face velocities with their sensitivities for the forward operator.
struct BaseLinearization {
    hp: SpaceTimeField,
    velocity: Vec<Vec<f64>>,
    /// `H_pp` at the face slope: the derivative of the face velocity with
    /// respect to the slope, per slice and face.
    velocity_slope: Vec<Vec<f64>>,
    vmax: Vec<f64>,
}

impl BaseLinearization {
    fn new(model: &DiscreteModel, base: &MfgSolution) -> Self {
        let n = model.grid.n_cells;
        let h = model.grid.h;
        let n_slices = base.time_grid.n_steps + 1;
        let mut hp = SpaceTimeField::zeros(n_slices, n);
        let mut velocity = Vec::with_capacity(n_slices);
        let mut velocity_slope = Vec::with_capacity(n_slices);
        let mut vmax = Vec::with_capacity(n_slices);
        for k in 0..n_slices {
            let u_k = base.u.slice(k);
            let du = gradient(u_k, &model.grid);
            for i in 0..n {
                let (_, p1, _) = model.hamiltonian_at_node(i, du[i]);
                hp.slice_mut(k)[i] = p1;
            }
            let mut vel = vec![0.0; n - 1];
            let mut slope = vec![0.0; n - 1];
            let mut vm = 0.0_f64;
            for f in 0..n - 1 {
                let p = (u_k[f + 1] - u_k[f]) / h;
                let c = 0.5 * (model.c_h[f] + model.c_h[f + 1]);
                let (_, p1, p2) = crate::model::hamiltonian_raw(c, p);
                vel[f] = -p1;
                slope[f] = p2;
                vm = vm.max(p1.abs());
            }
            velocity.push(vel);
            velocity_slope.push(slope);
            vmax.push(vm);
        }
        BaseLinearization { hp, velocity, velocity_slope, vmax }
    }
}

/// Solves the linearized system by the same damped fixed-point iteration as
/// the nonlinear solver, iterating on the signed perturbation path. The map
/// is affine, so the converged point is linear in `(rho0, sources)`.
pub fn solve_linearized(
    model: &DiscreteModel,
    base: &MfgSolution,
    rho0: &[f64],
    sources: &LinearizedSources,
    params: &MfgParams,
) -> Result<LinearizedSolution> {
    params.validate()?;
    let n = model.grid.n_cells;
    let tg = &base.time_grid;
    let n_slices = tg.n_steps + 1;
    if rho0.len() != n || base.u.n_nodes != n || base.m.len() != n_slices {
        return Err(invalid("base solution or direction does not match the model grid"));
    }
    for field in [sources.value_source, sources.flux_source].into_iter().flatten() {
        if field.n_slices != n_slices || field.n_nodes != n {
            return Err(invalid("source field does not match the grids"));
        }
    }
    if sources.terminal.map_or(false, |t| t.len() != n) {
        return Err(invalid("terminal perturbation does not match the grid"));
    }

    let lin = BaseLinearization::new(model, base);
    let mut rho = SpaceTimeField::from_fn(n_slices, n, |_, i| rho0[i]);
    let mut omega = params.damping;
    let mut prev_residual: Option<Vec<f64>> = None;
    let mut final_gap = f64::INFINITY;

    for iteration in 1..=params.max_iter {
        let z = linearized_backward(model, base, &lin, &rho, sources)?;
        let fresh = linearized_forward(model, base, &lin, rho0, &z, sources.flux_source)?;

        let residual: Vec<f64> =
            fresh.data().iter().zip(rho.data()).map(|(a, b)| a - b).collect();
        let mut raw_gap = 0.0_f64;
        for k in 0..n_slices {
            let l1: f64 = residual[k * n..(k + 1) * n].iter().map(|d| d.abs()).sum();
            raw_gap = raw_gap.max(l1);
        }
        let accept_raw = raw_gap <= params.tol;

        if !accept_raw {
            // Dynamic relaxation on the residual pair, as in the nonlinear
            // solver; the map is affine, so the weight settles quickly.
            if let Some(prev) = &prev_residual {
                let mut num = 0.0;
                let mut den = 0.0;
                for (r_prev, r) in prev.iter().zip(&residual) {
                    let dr = r - r_prev;
                    num += r_prev * dr;
                    den += dr * dr;
                }
                if den > 0.0 {
                    omega = (-omega * num / den).clamp(0.05, 1.0);
                }
            }
            prev_residual = Some(residual.clone());
        }
        let mix = if accept_raw { 1.0 } else { omega };

        let mut gap = 0.0_f64;
        let mut next = SpaceTimeField::zeros(n_slices, n);
        for k in 0..n_slices {
            let mut l1 = 0.0;
            for i in 0..n {
                let old = rho.slice(k)[i];
                let new = old + mix * residual[k * n + i];
                next.slice_mut(k)[i] = new;
                l1 += (new - old).abs();
            }
            gap = gap.max(l1);
        }
        rho = next;
        final_gap = gap.min(raw_gap);

        if accept_raw || gap <= params.tol {
            let z = linearized_backward(model, base, &lin, &rho, sources)?;
            return Ok(LinearizedSolution { z, rho, iterations_used: iteration, final_gap });
        }
    }

    Err(numerical(format!(
        "linearized fixed point did not reach tol {} in {} iterations (last gap {final_gap:.3e})",
        params.tol, params.max_iter
    )))
}

fn linearized_backward(
    model: &DiscreteModel,
    base: &MfgSolution,
    lin: &BaseLinearization,
    rho: &SpaceTimeField,
    sources: &LinearizedSources,
) -> Result<SpaceTimeField> {
    let n = model.grid.n_cells;
    let tg = &base.time_grid;
    let stepper = BackwardStepper::new(model, tg.dt)?;
    let mut z = SpaceTimeField::zeros(tg.n_steps + 1, n);

    let mut terminal = model.delta_g_action(&base.m[tg.n_steps], rho.slice(tg.n_steps))?;
    if let Some(extra) = sources.terminal {
        for (t, e) in terminal.iter_mut().zip(extra) {
            *t += e;
        }
    }
    z.slice_mut(tg.n_steps).copy_from_slice(&terminal);

    for k in (0..tg.n_steps).rev() {
        let next = z.slice(k + 1).to_vec();
        let dz = gradient(&next, &model.grid);
        let df = model.delta_f_action(&base.m[k + 1], rho.slice(k + 1))?;
        let hp = lin.hp.slice(k + 1);
        let mut explicit = vec![0.0; n];
        for i in 0..n {
            let extra = sources.value_source.map_or(0.0, |s| s.slice(k + 1)[i]);
            explicit[i] = -hp[i] * dz[i] + df[i] + extra;
        }
        let step = stepper.step(&next, &explicit)?;
        z.slice_mut(k).copy_from_slice(&step);
    }
    if !z.all_finite() {
        return Err(numerical("linearized backward sweep produced non-finite values"));
    }
    Ok(z)
}

/// Forward sweep for the signed perturbation: the exact linearization of the
/// nonlinear forward operator. The upwinded advective flux `v(u) w_up / h`
/// contributes two terms, transport of the perturbation by the base velocity
/// (with the upwind side frozen at the base sign) and transport of the base
/// weights by the velocity perturbation `-H_pp(face slope) z_x`. Boundary
/// faces carry no flux of any kind, so the total signed mass is preserved
/// exactly; no clipping is applied.
fn linearized_forward(
    model: &DiscreteModel,
    base: &MfgSolution,
    lin: &BaseLinearization,
    rho0: &[f64],
    z: &SpaceTimeField,
    flux_source: Option<&SpaceTimeField>,
) -> Result<SpaceTimeField> {
    let n = model.grid.n_cells;
    let h = model.grid.h;
    let tg = &base.time_grid;
    let diffusion = fokker_planck_diffusion_matrix(&model.grid, &model.a)?;
    let nominal = diffusion.identity_minus_scaled(tg.dt);

    let mut rho = SpaceTimeField::zeros(tg.n_steps + 1, n);
    rho.slice_mut(0).copy_from_slice(rho0);
    let mut w = rho0.to_vec();

    for k in 0..tg.n_steps {
        let velocity = &lin.velocity[k];
        let m_k = base.m[k].weights();
        let z_k = z.slice(k);
        // Velocity perturbation times the upwinded base weights, plus any
        // external flux source averaged onto the face. Fixed over substeps,
        // like the velocities themselves.
        let mut injection = vec![0.0; n - 1];
        for f in 0..n - 1 {
            let dz_face = (z_k[f + 1] - z_k[f]) / h;
            let dv = -lin.velocity_slope[k][f] * dz_face;
            let m_up = if velocity[f] >= 0.0 { m_k[f] } else { m_k[f + 1] };
            let extra =
                flux_source.map_or(0.0, |s| 0.5 * (s.slice(k)[f] + s.slice(k)[f + 1]));
            injection[f] = dv * m_up / h - extra;
        }

        let cfl = tg.dt * lin.vmax[k] / h;
        let n_sub = if cfl > 1.0 { (cfl / 0.9).ceil() as usize } else { 1 };
        let dt_sub = tg.dt / n_sub as f64;
        let system =
            if n_sub == 1 { nominal.clone() } else { diffusion.identity_minus_scaled(dt_sub) };

        for _ in 0..n_sub {
            let mut flux = vec![0.0; n - 1];
            for f in 0..n - 1 {
                let upwind = if velocity[f] >= 0.0 { w[f] } else { w[f + 1] };
                flux[f] = velocity[f] * upwind / h + injection[f];
            }
            let mut star = w.clone();
            for i in 0..n {
                let right = if i + 1 < n { flux[i] } else { 0.0 };
                let left = if i > 0 { flux[i - 1] } else { 0.0 };
                star[i] -= dt_sub * (right - left);
            }
            w = system.solve(&star)?;
        }
        rho.slice_mut(k + 1).copy_from_slice(&w);
    }
    if !rho.all_finite() {
        return Err(numerical("linearized forward sweep produced non-finite values"));
    }
    Ok(rho)
}

/// One evaluation of the value field at `(t0, m0)`.
#[derive(Clone, Debug)]
pub struct MasterEvaluation {
    pub t0: f64,
    pub t0_index: usize,
    /// `U(t0, ., m0)` on the nodes.
    pub u0: Vec<f64>,
    /// The equilibrium bundle behind the value, for provenance.
    pub solution: Arc<MfgSolution>,
}

/// Expansion defect of one deterministic shift of the population.
#[derive(Clone, Copy, Debug)]
pub struct PushforwardReport {
    /// `sup_x |U(t0, x, shifted m0) - U(t0, x, m0) - correction(x)|`.
    pub defect: f64,
    /// Sup norm of the first-order correction term.
    pub correction_sup: f64,
    /// Sup norm of the actual value shift.
    pub value_shift_sup: f64,
    /// `L^2(m0)` size of the displacement field.
    pub displacement_l2: f64,
}

/// Memoizing evaluator for the value field and its measure derivatives.
///
/// Evaluations with the same initial time index and the same weight vector
/// (bit-for-bit) share one equilibrium solve. An optional disk directory
/// persists solves across processes; entries are keyed by a hash of the full
/// model configuration, so different models can share a directory.
pub struct MasterEvaluator {
    pub model: DiscreteModel,
    pub time_grid: TimeGrid,
    pub params: MfgParams,
    config_hash: u64,
    solutions: RwLock<HashMap<(usize, u64), Arc<MfgSolution>>>,
    derivatives: RwLock<HashMap<(usize, u64, usize), Arc<Vec<f64>>>>,
    disk: Option<PathBuf>,
}

impl MasterEvaluator {
    pub fn new(model: DiscreteModel, time_grid: TimeGrid, params: MfgParams) -> Result<Self> {
        params.validate()?;
        let mut key_bytes = serde_json::to_vec(&model.config)?;
        for v in [
            model.grid.lo,
            model.grid.hi,
            model.grid.n_cells as f64,
            time_grid.t_start,
            time_grid.t_end,
            time_grid.n_steps as f64,
            params.tol,
            params.damping,
            params.max_iter as f64,
        ] {
            key_bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        Ok(MasterEvaluator {
            model,
            time_grid,
            params,
            config_hash: io::hash_bytes(&key_bytes),
            solutions: RwLock::new(HashMap::new()),
            derivatives: RwLock::new(HashMap::new()),
            disk: None,
        })
    }

    /// Enables the on-disk cache rooted at `dir` (created if missing).
    pub fn with_disk_cache(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        self.disk = Some(dir);
        Ok(self)
    }

    /// Maps a time on the grid to its slice index. The initial time must lie
    /// strictly before the horizon, since an evaluation needs at least one
    /// step to solve over.
    pub fn time_index(&self, t0: f64) -> Result<usize> {
        let tg = &self.time_grid;
        let rel = (t0 - tg.t_start) / tg.dt;
        let k = rel.round();
        if k < 0.0 || k >= tg.n_steps as f64 {
            return Err(invalid(format!(
                "initial time {t0} outside [{}, {})",
                tg.t_start, tg.t_end
            )));
        }
        let k = k as usize;
        if (t0 - tg.time(k)).abs() > 1e-6 * tg.dt {
            return Err(invalid(format!("initial time {t0} does not lie on the time grid")));
        }
        Ok(k)
    }

    pub fn cached_solutions(&self) -> usize {
        self.solutions.read().unwrap().len()
    }

    fn stem(&self, t0_index: usize, m_hash: u64) -> String {
        format!("mfg_{:016x}_k{:04}_m{:016x}", self.config_hash, t0_index, m_hash)
    }

    /// The equilibrium behind `U(t0, ., m0)`, shared through the cache.
    pub fn solve_from(&self, t0_index: usize, m0: &GridMeasure) -> Result<Arc<MfgSolution>> {
        if m0.len() != self.model.grid.n_cells {
            return Err(invalid("initial measure does not live on the model grid"));
        }
        let key = (t0_index, io::hash_f64s(m0.weights()));
        if let Some(hit) = self.solutions.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let suffix = self.time_grid.suffix(t0_index)?;
        if let Some(dir) = &self.disk {
            let stem = self.stem(t0_index, key.1);
            if dir.join(format!("{stem}.json")).exists() {
                match io::read_mfg_solution(dir, &stem) {
                    Ok(sol)
                        if sol.u.n_nodes == self.model.grid.n_cells
                            && sol.time_grid.n_steps == suffix.n_steps
                            && (sol.time_grid.t_start - suffix.t_start).abs() < 1e-12 =>
                    {
                        let sol = Arc::new(sol);
                        self.solutions.write().unwrap().insert(key, sol.clone());
                        return Ok(sol);
                    }
                    _ => log::warn!("ignoring unusable cache entry {stem}"),
                }
            }
        }
        let sol = Arc::new(solve_mfg(&self.model, &suffix, m0, &self.params)?);
        if let Some(dir) = &self.disk {
            let stem = self.stem(t0_index, key.1);
            if let Err(e) = io::write_mfg_solution(dir, &stem, &sol) {
                log::warn!("failed to persist cache entry {stem}: {e}");
            }
        }
        self.solutions.write().unwrap().insert(key, sol.clone());
        Ok(sol)
    }

    pub fn eval_u(&self, t0_index: usize, m0: &GridMeasure) -> Result<MasterEvaluation> {
        let solution = self.solve_from(t0_index, m0)?;
        Ok(MasterEvaluation {
            t0: self.time_grid.time(t0_index),
            t0_index,
            u0: solution.u.slice(0).to_vec(),
            solution,
        })
    }

    /// First variation of `U(t0, ., .)` at `m0` toward the probability
    /// measure `mu0`, which equals the variation along `mu0 - m0`.
    pub fn direction_derivative(
        &self,
        t0_index: usize,
        m0: &GridMeasure,
        mu0: &GridMeasure,
    ) -> Result<Vec<f64>> {
        let base = self.solve_from(t0_index, m0)?;
        let rho0: Vec<f64> =
            mu0.weights().iter().zip(m0.weights()).map(|(a, b)| a - b).collect();
        let lin = solve_linearized(
            &self.model,
            &base,
            &rho0,
            &LinearizedSources::default(),
            &self.params,
        )?;
        Ok(lin.z.slice(0).to_vec())
    }

    /// Variation field along a regularized point perturbation at node `y`,
    /// as a function of `x`. Cached per `(t0, m0, y)`.
    pub fn measure_derivative(
        &self,
        t0_index: usize,
        m0: &GridMeasure,
        y: usize,
    ) -> Result<Arc<Vec<f64>>> {
        let n = self.model.grid.n_cells;
        if y >= n {
            return Err(invalid(format!("perturbation node {y} outside grid of {n} cells")));
        }
        let key = (t0_index, io::hash_f64s(m0.weights()), y);
        if let Some(hit) = self.derivatives.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let base = self.solve_from(t0_index, m0)?;
        let mut bump = vec![0.0; n];
        bump[y] = 1.0;
        let bump = self.model.mollify(&bump)?;
        let rho0: Vec<f64> = bump.iter().zip(m0.weights()).map(|(b, m)| b - m).collect();
        let lin = solve_linearized(
            &self.model,
            &base,
            &rho0,
            &LinearizedSources::default(),
            &self.params,
        )?;
        let field = Arc::new(lin.z.slice(0).to_vec());
        self.derivatives.write().unwrap().insert(key, field.clone());
        Ok(field)
    }

    /// Difference quotient of [`Self::measure_derivative`] in the
    /// perturbation node, centered in the interior and one-sided at the
    /// boundary nodes. This is the derivative that enters the per-player
    /// gradient projection and the representative player's drift.
    pub fn intrinsic_derivative(
        &self,
        t0_index: usize,
        m0: &GridMeasure,
        y: usize,
    ) -> Result<Vec<f64>> {
        let n = self.model.grid.n_cells;
        if y >= n {
            return Err(invalid(format!("perturbation node {y} outside grid of {n} cells")));
        }
        let h = self.model.grid.h;
        let (lo, hi, scale) = if y == 0 {
            (0, 1, h)
        } else if y == n - 1 {
            (n - 2, n - 1, h)
        } else {
            (y - 1, y + 1, 2.0 * h)
        };
        let f_lo = self.measure_derivative(t0_index, m0, lo)?;
        let f_hi = self.measure_derivative(t0_index, m0, hi)?;
        Ok(f_hi.iter().zip(f_lo.iter()).map(|(a, b)| (a - b) / scale).collect())
    }

    /// Full variation kernel over `(x, y)` as a row-major `n x n` matrix.
    /// Runs one linearized solve per column, in parallel. The rows pair to
    /// zero against `m0` up to the point-perturbation mollification, since
    /// the variation along `m0` itself vanishes.
    pub fn delta_u_kernel(&self, t0_index: usize, m0: &GridMeasure) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let n = self.model.grid.n_cells;
        self.solve_from(t0_index, m0)?;
        let columns: Vec<Arc<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|y| self.measure_derivative(t0_index, m0, y))
            .collect::<Result<_>>()?;
        let mut kernel = vec![0.0; n * n];
        for (y, col) in columns.iter().enumerate() {
            for x in 0..n {
                kernel[x * n + y] = col[x];
            }
        }
        Ok(kernel)
    }

    /// Compares the value at a deterministically shifted population against
    /// the first-order expansion in the displacement field `phi`:
    ///
    /// ```text
    /// U(t0, x, (id + phi)#m0) - U(t0, x, m0) - sum_y m0(y) phi(y) D_y[dU](x, y)
    /// ```
    ///
    /// For smooth data the defect is quadratic in the displacement size.
    pub fn pushforward_expansion_check(
        &self,
        t0_index: usize,
        m0: &GridMeasure,
        phi: &[f64],
    ) -> Result<PushforwardReport> {
        let n = self.model.grid.n_cells;
        let grid = &self.model.grid;
        if phi.len() != n {
            return Err(invalid("displacement field does not live on the model grid"));
        }
        let mut shifted = vec![0.0; n];
        let mut displacement_sq = 0.0;
        for (i, (&w, &d)) in m0.weights().iter().zip(phi).enumerate() {
            if w == 0.0 {
                continue;
            }
            let x = grid.nodes[i] + d;
            if !grid.contains(x) {
                return Err(invalid(format!(
                    "displacement moves node {i} to {x}, outside the domain"
                )));
            }
            deposit_linear(&mut shifted, grid, x, w);
            displacement_sq += w * d * d;
        }
        let shifted = GridMeasure::from_weights(shifted)?;

        let base = self.eval_u(t0_index, m0)?;
        let pushed = self.eval_u(t0_index, &shifted)?;

        let mut correction = vec![0.0; n];
        for (y, (&w, &d)) in m0.weights().iter().zip(phi).enumerate() {
            if w * d == 0.0 {
                continue;
            }
            let dmu = self.intrinsic_derivative(t0_index, m0, y)?;
            for (c, g) in correction.iter_mut().zip(&dmu) {
                *c += w * d * g;
            }
        }

        let mut defect = 0.0_f64;
        let mut shift_sup = 0.0_f64;
        let mut corr_sup = 0.0_f64;
        for i in 0..n {
            let shift = pushed.u0[i] - base.u0[i];
            defect = defect.max((shift - correction[i]).abs());
            shift_sup = shift_sup.max(shift.abs());
            corr_sup = corr_sup.max(correction[i].abs());
        }
        Ok(PushforwardReport {
            defect,
            correction_sup: corr_sup,
            value_shift_sup: shift_sup,
            displacement_l2: displacement_sq.sqrt(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::{CouplingWeights, ModelConfig};
    use std::f64::consts::PI;

    fn evaluator(n_cells: usize, n_steps: usize, config: ModelConfig) -> MasterEvaluator {
        let grid = build_grid(n_cells, (config.domain_lo, config.domain_hi)).unwrap();
        let model = DiscreteModel::new(config, grid).unwrap();
        let tg = TimeGrid::new(0.0, model.config.horizon_t, n_steps).unwrap();
        MasterEvaluator::new(model, tg, MfgParams::default()).unwrap()
    }

    fn bump_measure(ev: &MasterEvaluator, amp: f64, freq: f64) -> GridMeasure {
        GridMeasure::from_density(&ev.model.grid, |x| 1.0 + amp * (freq * PI * x).cos()).unwrap()
    }

    #[test]
    fn variation_along_the_base_measure_vanishes() {
        // The derivative of U along the direction m0 itself is zero: with
        // z = 0 the perturbation follows the equilibrium flow, and the
        // normalized coupling derivatives vanish on it. This is the discrete
        // form of the convention that the variation pairs to zero against
        // the base measure.
        let ev = evaluator(24, 40, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.3, 1.0);
        let base = ev.solve_from(0, &m0).unwrap();
        let lin = solve_linearized(
            &ev.model,
            &base,
            m0.weights(),
            &LinearizedSources::default(),
            &ev.params,
        )
        .unwrap();
        assert!(lin.z.max_abs() <= 1e-6, "variation along m0: {}", lin.z.max_abs());
        // The perturbation path tracks the equilibrium flow itself.
        for k in 0..=base.time_grid.n_steps {
            let drift: f64 = lin
                .rho
                .slice(k)
                .iter()
                .zip(base.m[k].weights())
                .map(|(r, m)| (r - m).abs())
                .sum();
            assert!(drift <= 1e-6, "perturbation left the equilibrium flow at slice {k}: {drift}");
        }
    }

    #[test]
    fn pairing_ignores_the_base_measure_component() {
        // Variation toward mu0 computed two ways: along mu0 - m0, and along
        // the raw mu0. They agree because the m0 component contributes
        // nothing, so the two directions differ by a null one.
        let ev = evaluator(24, 40, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.3, 1.0);
        let mu0 = bump_measure(&ev, -0.4, 2.0);
        let base = ev.solve_from(0, &m0).unwrap();
        let via_difference = ev.direction_derivative(0, &m0, &mu0).unwrap();
        let raw = solve_linearized(
            &ev.model,
            &base,
            mu0.weights(),
            &LinearizedSources::default(),
            &ev.params,
        )
        .unwrap();
        for (a, b) in via_difference.iter().zip(raw.z.slice(0)) {
            assert!((a - b).abs() <= 1e-6, "pairing mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn derivative_matches_finite_differences_in_the_measure() {
        let ev = evaluator(24, 40, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.3, 1.0);
        let y = 8;
        let md = ev.measure_derivative(0, &m0, y).unwrap();

        let mut bump = vec![0.0; 24];
        bump[y] = 1.0;
        let bump = ev.model.mollify(&bump).unwrap();
        let defect = |s: f64| -> f64 {
            let blended: Vec<f64> = m0
                .weights()
                .iter()
                .zip(&bump)
                .map(|(m, b)| (1.0 - s) * m + s * b)
                .collect();
            let perturbed = GridMeasure::from_weights(blended).unwrap();
            let u_pert = ev.eval_u(0, &perturbed).unwrap().u0;
            let u_base = ev.eval_u(0, &m0).unwrap().u0;
            let mut worst = 0.0_f64;
            for i in 0..24 {
                let fd = (u_pert[i] - u_base[i]) / s;
                worst = worst.max((fd - md[i]).abs());
            }
            worst
        };
        let coarse = defect(0.02);
        let fine = defect(0.005);
        // The defect of the first-order expansion shrinks linearly in the
        // perturbation size; exact linearity would give a factor 4 here.
        if coarse > 1e-7 {
            assert!(
                fine <= coarse / 2.5,
                "finite-difference defect did not shrink: {coarse:.3e} -> {fine:.3e}"
            );
        }
        assert!(fine <= 1e-3, "finite-difference defect too large: {fine:.3e}");
    }

    #[test]
    fn derivative_is_linear_in_the_direction() {
        let ev = evaluator(16, 24, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.2, 1.0);
        let base = ev.solve_from(0, &m0).unwrap();
        let dir_a: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.7).sin() * 0.1).collect();
        let dir_b: Vec<f64> = (0..16).map(|i| ((i as f64) * 1.3).cos() * 0.1).collect();
        let dir_ab: Vec<f64> = dir_a.iter().zip(&dir_b).map(|(a, b)| a + b).collect();
        let solve = |rho0: &[f64]| {
            solve_linearized(&ev.model, &base, rho0, &LinearizedSources::default(), &ev.params)
                .unwrap()
        };
        let za = solve(&dir_a);
        let zb = solve(&dir_b);
        let zab = solve(&dir_ab);
        for k in 0..=base.time_grid.n_steps {
            for i in 0..16 {
                let sum = za.z.slice(k)[i] + zb.z.slice(k)[i];
                let joint = zab.z.slice(k)[i];
                assert!((sum - joint).abs() <= 1e-6, "superposition defect at ({k}, {i})");
            }
        }
    }

    #[test]
    fn zero_couplings_make_the_derivative_trivial() {
        let config = ModelConfig {
            coupling_weights: CouplingWeights { c_f: 0.0, c_g: 0.0 },
            ..ModelConfig::default()
        };
        let ev = evaluator(16, 24, config);
        let m0 = bump_measure(&ev, 0.3, 2.0);
        let md = ev.measure_derivative(0, &m0, 5).unwrap();
        let sup = md.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(sup <= 1e-12, "derivative without couplings: {sup}");
    }

    #[test]
    fn derivative_fields_satisfy_the_boundary_condition_to_first_order() {
        // Moving the perturbation node along the boundary normal changes
        // nothing to first order: the one-sided difference quotient at the
        // wall decays linearly with the grid spacing.
        let boundary_slope = |n_cells: usize| {
            let ev = evaluator(n_cells, 40, ModelConfig::default());
            let m0 = bump_measure(&ev, 0.3, 1.0);
            let left = ev.intrinsic_derivative(0, &m0, 0).unwrap();
            let right = ev.intrinsic_derivative(0, &m0, n_cells - 1).unwrap();
            left.iter()
                .chain(&right)
                .fold(0.0_f64, |a, v| a.max(v.abs()))
        };
        let coarse = boundary_slope(21);
        let fine = boundary_slope(42);
        assert!(
            fine <= 0.75 * coarse + 1e-7,
            "boundary slope did not decay under refinement: {coarse:.3e} -> {fine:.3e}"
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let make = || {
            let ev = evaluator(16, 20, ModelConfig::default());
            let m0 = bump_measure(&ev, 0.25, 1.0);
            let u0 = ev.eval_u(0, &m0).unwrap().u0;
            let md = ev.measure_derivative(0, &m0, 7).unwrap();
            (u0, md.to_vec())
        };
        let (u_a, md_a) = make();
        let (u_b, md_b) = make();
        for (a, b) in u_a.iter().zip(&u_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in md_a.iter().zip(&md_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn repeat_evaluations_share_one_solve() {
        let ev = evaluator(16, 20, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.25, 1.0);
        let first = ev.eval_u(0, &m0).unwrap();
        let second = ev.eval_u(0, &m0).unwrap();
        assert!(Arc::ptr_eq(&first.solution, &second.solution));
        assert_eq!(ev.cached_solutions(), 1);
    }

    #[test]
    fn disk_cache_round_trips_between_processes() {
        let dir = tempfile::tempdir().unwrap();
        let build = || {
            let grid = build_grid(16, (0.0, 1.0)).unwrap();
            let model = DiscreteModel::new(ModelConfig::default(), grid).unwrap();
            let tg = TimeGrid::new(0.0, 0.5, 20).unwrap();
            MasterEvaluator::new(model, tg, MfgParams::default())
                .unwrap()
                .with_disk_cache(dir.path())
                .unwrap()
        };
        let ev_a = build();
        let m0 = bump_measure(&ev_a, 0.25, 1.0);
        let u_a = ev_a.eval_u(0, &m0).unwrap().u0;
        let files_after_a = std::fs::read_dir(dir.path()).unwrap().count();
        assert!(files_after_a >= 3, "expected persisted cache files");

        // A fresh evaluator with a cold memory cache reads the same entry
        // back instead of re-solving; the values agree to the last bit.
        let ev_b = build();
        let u_b = ev_b.eval_u(0, &m0).unwrap().u0;
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), files_after_a);
        for (a, b) in u_a.iter().zip(&u_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // A different model hashes to different entries in the same
        // directory rather than colliding.
        let grid = build_grid(16, (0.0, 1.0)).unwrap();
        let other = ModelConfig {
            coupling_weights: CouplingWeights { c_f: 2.0, c_g: 1.0 },
            ..ModelConfig::default()
        };
        let model = DiscreteModel::new(other, grid).unwrap();
        let tg = TimeGrid::new(0.0, 0.5, 20).unwrap();
        let ev_c = MasterEvaluator::new(model, tg, MfgParams::default())
            .unwrap()
            .with_disk_cache(dir.path())
            .unwrap();
        let u_c = ev_c.eval_u(0, &m0).unwrap().u0;
        assert!(std::fs::read_dir(dir.path()).unwrap().count() > files_after_a);
        let diff = u_a.iter().zip(&u_c).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
        assert!(diff > 1e-6, "different couplings must give a different value field");
    }

    #[test]
    fn pushforward_expansion_defect_is_quadratic() {
        let ev = evaluator(24, 40, ModelConfig::default());
        let m0 = bump_measure(&ev, 0.3, 1.0);
        let grid = &ev.model.grid;
        let h = grid.h;
        // Node-aligned displacements (integer multiples of h, and even
        // multiples so the half displacement stays node-aligned too): the
        // shifted deposit then lands exactly on nodes and the defect
        // measures the expansion alone, not interpolation kinks.
        let phi: Vec<f64> = grid
            .nodes
            .iter()
            .map(|&x| {
                let steps = (2.0 * (PI * x).sin()).round();
                2.0 * h * if x + 2.0 * h * steps < grid.hi { steps } else { 0.0 }
            })
            .collect();
        let half: Vec<f64> = phi.iter().map(|d| d / 2.0).collect();
        let full = ev.pushforward_expansion_check(0, &m0, &phi).unwrap();
        let halved = ev.pushforward_expansion_check(0, &m0, &half).unwrap();
        assert!(full.value_shift_sup > 1e-4, "displacement too weak to test anything");
        let ratio = full.defect / halved.defect;
        assert!(
            (2.5..=6.0).contains(&ratio),
            "defect ratio {ratio} (defects {:.3e} -> {:.3e}) not quadratic",
            full.defect,
            halved.defect
        );
        assert!(full.defect < 0.5 * full.value_shift_sup, "expansion explains the shift");
    }
}
