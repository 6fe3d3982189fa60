//! The mean field game system on `[t0, T]`:
//!
//! ```text
//! -u_t - a(x) u_xx + H(x, u_x) = F(x, m(t)),        u(T) = G(x, m(T)),
//!  m_t - (a(x) m)_xx - (m H_p(x, u_x))_x = 0,       m(t0) = m0,
//! ```
//!
//! with zero-flux Neumann conditions on both equations: `a u_x = 0` for the
//! value function, and vanishing total flux `(a m)_x + m H_p = 0` for the
//! distribution, so no mass enters or leaves the interval.
//!
//! Discretization:
//!
//! * backward HJB sweep: implicit diffusion (one tridiagonal solve per step),
//!   Hamiltonian and coupling evaluated explicitly at the later time slice;
//! * forward Fokker-Planck sweep: finite volumes with upwinded drift flux and
//!   implicit diffusion in conservation form; both boundary faces carry zero
//!   flux, so the total mass is conserved to solver roundoff. If the drift
//!   violates the advective CFL bound the step is split internally;
//! * the coupling is resolved by damped fixed-point iteration on the flow of
//!   measures, with the damping factor reduced geometrically whenever the
//!   iteration starts to oscillate.

use crate::error::{invalid, numerical, Result};
use crate::grid::{
    fokker_planck_diffusion_matrix, gradient, neumann_diffusion_matrix, wasserstein1, GridMeasure,
    SpaceTimeField, TimeGrid, TridiagonalOp,
};
use crate::model::DiscreteModel;

/// Fixed-point controls for [`solve_mfg`].
#[derive(Clone, Copy, Debug)]
pub struct MfgParams {
    /// Stop when `sup_t d_1(m_new(t), m_old(t))` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial relaxation weight on the new iterate, in `(0, 1]`. Later
    /// iterations adapt the weight from consecutive residuals.
    pub damping: f64,
}

impl Default for MfgParams {
    fn default() -> Self {
        MfgParams { tol: 1e-8, max_iter: 200, damping: 0.5 }
    }
}

impl MfgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("fixed-point tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid("damping must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Converged solution of the game system.
#[derive(Clone, Debug)]
pub struct MfgSolution {
    pub time_grid: TimeGrid,
    /// Value function over `(time, node)`.
    pub u: SpaceTimeField,
    /// Flow of measures, one per time slice.
    pub m: Vec<GridMeasure>,
    pub iterations_used: usize,
    pub final_gap: f64,
    /// Fixed-point gap after each iteration, for convergence diagnostics.
    pub gap_history: Vec<f64>,
    /// Largest per-step mass defect seen in the final forward sweep,
    /// measured before renormalization.
    pub max_mass_error: f64,
}

/// Diagnostics from one forward Fokker-Planck sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct FpDiagnostics {
    /// Largest `|1 - total mass|` over all steps, before renormalization.
    pub max_mass_error: f64,
    /// Total number of internal CFL substeps taken beyond the nominal count.
    pub extra_substeps: usize,
}

/// Backward HJB sweep against a prescribed flow of measures.
pub fn solve_hjb_backward(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    m_path: &[GridMeasure],
) -> Result<SpaceTimeField> {
    if m_path.len() != time_grid.n_steps + 1 {
        return Err(invalid(format!(
            "measure path has {} slices, time grid wants {}",
            m_path.len(),
            time_grid.n_steps + 1
        )));
    }
    let terminal = model.coupling_g(&m_path[time_grid.n_steps])?;
    let mut sources = SpaceTimeField::zeros(time_grid.n_steps + 1, model.grid.n_cells);
    for k in 0..=time_grid.n_steps {
        let f = model.coupling_f(&m_path[k])?;
        sources.slice_mut(k).copy_from_slice(&f);
    }
    solve_hjb_with_source(model, time_grid, &terminal, &sources)
}

/// Backward HJB sweep with an arbitrary source field in place of the
/// coupling. Used by the manufactured-solution checks and by the linearized
/// system, both of which need to drive the same stepper with their own right
/// hand sides.
pub fn solve_hjb_with_source(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    terminal: &[f64],
    source: &SpaceTimeField,
) -> Result<SpaceTimeField> {
    let n = model.grid.n_cells;
    if terminal.len() != n || source.n_nodes != n || source.n_slices != time_grid.n_steps + 1 {
        return Err(invalid("terminal or source field does not match the grids"));
    }
    let stepper = BackwardStepper::new(model, time_grid.dt)?;
    let mut u = SpaceTimeField::zeros(time_grid.n_steps + 1, n);
    u.slice_mut(time_grid.n_steps).copy_from_slice(terminal);
    for k in (0..time_grid.n_steps).rev() {
        let next = u.slice(k + 1).to_vec();
        let du = gradient(&next, &model.grid);
        let src = source.slice(k + 1);
        let mut explicit = vec![0.0; n];
        for i in 0..n {
            let (h, _, _) = model.hamiltonian_at_node(i, du[i]);
            explicit[i] = src[i] - h;
        }
        let step = stepper.step(&next, &explicit)?;
        u.slice_mut(k).copy_from_slice(&step);
    }
    if !u.all_finite() {
        return Err(numerical("HJB sweep produced non-finite values"));
    }
    Ok(u)
}

/// One implicit-diffusion backward step: solves
/// `(I - dt L) u_k = u_{k+1} + dt * explicit`, where `L` is the Neumann
/// diffusion operator. Shared by the HJB sweep and the linearized backward
/// equation, which differ only in their explicit terms.
pub(crate) struct BackwardStepper {
    system: TridiagonalOp,
    dt: f64,
}

impl BackwardStepper {
    pub(crate) fn new(model: &DiscreteModel, dt: f64) -> Result<Self> {
        let op = neumann_diffusion_matrix(&model.grid, &model.a)?;
        Ok(BackwardStepper { system: op.identity_minus_scaled(dt), dt })
    }

    pub(crate) fn step(&self, next: &[f64], explicit: &[f64]) -> Result<Vec<f64>> {
        let rhs: Vec<f64> =
            next.iter().zip(explicit).map(|(u, e)| u + self.dt * e).collect();
        self.system.solve(&rhs)
    }
}

/// Forward Fokker-Planck sweep under the drift `-H_p(x, u_x)`.
///
/// Returns the flow of measures and conservation diagnostics. The advective
/// flux is upwinded on cell faces. A cell can lose mass through both faces
/// at once, so the step is split internally whenever `2 dt sup|H_p| / h`
/// leaves the comfortable range; that keeps the explicit update a convex
/// combination and the weights nonnegative. The split count comes from the
/// model's a priori drift bound, not the realized slopes, so the sweep is a
/// fixed map of the value field and the surrounding iteration cannot see it
/// switch branches. A warning is logged only when the nominal step itself is
/// coarse relative to the drift.
pub fn solve_fp_forward(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    m0: &GridMeasure,
    u: &SpaceTimeField,
) -> Result<(Vec<GridMeasure>, FpDiagnostics)> {
    let n = model.grid.n_cells;
    if m0.len() != n {
        return Err(invalid("initial measure does not live on the model grid"));
    }
    if u.n_slices != time_grid.n_steps + 1 || u.n_nodes != n {
        return Err(invalid("value field does not match the grids"));
    }
    let h = model.grid.h;
    let diffusion = fokker_planck_diffusion_matrix(&model.grid, &model.a)?;
    let outflow = 2.0 * time_grid.dt * model.drift_bound() / h;
    let n_sub = if outflow > 0.9 { (outflow / 0.9).ceil() as usize } else { 1 };
    if outflow > 2.0 {
        log::warn!(
            "advective CFL number {:.2} exceeds 1; splitting each step into {n_sub} substeps",
            0.5 * outflow
        );
    }
    let dt_sub = time_grid.dt / n_sub as f64;
    let system = diffusion.identity_minus_scaled(dt_sub);

    let mut path = Vec::with_capacity(time_grid.n_steps + 1);
    path.push(m0.clone());
    let mut diag = FpDiagnostics::default();

    let mut weights = m0.weights().to_vec();
    for k in 0..time_grid.n_steps {
        // Face drift velocities from the value slice at the current time.
        let u_k = u.slice(k);
        let mut velocity = vec![0.0; n - 1];
        for f in 0..n - 1 {
            let p = (u_k[f + 1] - u_k[f]) / h;
            let c = 0.5 * (model.c_h[f] + model.c_h[f + 1]);
            let (_, hp, _) = crate::model::hamiltonian_raw(c, p);
            velocity[f] = -hp;
        }
        diag.extra_substeps += n_sub - 1;

        for _ in 0..n_sub {
            // Explicit upwind advection: mass flux through face f is
            // velocity * upwind weight / h.
            let mut flux = vec![0.0; n - 1];
            for f in 0..n - 1 {
                let upwind = if velocity[f] >= 0.0 { weights[f] } else { weights[f + 1] };
                flux[f] = velocity[f] * upwind / h;
            }
            let mut star = weights.clone();
            for i in 0..n {
                let right = if i + 1 < n { flux[i] } else { 0.0 };
                let left = if i > 0 { flux[i - 1] } else { 0.0 };
                star[i] -= dt_sub * (right - left);
            }
            weights = system.solve(&star)?;
        }

        let mass: f64 = weights.iter().sum();
        diag.max_mass_error = diag.max_mass_error.max((mass - 1.0).abs());
        let mut measure = GridMeasure::from_weights(weights)?;
        measure.clip_and_renormalize()?;
        weights = measure.weights().to_vec();
        path.push(measure);
    }
    Ok((path, diag))
}

/// Solves the coupled system by damped fixed-point iteration on the flow of
/// measures, starting from the path frozen at `m0` (or a caller-supplied
/// guess). The returned value function is re-solved against the final flow,
/// so `u(T) = G(., m(T))` holds exactly for the accepted measures.
pub fn solve_mfg(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    m0: &GridMeasure,
    params: &MfgParams,
) -> Result<MfgSolution> {
    solve_mfg_with_guess(model, time_grid, m0, params, None)
}

pub fn solve_mfg_with_guess(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    m0: &GridMeasure,
    params: &MfgParams,
    guess: Option<&[GridMeasure]>,
) -> Result<MfgSolution> {
    params.validate()?;
    if m0.len() != model.grid.n_cells {
        return Err(invalid("initial measure does not live on the model grid"));
    }
    let n_slices = time_grid.n_steps + 1;
    let mut m_path: Vec<GridMeasure> = match guess {
        Some(path) => {
            if path.len() != n_slices {
                return Err(invalid("initial guess path has the wrong number of slices"));
            }
            let mut path = path.to_vec();
            path[0] = m0.clone();
            path
        }
        None => vec![m0.clone(); n_slices],
    };

    let mut omega = params.damping;
    let mut gap_history = Vec::new();
    let mut prev_residual: Option<Vec<f64>> = None;
    let mut mass_error = 0.0_f64;

    for iteration in 1..=params.max_iter {
        let u = solve_hjb_backward(model, time_grid, &m_path)?;
        let (fp_path, diag) = solve_fp_forward(model, time_grid, m0, &u)?;
        mass_error = mass_error.max(diag.max_mass_error);

        // The fixed-point residual, flattened over all slices. It both
        // decides acceptance of the undamped image and feeds the relaxation
        // update below.
        let mut residual = Vec::with_capacity(n_slices * model.grid.n_cells);
        for k in 0..n_slices {
            for (new, old) in fp_path[k].weights().iter().zip(m_path[k].weights()) {
                residual.push(new - old);
            }
        }
        let raw_gap = path_distance(&fp_path, &m_path, model)?;
        let accept_raw = raw_gap <= params.tol;

        if !accept_raw {
            // Dynamic relaxation: for a dominant residual mode with
            // multiplier `lambda` the update drives the weight toward its
            // optimum `1 / (1 - lambda)`, which also tames the sign-flipping
            // modes (`lambda < 0`) this map develops under crowd aversion.
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
            prev_residual = Some(residual);
        }

        let mut gap = 0.0_f64;
        let mut next_path = Vec::with_capacity(n_slices);
        next_path.push(m0.clone());
        for k in 1..n_slices {
            let mix = if accept_raw { 1.0 } else { omega };
            let blended: Vec<f64> = m_path[k]
                .weights()
                .iter()
                .zip(fp_path[k].weights())
                .map(|(old, new)| (1.0 - mix) * old + mix * new)
                .collect();
            let blended = GridMeasure::from_weights(blended)?;
            gap = gap.max(wasserstein1(&blended, &m_path[k], &model.grid)?);
            next_path.push(blended);
        }
        m_path = next_path;
        gap_history.push(gap);

        if accept_raw || gap <= params.tol {
            let u = solve_hjb_backward(model, time_grid, &m_path)?;
            let (_, diag) = solve_fp_forward(model, time_grid, &m_path[0].clone(), &u)?;
            // The extra forward sweep only refreshes the conservation
            // diagnostics; the accepted fixed point is kept.
            return Ok(MfgSolution {
                time_grid: time_grid.clone(),
                u,
                m: m_path,
                iterations_used: iteration,
                final_gap: gap.min(raw_gap),
                gap_history,
                max_mass_error: mass_error.max(diag.max_mass_error),
            });
        }
    }

    Err(numerical(format!(
        "fixed point did not reach tol {} in {} iterations (last gap {:.3e})",
        params.tol,
        params.max_iter,
        gap_history.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Largest Wasserstein-1 distance over matching time slices of two flows.
pub fn path_distance(
    a: &[GridMeasure],
    b: &[GridMeasure],
    model: &DiscreteModel,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("measure paths have different lengths"));
    }
    let mut out = 0.0_f64;
    for (ma, mb) in a.iter().zip(b) {
        out = out.max(wasserstein1(ma, mb, &model.grid)?);
    }
    Ok(out)
}
