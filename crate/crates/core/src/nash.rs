//! The N-player system on the product domain. Player i's value function
//! solves
//!
//! ```text
//! -d_t v_i - sum_j a(x_j) d^2_{x_j} v_i + H(x_i, D_{x_i} v_i)
//!     + sum_{j != i} H_p(x_j, D_{x_j} v_j) . D_{x_j} v_i = F(x_i, m_i),
//! v_i(T, x) = G(x_i, m_i),
//! ```
//!
//! where `m_i` is the empirical measure of the other players, with zero
//! normal derivative on every face of the box. The couplings are linear in
//! the measure, so `F(x_i, m_i)` is an average of smoothed-kernel columns
//! over the other players' positions.
//!
//! Symmetry does the heavy lifting: all players share one value function up
//! to permuting coordinates, so only player 1's tensor is stored, and
//! `D_{x_j} v_j` is read from it at an index with coordinates 1 and j
//! exchanged. Each backward step is solved by a fixed-point iteration over
//! the frozen gradients, with the diffusion handled implicitly by dimension
//! splitting (the axis operators commute; the stored slice is re-symmetrized
//! after every step so roundoff cannot accumulate into the trailing axes).
//!
//! The second half of the module measures how well the mean field limit
//! approximates this system: the population projection `x -> U(t, x_i, m_i)`
//! plugged into the equations leaves a residual that shrinks with the number
//! of players, and its per-coordinate gradients match the intrinsic
//! derivative of the value field scaled by `1/(N-1)`.

use crate::error::{invalid, numerical, Error, Result};
use crate::grid::{neumann_diffusion_matrix, Grid1D, GridMeasure, TimeGrid, TridiagonalOp};
use crate::master::MasterEvaluator;
use crate::model::DiscreteModel;

/// Controls for the per-step inner fixed point of [`solve_nash`].
#[derive(Clone, Copy, Debug)]
pub struct NashParams {
    /// Sup-norm stopping threshold for the frozen-gradient iteration.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Hard cap on the stored tensor size. Exceeding it is a budget error,
    /// not an invitation to swap.
    pub memory_budget_bytes: usize,
}

impl Default for NashParams {
    fn default() -> Self {
        NashParams { inner_tol: 1e-9, max_inner: 60, memory_budget_bytes: 2 << 30 }
    }
}

impl NashParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) {
            return Err(invalid("inner tolerance must be positive"));
        }
        if self.max_inner == 0 {
            return Err(invalid("max_inner must be at least 1"));
        }
        Ok(())
    }
}

/// Value tensor over `(time, x_1, ..., x_N)`, row-major with the last
/// coordinate fastest.
#[derive(Clone, Debug)]
pub struct NashTensorField {
    pub n_players: usize,
    pub n_cells: usize,
    pub n_slices: usize,
    data: Vec<f64>,
}

impl NashTensorField {
    fn zeros(n_players: usize, n_cells: usize, n_slices: usize) -> Self {
        let per_slice = n_cells.pow(n_players as u32);
        NashTensorField { n_players, n_cells, n_slices, data: vec![0.0; per_slice * n_slices] }
    }

    pub fn per_slice(&self) -> usize {
        self.n_cells.pow(self.n_players as u32)
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let m = self.per_slice();
        &self.data[k * m..(k + 1) * m]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let m = self.per_slice();
        &mut self.data[k * m..(k + 1) * m]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat offset of a node multi-index within one slice.
    pub fn flat_index(&self, nodes: &[usize]) -> Result<usize> {
        if nodes.len() != self.n_players {
            return Err(invalid("node multi-index has the wrong number of coordinates"));
        }
        let mut flat = 0;
        for &i in nodes {
            if i >= self.n_cells {
                return Err(invalid(format!("node {i} outside grid of {} cells", self.n_cells)));
            }
            flat = flat * self.n_cells + i;
        }
        Ok(flat)
    }
}

/// Solved N-player system, stored as the representative player's tensor.
#[derive(Clone, Debug)]
pub struct NashSolution {
    pub time_grid: TimeGrid,
    pub v: NashTensorField,
    /// Largest pointwise adjustment made by the per-step re-symmetrization;
    /// measures how much asymmetry the splitting order leaks.
    pub max_symmetry_defect: f64,
    /// Largest number of frozen-gradient iterations any step needed.
    pub max_inner_used: usize,
    /// Internal substeps per time step (1 when the drift is mild).
    pub substeps: usize,
}

impl NashSolution {
    /// Value of `player` (0-based) at a node configuration, read from the
    /// representative tensor by swapping that player's coordinate to the
    /// front.
    pub fn value_at_nodes(&self, k: usize, nodes: &[usize], player: usize) -> Result<f64> {
        if player >= nodes.len() {
            return Err(invalid("player index outside the configuration"));
        }
        let mut swapped = nodes.to_vec();
        swapped.swap(0, player);
        Ok(self.v.slice(k)[self.v.flat_index(&swapped)?])
    }

    /// Gradient of the representative value in its own coordinate over one
    /// time slice. Feedback controls interpolate into this field after
    /// swapping the querying player's coordinate to the front.
    pub fn own_gradient_field(&self, k: usize, grid: &Grid1D) -> Vec<f64> {
        tensor_axis_gradient(self.v.slice(k), self.v.n_cells, self.v.n_players, 0, grid.h)
    }
}

/// Coordinates as seen by the representative player: `player`'s position is
/// moved into slot 0, so the axis-0 gradient of the stored tensor becomes
/// that player's own-coordinate gradient.
pub fn representative_coordinates(positions: &[f64], player: usize) -> Vec<f64> {
    let mut swapped = positions.to_vec();
    swapped.swap(0, player);
    swapped
}

/// Central-difference gradient along one axis of a tensor field, with
/// mirrored ghosts at the walls (the same convention as the 1-d gradient).
pub fn tensor_axis_gradient(
    field: &[f64],
    n_cells: usize,
    n_dims: usize,
    axis: usize,
    h: f64,
) -> Vec<f64> {
    let total = n_cells.pow(n_dims as u32);
    debug_assert_eq!(field.len(), total);
    let stride = n_cells.pow((n_dims - 1 - axis) as u32);
    let block = stride * n_cells;
    let two_h = 2.0 * h;
    let mut out = vec![0.0; total];
    for base in (0..total).step_by(block) {
        for inner in 0..stride {
            let line = base + inner;
            for t in 0..n_cells {
                let here = line + t * stride;
                let up = if t + 1 < n_cells { field[here + stride] } else { field[here] };
                let down = if t > 0 { field[here - stride] } else { field[here] };
                out[here] = (up - down) / two_h;
            }
        }
    }
    out
}

/// Tridiagonal solves along one axis, in place.
fn solve_along_axis(
    field: &mut [f64],
    n_cells: usize,
    n_dims: usize,
    axis: usize,
    system: &TridiagonalOp,
) -> Result<()> {
    let total = n_cells.pow(n_dims as u32);
    let stride = n_cells.pow((n_dims - 1 - axis) as u32);
    let block = stride * n_cells;
    let mut line = vec![0.0; n_cells];
    for base in (0..total).step_by(block) {
        for inner in 0..stride {
            let start = base + inner;
            for t in 0..n_cells {
                line[t] = field[start + t * stride];
            }
            let solved = system.solve(&line)?;
            for t in 0..n_cells {
                field[start + t * stride] = solved[t];
            }
        }
    }
    Ok(())
}

/// Average of kernel columns over the trailing coordinates:
/// `out[i_0, ..., i_{N-1}] = (1/(N-1)) sum_{j>=1} kernel[i_0, i_j]`. This is
/// exactly the coupling of the empirical measure of players `1..N` felt at
/// player 0's position.
fn kernel_mean_field(kernel: &[f64], n_players: usize, n_cells: usize) -> Vec<f64> {
    let total = n_cells.pow(n_players as u32);
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; n_players];
    let scale = 1.0 / (n_players - 1) as f64;
    for slot in out.iter_mut() {
        let mut sum = 0.0;
        for &i_j in &idx[1..] {
            sum += kernel[idx[0] * n_cells + i_j];
        }
        *slot = scale * sum;
        advance_odometer(&mut idx, n_cells);
    }
    out
}

/// Increments a multi-index in row-major order (last coordinate fastest).
#[inline]
fn advance_odometer(idx: &mut [usize], n_cells: usize) {
    for slot in idx.iter_mut().rev() {
        *slot += 1;
        if *slot < n_cells {
            return;
        }
        *slot = 0;
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn extend(k: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in 0..k {
            if !used[i] {
                used[i] = true;
                current.push(i);
                extend(k, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(k, &mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Averages a slice over all permutations of the trailing axes and returns
/// the largest pointwise correction this made.
fn symmetrize_trailing(field: &mut [f64], n_players: usize, n_cells: usize) -> f64 {
    if n_players <= 2 {
        return 0.0;
    }
    let perms = permutations(n_players - 1);
    let mut strides = vec![0usize; n_players];
    for (axis, s) in strides.iter_mut().enumerate() {
        *s = n_cells.pow((n_players - 1 - axis) as u32);
    }
    let scale = 1.0 / perms.len() as f64;
    let mut out = vec![0.0; field.len()];
    let mut idx = vec![0usize; n_players];
    let mut defect = 0.0_f64;
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for perm in &perms {
            let mut other = idx[0] * strides[0];
            for (axis, &p) in perm.iter().enumerate() {
                other += idx[1 + p] * strides[1 + axis];
            }
            sum += field[other];
        }
        let avg = scale * sum;
        defect = defect.max((avg - field[flat]).abs());
        *slot = avg;
        advance_odometer(&mut idx, n_cells);
    }
    field.copy_from_slice(&out);
    defect
}

/// Backward solve of the N-player system for 2 to 4 players.
pub fn solve_nash(
    model: &DiscreteModel,
    time_grid: &TimeGrid,
    n_players: usize,
    params: &NashParams,
) -> Result<NashSolution> {
    params.validate()?;
    if !(2..=4).contains(&n_players) {
        return Err(invalid(format!("the tensor solver supports 2 to 4 players, got {n_players}")));
    }
    let n = model.grid.n_cells;
    let per_slice = n.pow(n_players as u32);
    let bytes = per_slice
        .checked_mul(time_grid.n_steps + 1)
        .and_then(|cells| cells.checked_mul(8))
        .ok_or_else(|| invalid("value tensor size overflows"))?;
    if bytes > params.memory_budget_bytes {
        return Err(Error::Budget(format!(
            "value tensor needs {bytes} bytes, budget is {}",
            params.memory_budget_bytes
        )));
    }

    let h = model.grid.h;
    let dt = time_grid.dt;
    // The frozen-gradient iteration contracts at rate about
    // dt * N * max|H_p| / h; split the step to keep a comfortable margin.
    let stiffness = dt * n_players as f64 * model.drift_bound() / h;
    let substeps = if stiffness > 0.5 { (stiffness / 0.5).ceil() as usize } else { 1 };
    if substeps > 1 {
        log::debug!(
            "splitting each step into {substeps} substeps (drift stiffness {stiffness:.2})"
        );
    }
    let dt_sub = dt / substeps as f64;
    let axis_system =
        neumann_diffusion_matrix(&model.grid, &model.a)?.identity_minus_scaled(dt_sub);

    let kernel_f = model.coupling_kernel(model.config.coupling_weights.c_f)?;
    let kernel_g = model.coupling_kernel(model.config.coupling_weights.c_g)?;
    let source = kernel_mean_field(&kernel_f, n_players, n);
    let mut strides = vec![0usize; n_players];
    for (axis, s) in strides.iter_mut().enumerate() {
        *s = n.pow((n_players - 1 - axis) as u32);
    }

    let mut v = NashTensorField::zeros(n_players, n, time_grid.n_steps + 1);
    v.slice_mut(time_grid.n_steps)
        .copy_from_slice(&kernel_mean_field(&kernel_g, n_players, n));

    let mut max_symmetry_defect = 0.0_f64;
    let mut max_inner_used = 0usize;

    for k in (0..time_grid.n_steps).rev() {
        let mut later = v.slice(k + 1).to_vec();
        for _ in 0..substeps {
            let mut w = later.clone();
            let mut converged = false;
            for inner in 1..=params.max_inner {
                // Gradients of the current iterate along every axis. Axis 0
                // doubles as every player's own-coordinate gradient through
                // the index swap below.
                let grads: Vec<Vec<f64>> = (0..n_players)
                    .map(|axis| tensor_axis_gradient(&w, n, n_players, axis, h))
                    .collect();

                let mut next = vec![0.0; per_slice];
                let mut idx = vec![0usize; n_players];
                for (flat, slot) in next.iter_mut().enumerate() {
                    let (ham, _, _) = model.hamiltonian_at_node(idx[0], grads[0][flat]);
                    let mut transport = 0.0;
                    for j in 1..n_players {
                        let swapped = (flat as isize
                            + (idx[j] as isize - idx[0] as isize) * strides[0] as isize
                            + (idx[0] as isize - idx[j] as isize) * strides[j] as isize)
                            as usize;
                        let (_, hp, _) = model.hamiltonian_at_node(idx[j], grads[0][swapped]);
                        transport += hp * grads[j][flat];
                    }
                    *slot = later[flat] + dt_sub * (source[flat] - ham - transport);
                    advance_odometer(&mut idx, n);
                }
                for axis in 0..n_players {
                    solve_along_axis(&mut next, n, n_players, axis, &axis_system)?;
                }

                let delta =
                    w.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0_f64, f64::max);
                w = next;
                max_inner_used = max_inner_used.max(inner);
                if delta <= params.inner_tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(numerical(format!(
                    "frozen-gradient iteration stalled at step {k} after {} rounds",
                    params.max_inner
                )));
            }
            later = w;
        }
        max_symmetry_defect =
            max_symmetry_defect.max(symmetrize_trailing(&mut later, n_players, n));
        v.slice_mut(k).copy_from_slice(&later);
    }

    if !v.data.iter().all(|x| x.is_finite()) {
        return Err(numerical("tensor sweep produced non-finite values"));
    }
    Ok(NashSolution {
        time_grid: time_grid.clone(),
        v,
        max_symmetry_defect,
        max_inner_used,
        substeps,
    })
}

/// Empirical measure of everyone but `player`, with atoms at grid nodes.
pub fn others_measure(nodes: &[usize], player: usize, grid: &Grid1D) -> Result<GridMeasure> {
    if nodes.len() < 2 || player >= nodes.len() {
        return Err(invalid("configuration needs at least two players and a valid index"));
    }
    let mut weights = vec![0.0; grid.n_cells];
    let share = 1.0 / (nodes.len() - 1) as f64;
    for (j, &node) in nodes.iter().enumerate() {
        if j == player {
            continue;
        }
        if node >= grid.n_cells {
            return Err(invalid(format!("node {node} outside grid of {} cells", grid.n_cells)));
        }
        weights[node] += share;
    }
    GridMeasure::from_weights(weights)
}

/// Residual of the N-player system at one interior sample point, with every
/// player's value replaced by the population projection `U(t, x_i, m_i)`.
///
/// Derivatives in the own coordinate come from the projected field itself
/// (which is a full node field in `x_i`); derivatives in the other
/// coordinates are centered differences over `delta_cells` grid cells, which
/// keeps the shifted atoms exactly on nodes. The time derivative is a
/// centered difference of evaluations at the neighboring slices, so
/// `t_index` needs a slice on both sides.
pub fn projection_residual(
    master: &MasterEvaluator,
    t_index: usize,
    nodes: &[usize],
    player: usize,
    delta_cells: usize,
) -> Result<f64> {
    let model = &master.model;
    let grid = &model.grid;
    let n = grid.n_cells;
    if delta_cells == 0 {
        return Err(invalid("delta_cells must be at least 1"));
    }
    if t_index == 0 || t_index + 1 >= master.time_grid.n_steps {
        return Err(invalid("time index needs interior slices on both sides"));
    }
    for &node in nodes {
        if node < delta_cells || node + delta_cells >= n {
            return Err(invalid("sample configuration too close to the boundary"));
        }
    }
    let h = grid.h;
    let dt = master.time_grid.dt;
    let delta = delta_cells as f64 * h;
    let own = nodes[player];

    let m_i = others_measure(nodes, player, grid)?;
    let here = master.eval_u(t_index, &m_i)?.u0;

    let before = master.eval_u(t_index - 1, &m_i)?.u0[own];
    let after = master.eval_u(t_index + 1, &m_i)?.u0[own];
    let du_dt = (after - before) / (2.0 * dt);

    // Own-coordinate terms straight from the projected field.
    let own_second = (here[own + 1] - 2.0 * here[own] + here[own - 1]) / (h * h);
    let own_grad = (here[own + 1] - here[own - 1]) / (2.0 * h);
    let (ham, _, _) = model.hamiltonian_at_node(own, own_grad);

    let mut cross_diffusion = 0.0;
    let mut transport = 0.0;
    for (j, &node_j) in nodes.iter().enumerate() {
        if j == player {
            continue;
        }
        // Shift player j by +/- delta cells; the empirical measure moves
        // atom to atom, so the evaluations stay exact node measures.
        let mut plus_nodes = nodes.to_vec();
        plus_nodes[j] = node_j + delta_cells;
        let mut minus_nodes = nodes.to_vec();
        minus_nodes[j] = node_j - delta_cells;
        let u_plus = master.eval_u(t_index, &others_measure(&plus_nodes, player, grid)?)?.u0[own];
        let u_minus =
            master.eval_u(t_index, &others_measure(&minus_nodes, player, grid)?)?.u0[own];
        cross_diffusion +=
            model.a[node_j] * (u_plus - 2.0 * here[own] + u_minus) / (delta * delta);
        let cross_grad = (u_plus - u_minus) / (2.0 * delta);

        // Player j's feedback drift through its own projection.
        let m_j = others_measure(nodes, j, grid)?;
        let u_j = master.eval_u(t_index, &m_j)?.u0;
        let grad_j = (u_j[node_j + 1] - u_j[node_j - 1]) / (2.0 * h);
        let (_, hp_j, _) = model.hamiltonian_at_node(node_j, grad_j);
        transport += hp_j * cross_grad;
    }

    let coupling = model.coupling_f(&m_i)?[own];
    Ok(-du_dt - model.a[own] * own_second - cross_diffusion + ham + transport - coupling)
}

/// Value of the population projection `U(t, x_i, m_i)` at a configuration of
/// real positions. The measure of the others uses the same linear deposit as
/// the particle experiments, so off-node positions are handled by weight
/// splitting, and the own coordinate is interpolated on the node field.
pub fn projected_value(
    master: &MasterEvaluator,
    t_index: usize,
    positions: &[f64],
    player: usize,
) -> Result<f64> {
    let grid = &master.model.grid;
    if positions.len() < 2 || player >= positions.len() {
        return Err(invalid("configuration needs at least two players and a valid index"));
    }
    for &x in positions {
        if !grid.contains(x) {
            return Err(invalid(format!("position {x} outside the domain")));
        }
    }
    let m_i = crate::grid::empirical_measure(positions, Some(player), grid)?;
    let field = master.eval_u(t_index, &m_i)?.u0;
    Ok(crate::grid::interpolate(&field, grid, positions[player]))
}

/// Largest projection residual over a sample of interior configurations,
/// interior time slices, and all players.
pub fn projection_residual_sup(
    master: &MasterEvaluator,
    t_indices: &[usize],
    configs: &[Vec<usize>],
    delta_cells: usize,
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for &k in t_indices {
        for nodes in configs {
            for player in 0..nodes.len() {
                let r = projection_residual(master, k, nodes, player, delta_cells)?;
                sup = sup.max(r.abs());
            }
        }
    }
    Ok(sup)
}

/// One comparison of the per-coordinate gradient of the projected value
/// against the intrinsic derivative of the value field.
#[derive(Clone, Copy, Debug)]
pub struct GradientProjectionSample {
    /// Centered difference of `U(t, x_i, m_i)` in player `other`'s position.
    pub finite_difference: f64,
    /// `(1/(N-1)) D_y[dU/dm](t, x_i, m_i, x_other)`.
    pub projected: f64,
    /// The same with the deliberately wrong prefactor `1/N`, for contrast.
    pub mis_scaled: f64,
}

pub fn gradient_projection_check(
    master: &MasterEvaluator,
    t_index: usize,
    nodes: &[usize],
    player: usize,
    other: usize,
    delta_cells: usize,
) -> Result<GradientProjectionSample> {
    let grid = &master.model.grid;
    let n = grid.n_cells;
    let n_players = nodes.len();
    if player == other || player >= n_players || other >= n_players {
        return Err(invalid("need two distinct valid player indices"));
    }
    if delta_cells == 0 || nodes[other] < delta_cells || nodes[other] + delta_cells >= n {
        return Err(invalid("shifted configuration leaves the grid"));
    }
    let own = nodes[player];
    let delta = delta_cells as f64 * grid.h;

    let mut plus_nodes = nodes.to_vec();
    plus_nodes[other] += delta_cells;
    let mut minus_nodes = nodes.to_vec();
    minus_nodes[other] -= delta_cells;
    let u_plus = master.eval_u(t_index, &others_measure(&plus_nodes, player, grid)?)?.u0[own];
    let u_minus = master.eval_u(t_index, &others_measure(&minus_nodes, player, grid)?)?.u0[own];
    let finite_difference = (u_plus - u_minus) / (2.0 * delta);

    let m_i = others_measure(nodes, player, grid)?;
    let dmu = master.intrinsic_derivative(t_index, &m_i, nodes[other])?;
    Ok(GradientProjectionSample {
        finite_difference,
        projected: dmu[own] / (n_players - 1) as f64,
        mis_scaled: dmu[own] / n_players as f64,
    })
}
