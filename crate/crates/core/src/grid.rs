//! Cell-centered grids, grid measures and the discrete operators shared by
//! every solver in the crate.
//!
//! The interval `[lo, hi]` is split into `n_cells` cells of width `h`; all
//! fields live at the cell centers ("nodes"). Neumann boundary conditions are
//! realized through mirrored ghost nodes,
//!
//! ```text
//! u[-1] = u[0],    u[n] = u[n-1],
//! ```
//!
//! which makes every difference operator here boundary-aware by construction:
//! the diffusion stencils annihilate constants up to the boundary and the
//! centered gradient of a field satisfying the discrete Neumann condition
//! vanishes at the boundary nodes.
//!
//! Probability measures are stored as nonnegative node weights summing to one
//! (an atom per node). The 1-d Wasserstein-1 distance of two such measures is
//! the integrated absolute difference of their cumulative weights, which is
//! exact for node-supported measures.

use crate::error::{invalid, invariant, numerical, Result};

/// Tolerance below which negative weights are treated as roundoff and clipped.
pub const WEIGHT_CLIP_TOL: f64 = 1e-14;

/// Cell-centered spatial grid on a bounded interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    pub n_cells: usize,
    pub lo: f64,
    pub hi: f64,
    /// Cell width `(hi - lo) / n_cells`.
    pub h: f64,
    /// Cell centers `lo + (i + 1/2) h`.
    pub nodes: Vec<f64>,
}

/// Builds a cell-centered grid. At least 8 cells are required; coarser grids
/// cannot resolve the smoothed couplings and are rejected outright.
pub fn build_grid(n_cells: usize, domain: (f64, f64)) -> Result<Grid1D> {
    let (lo, hi) = domain;
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(invalid(format!("domain [{lo}, {hi}] is not a proper interval")));
    }
    if n_cells < 8 {
        return Err(invalid(format!("n_cells = {n_cells}, need at least 8")));
    }
    let h = (hi - lo) / n_cells as f64;
    let nodes = (0..n_cells).map(|i| lo + (i as f64 + 0.5) * h).collect();
    Ok(Grid1D { n_cells, lo, hi, h, nodes })
}

impl Grid1D {
    /// Locates `x` for linear interpolation: returns the left node index and
    /// the fractional offset, clamped to the node span so that querying inside
    /// the two half-cells next to the boundary degrades to the nearest node.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.lo) / self.h - 0.5;
        if s <= 0.0 {
            (0, 0.0)
        } else if s >= (self.n_cells - 1) as f64 {
            (self.n_cells - 1, 0.0)
        } else {
            let j = s.floor() as usize;
            let j = j.min(self.n_cells - 2);
            (j, s - j as f64)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x.is_finite() && x >= self.lo && x <= self.hi
    }
}

/// Uniform time grid on `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(invalid(format!("time interval [{t_start}, {t_end}] is empty")));
        }
        if n_steps == 0 {
            return Err(invalid("need at least one time step"));
        }
        let dt = (t_end - t_start) / n_steps as f64;
        Ok(TimeGrid { t_start, t_end, n_steps, dt })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt
        }
    }

    /// Restriction `[t_k, t_end]` keeping the step size. Used when the master
    /// field is evaluated at an interior initial time.
    pub fn suffix(&self, k: usize) -> Result<Self> {
        if k >= self.n_steps {
            return Err(invalid(format!(
                "suffix start index {k} leaves no steps (n_steps = {})",
                self.n_steps
            )));
        }
        Ok(TimeGrid {
            t_start: self.time(k),
            t_end: self.t_end,
            n_steps: self.n_steps - k,
            dt: self.dt,
        })
    }
}

/// Probability measure supported on the grid nodes.
///
/// Weights are kept nonnegative and renormalized to unit mass after every
/// constructing operation; genuinely negative input (beyond roundoff) is an
/// invariant violation, not something to paper over.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeasure {
    weights: Vec<f64>,
}

impl GridMeasure {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let mut m = GridMeasure { weights };
        m.clip_and_renormalize()?;
        Ok(m)
    }

    pub fn uniform(grid: &Grid1D) -> Self {
        let w = 1.0 / grid.n_cells as f64;
        GridMeasure { weights: vec![w; grid.n_cells] }
    }

    pub fn point_mass(grid: &Grid1D, node: usize) -> Result<Self> {
        if node >= grid.n_cells {
            return Err(invalid(format!("node {node} outside grid of {} cells", grid.n_cells)));
        }
        let mut weights = vec![0.0; grid.n_cells];
        weights[node] = 1.0;
        Ok(GridMeasure { weights })
    }

    /// Normalized measure with density proportional to `f` at the nodes.
    pub fn from_density(grid: &Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let weights = grid.nodes.iter().map(|&x| f(x) * grid.h).collect();
        GridMeasure::from_weights(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Node densities `w_i / h`.
    pub fn density(&self, grid: &Grid1D) -> Vec<f64> {
        self.weights.iter().map(|w| w / grid.h).collect()
    }

    pub fn mean(&self, grid: &Grid1D) -> f64 {
        self.weights.iter().zip(&grid.nodes).map(|(w, x)| w * x).sum()
    }

    /// Clips roundoff-level negative weights to zero and renormalizes the
    /// total mass to one. Fails if a weight is negative beyond roundoff or if
    /// no mass is left.
    pub fn clip_and_renormalize(&mut self) -> Result<()> {
        let mut total = 0.0;
        for w in &mut self.weights {
            if !w.is_finite() {
                return Err(numerical("non-finite weight in grid measure"));
            }
            if *w < 0.0 {
                if *w < -WEIGHT_CLIP_TOL {
                    return Err(invariant(format!("measure weight {w} negative beyond roundoff")));
                }
                *w = 0.0;
            }
            total += *w;
        }
        if total <= 0.0 {
            return Err(invariant("grid measure has no mass"));
        }
        for w in &mut self.weights {
            *w /= total;
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Scalar field over grid nodes, a single time slice.
pub type ValueField = Vec<f64>;

/// Scalar field over `(time, node)`, row-major by time slice. Slice `k`
/// corresponds to time `t_start + k dt`, so there are `n_steps + 1` slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    pub n_slices: usize,
    pub n_nodes: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(n_slices: usize, n_nodes: usize) -> Self {
        SpaceTimeField { n_slices, n_nodes, data: vec![0.0; n_slices * n_nodes] }
    }

    pub fn from_fn(n_slices: usize, n_nodes: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut field = SpaceTimeField::zeros(n_slices, n_nodes);
        for k in 0..n_slices {
            for i in 0..n_nodes {
                field.data[k * n_nodes + i] = f(k, i);
            }
        }
        field
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Centered gradient with mirrored ghost nodes. At the boundary nodes the
/// stencil collapses to `(u[1] - u[0]) / 2h`, which vanishes exactly when the
/// field satisfies the discrete Neumann condition.
pub fn gradient(field: &[f64], grid: &Grid1D) -> Vec<f64> {
    let n = grid.n_cells;
    debug_assert_eq!(field.len(), n);
    let two_h = 2.0 * grid.h;
    let mut g = vec![0.0; n];
    g[0] = (field[1] - field[0]) / two_h;
    for i in 1..n - 1 {
        g[i] = (field[i + 1] - field[i - 1]) / two_h;
    }
    g[n - 1] = (field[n - 1] - field[n - 2]) / two_h;
    g
}

/// Largest one-sided normal difference quotient at the two boundary nodes.
/// For fields produced by the Neumann solvers this is `O(h)`.
pub fn neumann_defect(field: &[f64], grid: &Grid1D) -> f64 {
    let n = field.len();
    let left = (field[1] - field[0]).abs() / grid.h;
    let right = (field[n - 1] - field[n - 2]).abs() / grid.h;
    left.max(right)
}

/// Tridiagonal operator (and matrix) on node vectors.
#[derive(Clone, Debug)]
pub struct TridiagonalOp {
    /// Sub-diagonal, `lower[i]` multiplies `x[i]` in row `i + 1`.
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    /// Super-diagonal, `upper[i]` multiplies `x[i + 1]` in row `i`.
    pub upper: Vec<f64>,
}

impl TridiagonalOp {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        debug_assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.upper[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    /// Matrix `I - scale * self`, the implicit-Euler system for this operator.
    pub fn identity_minus_scaled(&self, scale: f64) -> TridiagonalOp {
        TridiagonalOp {
            lower: self.lower.iter().map(|v| -scale * v).collect(),
            diag: self.diag.iter().map(|v| 1.0 - scale * v).collect(),
            upper: self.upper.iter().map(|v| -scale * v).collect(),
        }
    }

    /// Thomas algorithm. The implicit diffusion matrices used here are
    /// strictly diagonally dominant, so no pivoting is needed.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.diag.len();
        debug_assert_eq!(rhs.len(), n);
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0];
        if denom == 0.0 {
            return Err(numerical("zero pivot in tridiagonal solve"));
        }
        if n > 1 {
            c[0] = self.upper[0] / denom;
        }
        d[0] = rhs[0] / denom;
        for i in 1..n {
            denom = self.diag[i] - self.lower[i - 1] * c[i - 1];
            if denom == 0.0 {
                return Err(numerical("zero pivot in tridiagonal solve"));
            }
            if i + 1 < n {
                c[i] = self.upper[i] / denom;
            }
            d[i] = (rhs[i] - self.lower[i - 1] * d[i - 1]) / denom;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(numerical("non-finite value in tridiagonal solve"));
        }
        Ok(x)
    }
}

/// Second-order operator `a(x) D^2` with mirrored ghost nodes, the diffusion
/// part of the Hamilton-Jacobi-Bellman equation:
///
/// ```text
/// (L u)_i = a_i (u[i+1] - 2 u[i] + u[i-1]) / h^2,   u[-1] = u[0], u[n] = u[n-1].
/// ```
///
/// Rows sum to zero, so constants are annihilated up to and including the
/// boundary rows.
pub fn neumann_diffusion_matrix(grid: &Grid1D, a: &[f64]) -> Result<TridiagonalOp> {
    let n = grid.n_cells;
    if a.len() != n {
        return Err(invalid(format!("diffusion profile has {} entries, grid has {n}", a.len())));
    }
    let h2 = grid.h * grid.h;
    let mut lower = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n - 1];
    diag[0] = -a[0] / h2;
    upper[0] = a[0] / h2;
    for i in 1..n - 1 {
        lower[i - 1] = a[i] / h2;
        diag[i] = -2.0 * a[i] / h2;
        upper[i] = a[i] / h2;
    }
    lower[n - 2] = a[n - 1] / h2;
    diag[n - 1] = -a[n - 1] / h2;
    Ok(TridiagonalOp { lower, diag, upper })
}

/// Conservative second-order operator `D^2(a .)` acting on node weights, the
/// diffusion part of the Fokker-Planck equation in flux form: the face flux is
/// `((a w)[i+1] - (a w)[i]) / h` and boundary faces carry zero flux. Column
/// sums vanish, so the total mass is conserved exactly by both explicit
/// application and implicit solves.
pub fn fokker_planck_diffusion_matrix(grid: &Grid1D, a: &[f64]) -> Result<TridiagonalOp> {
    let n = grid.n_cells;
    if a.len() != n {
        return Err(invalid(format!("diffusion profile has {} entries, grid has {n}", a.len())));
    }
    let h2 = grid.h * grid.h;
    let mut lower = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n - 1];
    for i in 0..n {
        let faces = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        diag[i] = -faces * a[i] / h2;
        if i + 1 < n {
            upper[i] = a[i + 1] / h2;
        }
        if i > 0 {
            lower[i - 1] = a[i - 1] / h2;
        }
    }
    Ok(TridiagonalOp { lower, diag, upper })
}

/// Self-adjoint divergence-form operator `D(a D .)` with zero-flux faces,
/// used by the smoothing semigroup behind the couplings. Face coefficients
/// are arithmetic means, which keeps the matrix exactly symmetric; symmetry
/// is what makes the smoothed coupling monotone at the discrete level.
pub fn divergence_form_diffusion_matrix(grid: &Grid1D, a: &[f64]) -> Result<TridiagonalOp> {
    let n = grid.n_cells;
    if a.len() != n {
        return Err(invalid(format!("diffusion profile has {} entries, grid has {n}", a.len())));
    }
    let h2 = grid.h * grid.h;
    let mut lower = vec![0.0; n - 1];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n - 1];
    for i in 0..n - 1 {
        let face = 0.5 * (a[i] + a[i + 1]) / h2;
        upper[i] = face;
        lower[i] = face;
        diag[i] -= face;
        diag[i + 1] -= face;
    }
    Ok(TridiagonalOp { lower, diag, upper })
}

/// Wasserstein-1 distance of two measures on the same grid, via the cumulative
/// weight formula
///
/// ```text
/// d_1(m1, m2) = h * sum_i | sum_{k <= i} (w1 - w2)_k |,
/// ```
///
/// which is exact for node-supported measures on a uniform grid.
pub fn wasserstein1(m1: &GridMeasure, m2: &GridMeasure, grid: &Grid1D) -> Result<f64> {
    if m1.len() != grid.n_cells || m2.len() != grid.n_cells {
        return Err(invalid("measures and grid have mismatched sizes"));
    }
    let mut cum = 0.0;
    let mut dist = 0.0;
    for i in 0..grid.n_cells - 1 {
        cum += m1.weights[i] - m2.weights[i];
        dist += cum.abs();
    }
    Ok(dist * grid.h)
}

/// Deposits particle positions onto the grid by linear (cloud-in-cell)
/// weighting. With `exclude = Some(i)` the i-th particle is dropped and each
/// retained particle carries weight `1/(N-1)`; without exclusion the weights
/// are `1/N`. Deposition preserves the first moment of positions that lie
/// within the node span.
pub fn empirical_measure(
    positions: &[f64],
    exclude: Option<usize>,
    grid: &Grid1D,
) -> Result<GridMeasure> {
    if let Some(i) = exclude {
        if i >= positions.len() {
            return Err(invalid(format!("exclude index {i} out of range")));
        }
    }
    let retained = positions.len() - exclude.map_or(0, |_| 1);
    if retained == 0 {
        return Err(invalid("empirical measure needs at least one retained particle"));
    }
    let wt = 1.0 / retained as f64;
    let mut weights = vec![0.0; grid.n_cells];
    for (p, &x) in positions.iter().enumerate() {
        if exclude == Some(p) {
            continue;
        }
        if !grid.contains(x) {
            return Err(invalid(format!("particle position {x} outside the domain")));
        }
        deposit_linear(&mut weights, grid, x, wt);
    }
    GridMeasure::from_weights(weights)
}

/// Cloud-in-cell deposit of mass `wt` at position `x`.
pub(crate) fn deposit_linear(weights: &mut [f64], grid: &Grid1D, x: f64, wt: f64) {
    let s = (x - grid.lo) / grid.h - 0.5;
    if s <= 0.0 {
        weights[0] += wt;
    } else if s >= (grid.n_cells - 1) as f64 {
        weights[grid.n_cells - 1] += wt;
    } else {
        let j = (s.floor() as usize).min(grid.n_cells - 2);
        let frac = s - j as f64;
        weights[j] += wt * (1.0 - frac);
        weights[j + 1] += wt * frac;
    }
}

/// Piecewise-linear interpolation of a node field, constant beyond the
/// outermost nodes.
pub fn interpolate(field: &[f64], grid: &Grid1D, x: f64) -> f64 {
    let (j, frac) = grid.locate(x);
    if frac == 0.0 {
        field[j]
    } else {
        field[j] * (1.0 - frac) + field[j + 1] * frac
    }
}

/// Multilinear interpolation of a field over the tensor grid `Omega^n_dims`
/// stored row-major (last coordinate fastest). Coordinates clamp to the node
/// span exactly like [`interpolate`]. Reproduces multilinear functions of the
/// coordinates exactly.
pub fn interpolate_tensor(
    values: &[f64],
    grid: &Grid1D,
    n_dims: usize,
    point: &[f64],
) -> Result<f64> {
    if point.len() != n_dims {
        return Err(invalid(format!("point has {} coordinates, expected {n_dims}", point.len())));
    }
    let n = grid.n_cells;
    if values.len() != n.pow(n_dims as u32) {
        return Err(invalid(format!(
            "tensor has {} entries, expected {}^{n_dims}",
            values.len(),
            n
        )));
    }
    let located: Vec<(usize, f64)> = point.iter().map(|&x| grid.locate(x)).collect();
    let mut acc = 0.0;
    for corner in 0..1usize << n_dims {
        let mut weight = 1.0;
        let mut idx = 0usize;
        for (d, &(j, frac)) in located.iter().enumerate() {
            let hi_side = corner >> d & 1 == 1;
            weight *= if hi_side { frac } else { 1.0 - frac };
            if weight == 0.0 {
                break;
            }
            idx = idx * n + if hi_side { j + 1 } else { j };
        }
        if weight != 0.0 {
            acc += weight * values[idx];
        }
    }
    Ok(acc)
}
