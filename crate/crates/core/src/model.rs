//! Model data: diffusion profile, Hamiltonian, and the smoothed couplings.
//!
//! The running cost couplings are built from a heat semigroup so that the
//! structural hypotheses (monotonicity, smoothness in the measure, Neumann
//! compatibility) hold at the discrete level rather than just in the limit:
//!
//! ```text
//! F(x, m) = c_F (S_eps S_eps m)(x),      G(x, m) = c_G (S_eps S_eps m)(x),
//! ```
//!
//! where `S_eps` is the zero-flux heat semigroup with the model's diffusion,
//! discretized by `SMOOTHER_STAGES` backward Euler steps. Backward Euler with
//! the self-adjoint divergence-form operator keeps `S_eps` symmetric, mass
//! conserving and positivity preserving unconditionally, which gives exact
//! discrete monotonicity:
//!
//! ```text
//! Integral (F(m1) - F(m2)) d(m1 - m2) = c_F h || S_eps (m1 - m2) / h ||^2 >= 0.
//! ```
//!
//! The measure derivative of `F` (and `G`) is explicit,
//!
//! ```text
//! dF/dm(x, m, y) = c_F k(x, y) - c_F Integral k(x, z) m(dz),
//! ```
//!
//! with `k` the smoothed kernel, normalized so it integrates to zero
//! against `m`. Because the couplings are linear in `m`, the first-order
//! expansion in the measure is exact; nonlinearity of the game enters only
//! through the Hamiltonian
//!
//! ```text
//! H(x, p) = c_H(x) (sqrt(1 + p^2) - 1),
//! ```
//!
//! which is smooth, has bounded gradient `|H_p| < c_H(x)` and curvature
//! `0 < H_pp <= c_H(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{divergence_form_diffusion_matrix, Grid1D, GridMeasure, TridiagonalOp};

/// Lower bound enforced on the diffusion profile; uniform ellipticity is a
/// standing assumption and configurations below the floor are rejected.
pub const ELLIPTICITY_FLOOR: f64 = 0.05;

/// Number of backward Euler stages per semigroup application.
pub const SMOOTHER_STAGES: usize = 4;

/// Diffusion coefficient `a(x) = sigma(x)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Constant { value: f64 },
    /// `a(x) = base + amplitude cos(2 pi (x - lo) / (hi - lo))`, an even
    /// profile about the midpoint with zero slope at both boundaries.
    CosineProfile { base: f64, amplitude: f64 },
}

/// Spatial weight `c_H(x)` of the Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    Constant { value: f64 },
    CosineProfile { base: f64, amplitude: f64 },
}

fn cosine_profile(base: f64, amplitude: f64, lo: f64, hi: f64, x: f64) -> f64 {
    base + amplitude * (2.0 * std::f64::consts::PI * (x - lo) / (hi - lo)).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingWeights {
    #[serde(rename = "c_F")]
    pub c_f: f64,
    #[serde(rename = "c_G")]
    pub c_g: f64,
}

impl Default for CouplingWeights {
    fn default() -> Self {
        CouplingWeights { c_f: 1.0, c_g: 1.0 }
    }
}

/// Full description of one game instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub domain_lo: f64,
    pub domain_hi: f64,
    #[serde(rename = "horizon_T")]
    pub horizon_t: f64,
    pub diffusion_spec: DiffusionSpec,
    pub hamiltonian_spec: HamiltonianSpec,
    /// Smoothing time of the coupling semigroup.
    pub smoothing_eps: f64,
    pub coupling_weights: CouplingWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            domain_lo: 0.0,
            domain_hi: 1.0,
            horizon_t: 0.5,
            diffusion_spec: DiffusionSpec::Constant { value: 0.1 },
            hamiltonian_spec: HamiltonianSpec::Constant { value: 1.0 },
            smoothing_eps: 0.05,
            coupling_weights: CouplingWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.domain_lo.is_finite() && self.domain_hi.is_finite())
            || self.domain_hi <= self.domain_lo
        {
            return Err(invalid("domain_lo must be below domain_hi"));
        }
        if !(self.horizon_t > 0.0) {
            return Err(invalid("horizon_T must be positive"));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(invalid("smoothing_eps must be positive"));
        }
        if !(self.coupling_weights.c_f >= 0.0 && self.coupling_weights.c_g >= 0.0) {
            return Err(invalid("coupling weights must be nonnegative"));
        }
        let a_min = match self.diffusion_spec {
            DiffusionSpec::Constant { value } => value,
            DiffusionSpec::CosineProfile { base, amplitude } => base - amplitude.abs(),
        };
        if !(a_min >= ELLIPTICITY_FLOOR) {
            return Err(invalid(format!(
                "diffusion must stay above the ellipticity floor {ELLIPTICITY_FLOOR}, min is {a_min}"
            )));
        }
        // c_H = 0 is allowed: it is the degenerate null limit used by the
        // verification suites. Negative weights are not.
        let ch_min = match self.hamiltonian_spec {
            HamiltonianSpec::Constant { value } => value,
            HamiltonianSpec::CosineProfile { base, amplitude } => base - amplitude.abs(),
        };
        if !(ch_min >= 0.0) {
            return Err(invalid("hamiltonian weight c_H(x) must be nonnegative"));
        }
        Ok(())
    }

    pub fn diffusion_at(&self, x: f64) -> f64 {
        match self.diffusion_spec {
            DiffusionSpec::Constant { value } => value,
            DiffusionSpec::CosineProfile { base, amplitude } => {
                cosine_profile(base, amplitude, self.domain_lo, self.domain_hi, x)
            }
        }
    }

    pub fn hamiltonian_weight_at(&self, x: f64) -> f64 {
        match self.hamiltonian_spec {
            HamiltonianSpec::Constant { value } => value,
            HamiltonianSpec::CosineProfile { base, amplitude } => {
                cosine_profile(base, amplitude, self.domain_lo, self.domain_hi, x)
            }
        }
    }
}

/// Value, first and second momentum derivative of the Hamiltonian at `(x, p)`.
pub fn hamiltonian_eval(config: &ModelConfig, x: f64, p: f64) -> Result<(f64, f64, f64)> {
    if !x.is_finite() || !p.is_finite() {
        return Err(invalid(format!("hamiltonian arguments must be finite, got ({x}, {p})")));
    }
    if x < config.domain_lo || x > config.domain_hi {
        return Err(invalid(format!("x = {x} outside the domain")));
    }
    let c = config.hamiltonian_weight_at(x);
    Ok(hamiltonian_raw(c, p))
}

/// `(H, H_p, H_pp)` for weight `c`: `H = c (sqrt(1 + p^2) - 1)`.
#[inline]
pub(crate) fn hamiltonian_raw(c: f64, p: f64) -> (f64, f64, f64) {
    let root = (1.0 + p * p).sqrt();
    (c * (root - 1.0), c * p / root, c / (root * root * root))
}

/// Model data sampled on a grid, with the smoothing semigroup prefactored.
/// Everything downstream (solvers, experiments) works through this.
pub struct DiscreteModel {
    pub config: ModelConfig,
    pub grid: Grid1D,
    /// Diffusion at the nodes.
    pub a: Vec<f64>,
    /// Hamiltonian weight at the nodes.
    pub c_h: Vec<f64>,
    /// Implicit Euler system for one stage of `S_eps`.
    smooth_stage: TridiagonalOp,
    /// Implicit Euler system for one stage of the mollifier `S_{eps/4}`.
    mollify_stage: TridiagonalOp,
}

impl DiscreteModel {
    pub fn new(config: ModelConfig, grid: Grid1D) -> Result<Self> {
        config.validate()?;
        let a: Vec<f64> = grid.nodes.iter().map(|&x| config.diffusion_at(x)).collect();
        let c_h: Vec<f64> = grid.nodes.iter().map(|&x| config.hamiltonian_weight_at(x)).collect();
        let op = divergence_form_diffusion_matrix(&grid, &a)?;
        let smooth_stage = op.identity_minus_scaled(config.smoothing_eps / SMOOTHER_STAGES as f64);
        let mollify_stage =
            op.identity_minus_scaled(config.smoothing_eps / (4.0 * SMOOTHER_STAGES as f64));
        Ok(DiscreteModel { config, grid, a, c_h, smooth_stage, mollify_stage })
    }

    /// Hamiltonian data at node `i`.
    #[inline]
    pub fn hamiltonian_at_node(&self, i: usize, p: f64) -> (f64, f64, f64) {
        hamiltonian_raw(self.c_h[i], p)
    }

    /// Drift magnitude bound `max_x c_H(x)`, used for advective CFL checks.
    pub fn drift_bound(&self) -> f64 {
        self.c_h.iter().fold(0.0_f64, |acc, &c| acc.max(c))
    }

    /// One application of `S_eps` to a weight (or density) vector.
    pub fn smooth(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut w = v.to_vec();
        for _ in 0..SMOOTHER_STAGES {
            w = self.smooth_stage.solve(&w)?;
        }
        Ok(w)
    }

    /// `S_eps` applied twice, the smoothing behind both couplings.
    pub fn double_smooth(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut w = v.to_vec();
        for _ in 0..2 * SMOOTHER_STAGES {
            w = self.smooth_stage.solve(&w)?;
        }
        Ok(w)
    }

    /// The mollifier `S_{eps/4}`, used to regularize point masses before they
    /// feed into measure-derivative directions.
    pub fn mollify(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut w = v.to_vec();
        for _ in 0..SMOOTHER_STAGES {
            w = self.mollify_stage.solve(&w)?;
        }
        Ok(w)
    }

    /// Running coupling `F(., m)` as a node field.
    pub fn coupling_f(&self, m: &GridMeasure) -> Result<Vec<f64>> {
        self.coupling_with_weight(self.config.coupling_weights.c_f, m.weights())
    }

    /// Terminal coupling `G(., m)` as a node field.
    pub fn coupling_g(&self, m: &GridMeasure) -> Result<Vec<f64>> {
        self.coupling_with_weight(self.config.coupling_weights.c_g, m.weights())
    }

    fn coupling_with_weight(&self, c: f64, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.grid.n_cells {
            return Err(invalid("measure does not live on the model grid"));
        }
        if c == 0.0 {
            return Ok(vec![0.0; self.grid.n_cells]);
        }
        let smoothed = self.double_smooth(weights)?;
        Ok(smoothed.iter().map(|w| c * w / self.grid.h).collect())
    }

    /// Action of the measure derivative of `F` on a signed direction `rho`
    /// (given as node weights): `x -> Integral dF/dm(x, m, y) rho(dy)`. The
    /// normalization term makes the kernel integrate to zero against `m`.
    pub fn delta_f_action(&self, m: &GridMeasure, rho: &[f64]) -> Result<Vec<f64>> {
        self.delta_action(self.config.coupling_weights.c_f, m, rho)
    }

    pub fn delta_g_action(&self, m: &GridMeasure, rho: &[f64]) -> Result<Vec<f64>> {
        self.delta_action(self.config.coupling_weights.c_g, m, rho)
    }

    fn delta_action(&self, c: f64, m: &GridMeasure, rho: &[f64]) -> Result<Vec<f64>> {
        if rho.len() != self.grid.n_cells || m.len() != self.grid.n_cells {
            return Err(invalid("direction does not live on the model grid"));
        }
        if c == 0.0 {
            return Ok(vec![0.0; self.grid.n_cells]);
        }
        // dF/dm(x,m)(rho) = c/h * S^2(rho - (1^T rho) m) by linearity.
        let total: f64 = rho.iter().sum();
        let centered: Vec<f64> =
            rho.iter().zip(m.weights()).map(|(r, w)| r - total * w).collect();
        let smoothed = self.double_smooth(&centered)?;
        Ok(smoothed.iter().map(|v| c * v / self.grid.h).collect())
    }

    /// Pointwise measure derivative `dF/dm(x, m, y)` at a pair of nodes.
    pub fn coupling_derivative(&self, m: &GridMeasure, x_idx: usize, y_idx: usize) -> Result<f64> {
        let n = self.grid.n_cells;
        if x_idx >= n || y_idx >= n || m.len() != n {
            return Err(invalid("node index outside the grid"));
        }
        let mut e = vec![0.0; n];
        e[y_idx] = 1.0;
        let action = self.delta_f_action(m, &e)?;
        Ok(action[x_idx])
    }

    /// Smoothed kernel matrix `k(x_i, y_j)` scaled by coupling weight `c`:
    /// entry `(i, j)` is the response of `c (S^2 m)(x_i) / h` to a unit atom
    /// at node `j`. Couplings of node-supported empirical measures reduce to
    /// row sums of this matrix, which is what the finite-player solver uses.
    pub fn coupling_kernel(&self, c: f64) -> Result<Vec<f64>> {
        let n = self.grid.n_cells;
        let mut kernel = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.double_smooth(&e)?;
            for i in 0..n {
                kernel[i * n + j] = c * col[i] / self.grid.h;
            }
        }
        Ok(kernel)
    }
}
