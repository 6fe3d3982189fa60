//! Experiment configuration: a strict TOML schema with full defaults.
//!
//! Every key is optional and an empty file is a valid configuration, but
//! unknown keys are rejected with the offending name in the message. A typo
//! like `tolerence` silently falling back to a default would invalidate a
//! study, so strictness is not negotiable here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use reflected_mfg::convergence::SuiteParams;
use reflected_mfg::grid::{build_grid, TimeGrid};
use reflected_mfg::mfg::MfgParams;
use reflected_mfg::model::{DiscreteModel, ModelConfig};
use reflected_mfg::nash::NashParams;
use reflected_mfg::particles::ParticleParams;
use reflected_mfg::{io, Error, Result};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Spatial and temporal resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n_cells: usize,
    pub n_steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n_cells: 41, n_steps: 100 }
    }
}

/// Seeds, budgets and tolerances for the experiment commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Player counts for the convergence suite.
    #[serde(rename = "N_list", alias = "n_list")]
    pub n_list: Vec<usize>,
    /// Player count for the single-system commands (solve-nash, simulate).
    pub n_players: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub mc_budget: usize,
    pub n_random_configs: usize,
    pub n_t_slices: usize,
    pub lattice_stride: usize,
    pub memory_budget_bytes: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let nash = NashParams::default();
        let mfg = MfgParams::default();
        let particles = ParticleParams::default();
        ExperimentSection {
            n_list: vec![2, 3],
            n_players: 2,
            n_paths: particles.n_paths,
            seed: particles.seed,
            mc_budget: 2000,
            n_random_configs: 500,
            n_t_slices: 4,
            lattice_stride: 8,
            memory_budget_bytes: nash.memory_budget_bytes,
            fixed_point_tol: mfg.tol,
            fixed_point_max_iter: mfg.max_iter,
            inner_tol: nash.inner_tol,
            inner_max_iter: nash.max_inner,
        }
    }
}

/// Where artifacts go and which optional summary families to emit. The
/// primary artifacts of a command are always written; `formats` only gates
/// the extras (CSV summaries, JSON gap files).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec!["json".to_string(), "csv".to_string()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridSection,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| invalid(format!("config error: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.grid.n_cells < 4 {
            return Err(invalid("n_cells must be at least 4"));
        }
        if self.grid.n_steps == 0 {
            return Err(invalid("n_steps must be at least 1"));
        }
        let e = &self.experiment;
        if e.n_list.is_empty() || !e.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("N_list must be nonempty and strictly increasing"));
        }
        if e.n_list.iter().any(|&n| !(2..=4).contains(&n)) {
            return Err(invalid("N_list entries must lie in 2..=4"));
        }
        if !(2..=4).contains(&e.n_players) {
            return Err(invalid("n_players must lie in 2..=4"));
        }
        if e.n_paths < 2 {
            return Err(invalid("n_paths must be at least 2"));
        }
        if e.mc_budget == 0 || e.n_t_slices == 0 || e.lattice_stride == 0 {
            return Err(invalid("budgets and strides must be positive"));
        }
        if !(e.fixed_point_tol > 0.0) || !(e.inner_tol > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if e.fixed_point_max_iter == 0 || e.inner_max_iter == 0 {
            return Err(invalid("iteration caps must be positive"));
        }
        for format in &self.output.formats {
            if format != "json" && format != "csv" {
                return Err(invalid(format!("unsupported output format {format:?}")));
            }
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<DiscreteModel> {
        let grid =
            build_grid(self.grid.n_cells, (self.model.domain_lo, self.model.domain_hi))?;
        DiscreteModel::new(self.model.clone(), grid)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.model.horizon_t, self.grid.n_steps)
    }

    pub fn mfg_params(&self) -> MfgParams {
        MfgParams {
            tol: self.experiment.fixed_point_tol,
            max_iter: self.experiment.fixed_point_max_iter,
            ..MfgParams::default()
        }
    }

    pub fn nash_params(&self) -> NashParams {
        NashParams {
            inner_tol: self.experiment.inner_tol,
            max_inner: self.experiment.inner_max_iter,
            memory_budget_bytes: self.experiment.memory_budget_bytes,
        }
    }

    pub fn particle_params(&self) -> ParticleParams {
        ParticleParams {
            n_paths: self.experiment.n_paths,
            seed: self.experiment.seed,
            memory_budget_bytes: self.experiment.memory_budget_bytes,
        }
    }

    pub fn suite_params(&self, cache_dir: Option<PathBuf>) -> SuiteParams {
        SuiteParams {
            n_list: self.experiment.n_list.clone(),
            lattice_stride: self.experiment.lattice_stride,
            n_random_configs: self.experiment.n_random_configs,
            n_t_slices: self.experiment.n_t_slices,
            mc_budget: self.experiment.mc_budget,
            particles: self.particle_params(),
            nash: self.nash_params(),
            mfg: self.mfg_params(),
            seed: self.experiment.seed,
            cache_dir,
        }
    }

    pub fn wants_format(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }

    /// Stable digest of the experiment definition, recorded in manifests
    /// and compared by regression tooling. The output directory is where a
    /// run lands, not what it computes, so it stays out of the digest.
    pub fn hash(&self) -> Result<String> {
        let blob =
            serde_json::to_vec(&(&self.model, &self.grid, &self.experiment, &self.output.formats))?;
        Ok(io::hash_hex(io::hash_bytes(&blob)))
    }
}
