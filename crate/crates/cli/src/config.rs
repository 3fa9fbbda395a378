use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use symode_core::conservation::ResidualMode;
use symode_core::training::{LossWeights, Optimizer, TrainConfig};
use symode_core::{GenerationConfig, GroupConstants, ModelParams, SolverConfig};

use crate::error::CliError;

/// Everything a command can be configured with. Keys are written as flat
/// dotted paths, e.g. `solver.h = 0.01` or `loss.a1 = 0.0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds dataset generation, grad-check point draws and compare runs.
    pub seed: u64,
    pub solver: SolverConfig,
    pub data: DataSection,
    pub gen: GenSection,
    pub group: GroupConstants,
    pub loss: LossSection,
    pub train: TrainSection,
    pub audit: AuditSection,
    pub gradcheck: GradCheckSection,
    pub compare: CompareSection,
    /// Never written back, so outputs do not depend on where they land.
    #[serde(skip_serializing)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub theta1: f64,
    pub theta2: f64,
    pub n: usize,
    pub z0_min: f64,
    pub z0_max: f64,
    pub obs_times: Vec<f64>,
    pub noise_sigma: f64,
    pub margin: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            theta1: g.p_true.theta1,
            theta2: g.p_true.theta2,
            n: g.n,
            z0_min: g.z0_range.0,
            z0_max: g.z0_range.1,
            obs_times: g.obs_times,
            noise_sigma: g.noise_sigma,
            margin: g.margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub mode: ResidualMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { a1: w.a1, a2: w.a2, a3: w.a3, a4: w.a4, mode: ResidualMode::Chain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub theta1_init: f64,
    pub theta2_init: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            lr: t.learning_rate,
            max_iters: t.max_iters,
            grad_tol: t.grad_tol,
            fd_step: t.fd_step,
            theta1_init: 0.5,
            theta2_init: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    /// `(theta1, theta2)` pairs.
    pub thetas: Vec<[f64; 2]>,
    pub t_values: Vec<f64>,
    pub phi_values: Vec<f64>,
    /// Each of `c1, c2, c3` ranges over this list in the forward audit.
    pub c_values: Vec<f64>,
    pub u_values: Vec<f64>,
    pub v: f64,
    pub w: f64,
    pub k4_values: Vec<f64>,
    pub eps_list: Vec<f64>,
    pub scaling_phi_max: f64,
    pub scaling_points: usize,
    pub forward_tol: f64,
    pub backward_tol: f64,
    pub closed_form_tol: f64,
    pub slope_min: f64,
    pub slope_max: f64,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            thetas: vec![[1.0, 0.0], [1.5, 0.2]],
            t_values: vec![0.0, 1.0, 5.0],
            phi_values: vec![-1.2, -0.6, 0.0, 0.6, 1.2],
            c_values: vec![-2.0, 0.0, 1.0],
            u_values: vec![0.5, 1.0, 2.0],
            v: 0.3,
            w: -0.2,
            k4_values: vec![0.0, 1.0],
            eps_list: vec![1e-2, 5e-3, 2.5e-3],
            scaling_phi_max: 1.0,
            scaling_points: 41,
            forward_tol: 1e-10,
            backward_tol: 1e-10,
            closed_form_tol: 1e-9,
            slope_min: 1.9,
            slope_max: 2.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub points: usize,
    pub theta1_range: [f64; 2],
    pub theta2_range: [f64; 2],
    pub fd_step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Adds the dataset's true parameters when it records them.
    pub include_optimum: bool,
    /// Adds a `theta1 = 0` point checked against the closed-form gradient.
    pub include_linear: bool,
    pub linear_theta2: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            points: 20,
            theta1_range: [0.3, 1.7],
            theta2_range: [-0.5, 1.0],
            fd_step: 1e-6,
            rel_tol: 1e-4,
            abs_tol: 1e-9,
            include_optimum: true,
            include_linear: true,
            linear_theta2: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Number of generated datasets, seeded `seed + 1 ..= seed + runs`.
    /// Zero compares once on `data.path`.
    pub runs: u64,
    pub noise_sigma: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { runs: 5, noise_sigma: 0.05 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_owned(), source })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| CliError::Config { path: path.to_owned(), message })
    }

    pub fn generation(&self, seed: u64, noise_sigma: f64) -> GenerationConfig {
        GenerationConfig {
            p_true: ModelParams::new(self.gen.theta1, self.gen.theta2),
            n: self.gen.n,
            z0_range: (self.gen.z0_min, self.gen.z0_max),
            obs_times: self.gen.obs_times.clone(),
            noise_sigma,
            seed,
            margin: self.gen.margin,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { a1: self.loss.a1, a2: self.loss.a2, a3: self.loss.a3, a4: self.loss.a4 }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.train.optimizer,
            learning_rate: self.train.lr,
            max_iters: self.train.max_iters,
            grad_tol: self.train.grad_tol,
            fd_step: self.train.fd_step,
            weights: self.weights(),
            gc: self.group.clone(),
            mode: self.loss.mode,
            seed: self.seed,
            solver: self.solver.clone(),
        }
    }

    pub fn initial_params(&self) -> ModelParams {
        ModelParams::new(self.train.theta1_init, self.train.theta2_init)
    }

    /// The resolved configuration as flat `section.key = value` lines.
    pub fn to_flat_toml(&self) -> Result<String, CliError> {
        let value = toml::Value::try_from(self).map_err(|e| CliError::Internal(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(table) => {
            for (key, v) in table {
                let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                flatten(&path, v, out);
            }
        }
        other => {
            let _ = writeln!(out, "{prefix} = {other}");
        }
    }
}
