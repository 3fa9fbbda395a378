//! Synthetic experiments: random initial positions, positions observed at
//! fixed times from the closed-form flow, plus optional Gaussian noise.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{exact_solution, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub t: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub id: u64,
    pub z0: f64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub theta1_true: Option<f64>,
    pub theta2_true: Option<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub experiments: Vec<ExperimentRecord>,
}

impl Dataset {
    pub fn true_params(&self) -> Option<ModelParams> {
        Some(ModelParams::new(self.meta.theta1_true?, self.meta.theta2_true?))
    }

    pub fn observation_count(&self) -> usize {
        self.experiments.iter().map(|e| e.observations.len()).sum()
    }

    /// Checks the structural invariants. Errors name the offending field as a path,
    /// e.g. `experiments[3].observations[1].t`.
    pub fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.meta.noise_sigma.is_nan() || self.meta.noise_sigma < 0.0 {
            return Err(Error::Config(format!("meta.noise_sigma must be >= 0, got {}", self.meta.noise_sigma)));
        }
        let mut ids = HashSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            if !ids.insert(e.id) {
                return Err(Error::Config(format!("experiments[{i}].id: duplicate id {}", e.id)));
            }
            if !e.z0.is_finite() {
                return Err(Error::Config(format!("experiments[{i}].z0: not finite")));
            }
            if e.observations.is_empty() {
                return Err(Error::Config(format!("experiments[{i}].observations: empty")));
            }
            let mut prev = 0.0;
            for (k, o) in e.observations.iter().enumerate() {
                if !(o.t.is_finite() && o.t > prev) {
                    return Err(Error::Config(format!(
                        "experiments[{i}].observations[{k}].t: times must be positive and strictly increasing (got {} after {prev})",
                        o.t
                    )));
                }
                if !o.z.is_finite() {
                    return Err(Error::Config(format!("experiments[{i}].observations[{k}].z: not finite")));
                }
                prev = o.t;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub p_true: ModelParams,
    pub n: usize,
    pub z0_range: (f64, f64),
    pub obs_times: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Distance kept between the initial phase and the equilibria `+-pi/2`.
    pub margin: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            p_true: ModelParams::new(1.0, 0.5),
            n: 50,
            z0_range: (-0.9, 0.4),
            obs_times: vec![1.0],
            noise_sigma: 0.0,
            seed: 0,
            margin: 0.1,
        }
    }
}

/// Interval of initial positions whose phase stays `margin` away from the equilibria.
/// `None` means every `z0` is admissible (`theta1` numerically zero).
pub fn admissible_z0_interval(p: &ModelParams, margin: f64) -> Option<(f64, f64)> {
    if p.theta1.abs() < crate::model::THETA1_MIN {
        return None;
    }
    let a = (-FRAC_PI_2 + margin - p.theta2) / p.theta1;
    let b = (FRAC_PI_2 - margin - p.theta2) / p.theta1;
    Some((a.min(b), a.max(b)))
}

pub fn generate_dataset(cfg: &GenerationConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", cfg.noise_sigma)));
    }
    if !(cfg.margin > 0.0 && cfg.margin < FRAC_PI_2) {
        return Err(Error::Config(format!("margin must lie in (0, pi/2), got {}", cfg.margin)));
    }
    if !cfg.p_true.is_finite() {
        return Err(Error::Config("true parameters must be finite".into()));
    }
    let (lo, hi) = cfg.z0_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("z0 range [{lo}, {hi}] is not a valid interval")));
    }
    if cfg.obs_times.is_empty() {
        return Err(Error::Config("at least one observation time is required".into()));
    }
    let mut prev = 0.0;
    for &t in &cfg.obs_times {
        if !(t.is_finite() && t > prev) {
            return Err(Error::Config(format!(
                "observation times must be positive and strictly increasing, got {:?}",
                cfg.obs_times
            )));
        }
        prev = t;
    }
    if let Some((a, b)) = admissible_z0_interval(&cfg.p_true, cfg.margin) {
        // open interval: the boundary itself sits exactly at the margin
        if !(lo > a && hi < b) {
            return Err(Error::Config(format!(
                "z0 range [{lo}, {hi}] leaves the symmetry domain; admissible interval is ({a}, {b}) for margin {}",
                cfg.margin
            )));
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let experiments = (0..cfg.n as u64)
        .into_par_iter()
        .map(|id| {
            // one counter-based substream per record keeps the output independent of scheduling
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id);
            let z0 = if lo == hi { lo } else { rng.random_range(lo..hi) };
            let observations = cfg
                .obs_times
                .iter()
                .map(|&t| {
                    let clean = exact_solution(z0, t, &cfg.p_true)?;
                    let z = if cfg.noise_sigma > 0.0 { clean + noise.sample(&mut rng) } else { clean };
                    Ok(Observation { t, z })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentRecord { id, z0, observations })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        meta: DatasetMeta {
            theta1_true: Some(cfg.p_true.theta1),
            theta2_true: Some(cfg.p_true.theta2),
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed,
            margin: cfg.margin,
        },
        experiments,
    })
}
