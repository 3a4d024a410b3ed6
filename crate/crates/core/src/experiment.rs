//! Declarative experiment description.
//!
//! An [`ExperimentConfig`] is the serialized form of a complete sensor
//! placement study: mesh, prior, sensor locations, noise family, synthetic
//! data sampling, and optimizer settings. [`ExperimentConfig::build`]
//! validates the description and wires it into a ready-to-run
//! [`UtilityEvaluator`] plus [`OptimizerConfig`]. Validation runs before any
//! assembly or solve so misconfigured studies fail fast and cheaply.

use crate::fem::{FemError, Grid};
use crate::forward::{ForwardError, ForwardProblem, SensorArray};
use crate::inverse::{synthesize_data, InverseError, MapConfig};
use crate::noise::NoiseModel;
use crate::optimizer::{InnerConfig, OptimizerConfig};
use crate::prior::{GaussianPrior, PriorParams};
use crate::utility::{EvalConfig, UtilityError, UtilityEvaluator};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Inverse(#[from] InverseError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub gamma: f64,
    pub delta: f64,
    /// Anisotropy of the operator's diffusion term, row-major 2x2.
    pub k: [[f64; 2]; 2],
    pub mean: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = PriorParams::default();
        PriorSection {
            gamma: p.gamma,
            delta: p.delta,
            k: [
                [p.k_mat[(0, 0)], p.k_mat[(0, 1)]],
                [p.k_mat[(1, 0)], p.k_mat[(1, 1)]],
            ],
            mean: p.mean,
        }
    }
}

impl PriorSection {
    fn params(&self) -> PriorParams {
        PriorParams {
            gamma: self.gamma,
            delta: self.delta,
            k_mat: Matrix2::new(self.k[0][0], self.k[0][1], self.k[1][0], self.k[1][1]),
            mean: self.mean,
        }
    }
}

/// Sensor locations: either an explicit point list or a regular interior
/// lattice (`grid = [nx_s, ny_s]` gives points at (i/(nx_s+1), j/(ny_s+1))).
/// Exactly one of the two forms must be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    pub grid: Option<[usize; 2]>,
    pub points: Option<Vec<[f64; 2]>>,
}

impl SensorSection {
    fn count(&self) -> Result<usize, ExperimentError> {
        match (&self.grid, &self.points) {
            (Some([gx, gy]), None) => {
                if *gx == 0 || *gy == 0 {
                    Err(invalid("sensor lattice dimensions must be positive"))
                } else {
                    Ok(gx * gy)
                }
            }
            (None, Some(pts)) => {
                if pts.is_empty() {
                    return Err(invalid("sensor point list is empty"));
                }
                for (i, p) in pts.iter().enumerate() {
                    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                        return Err(invalid(format!(
                            "sensor {i} at ({}, {}) lies outside the unit square",
                            p[0], p[1]
                        )));
                    }
                }
                Ok(pts.len())
            }
            _ => Err(invalid(
                "sensors require exactly one of `grid` or `points`",
            )),
        }
    }

    fn array(&self, grid: Grid) -> Result<SensorArray, ExperimentError> {
        match (&self.grid, &self.points) {
            (Some([gx, gy]), None) => Ok(SensorArray::regular(grid, *gx, *gy)?),
            (None, Some(pts)) => {
                let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p[0], p[1])).collect();
                Ok(SensorArray::new(grid, &pairs)?)
            }
            _ => unreachable!("checked by validate"),
        }
    }
}

/// Noise covariance family plus its hyperparameter box. `variant` selects the
/// family; boxes that do not belong to the chosen family are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub variant: String,
    pub sigma_box: [f64; 2],
    #[serde(default)]
    pub rho_box: Option<[f64; 2]>,
    #[serde(default)]
    pub ell1_box: Option<[f64; 2]>,
    #[serde(default)]
    pub ell2_box: Option<[f64; 2]>,
}

const VARIANT_TWO_SENSOR: &str = "two_sensor_correlated";
const VARIANT_GRID_EXP: &str = "grid_exponential";

fn check_box(name: &str, b: [f64; 2], positive: bool) -> Result<(), ExperimentError> {
    // negated form also rejects NaN bounds
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(b[0] <= b[1]) {
        return Err(invalid(format!("{name} bounds are not ordered: {b:?}")));
    }
    if positive && b[0] <= 0.0 {
        return Err(invalid(format!("{name} lower bound must be positive: {b:?}")));
    }
    Ok(())
}

impl NoiseSection {
    fn validate(&self, n_sensors: usize) -> Result<(), ExperimentError> {
        check_box("sigma_box", self.sigma_box, true)?;
        match self.variant.as_str() {
            VARIANT_TWO_SENSOR => {
                if n_sensors != 2 {
                    return Err(invalid(format!(
                        "{VARIANT_TWO_SENSOR} requires exactly 2 sensors, config has {n_sensors}"
                    )));
                }
                let rho = self
                    .rho_box
                    .ok_or_else(|| invalid(format!("{VARIANT_TWO_SENSOR} requires rho_box")))?;
                check_box("rho_box", rho, false)?;
                if rho[0] <= -1.0 || rho[1] >= 1.0 {
                    return Err(invalid(format!(
                        "rho_box must lie strictly inside (-1, 1): {rho:?}"
                    )));
                }
                if self.ell1_box.is_some() || self.ell2_box.is_some() {
                    return Err(invalid(format!(
                        "ell1_box/ell2_box are not used by {VARIANT_TWO_SENSOR}"
                    )));
                }
            }
            VARIANT_GRID_EXP => {
                let e1 = self
                    .ell1_box
                    .ok_or_else(|| invalid(format!("{VARIANT_GRID_EXP} requires ell1_box")))?;
                let e2 = self
                    .ell2_box
                    .ok_or_else(|| invalid(format!("{VARIANT_GRID_EXP} requires ell2_box")))?;
                check_box("ell1_box", e1, true)?;
                check_box("ell2_box", e2, true)?;
                if self.rho_box.is_some() {
                    return Err(invalid(format!(
                        "rho_box is not used by {VARIANT_GRID_EXP}"
                    )));
                }
            }
            other => {
                return Err(invalid(format!(
                    "unknown noise variant `{other}` (expected {VARIANT_TWO_SENSOR} or {VARIANT_GRID_EXP})"
                )))
            }
        }
        Ok(())
    }

    fn model(&self, sensors: &SensorArray) -> NoiseModel {
        let b = |v: [f64; 2]| (v[0], v[1]);
        match self.variant.as_str() {
            VARIANT_TWO_SENSOR => NoiseModel::TwoSensorCorrelated {
                sigma_box: b(self.sigma_box),
                rho_box: b(self.rho_box.expect("checked by validate")),
            },
            VARIANT_GRID_EXP => NoiseModel::GridExponential {
                positions: sensors.points().to_vec(),
                sigma_box: b(self.sigma_box),
                ell1_box: b(self.ell1_box.expect("checked by validate")),
                ell2_box: b(self.ell2_box.expect("checked by validate")),
            },
            _ => unreachable!("checked by validate"),
        }
    }

    /// Seed point for the worst-case search: noise levels at the box top,
    /// where the utility is lowest for every design, and correlation
    /// parameters at the midpoint, where the worst case depends on the
    /// design geometry. Starting the expanding sample here keeps the
    /// worst-case ranking honest for designs whose sensors the inner
    /// optimizer has not visited yet.
    fn high_noise_theta(&self, n_sensors: usize) -> Vec<f64> {
        let mid = |v: [f64; 2]| 0.5 * (v[0] + v[1]);
        match self.variant.as_str() {
            VARIANT_TWO_SENSOR => vec![
                self.sigma_box[1],
                self.sigma_box[1],
                mid(self.rho_box.expect("checked by validate")),
            ],
            VARIANT_GRID_EXP => {
                let mut t = vec![self.sigma_box[1]; n_sensors];
                t.push(mid(self.ell1_box.expect("checked by validate")));
                t.push(mid(self.ell2_box.expect("checked by validate")));
                t
            }
            _ => unreachable!("checked by validate"),
        }
    }
}

/// Synthetic-data generation: sample count and the seed that fixes both the
/// ground-truth field draws and their noisy observations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub n_saa: usize,
    pub data_seed: u64,
}

/// Optimizer settings. `budget`, `n_ens`, and `seed` are required; the rest
/// override [`OptimizerConfig`] defaults when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub budget: usize,
    pub n_ens: usize,
    pub seed: u64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub halving_patience: Option<usize>,
    #[serde(default)]
    pub max_outer_iters: Option<usize>,
    #[serde(default)]
    pub max_policy_iters: Option<usize>,
    #[serde(default)]
    pub policy_step_tol: Option<f64>,
    #[serde(default)]
    pub theta_stagnation_tol: Option<f64>,
    #[serde(default)]
    pub inner: Option<InnerConfig>,
}

impl OptimizerSection {
    fn config(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::new(self.n_ens, self.budget, self.seed);
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.halving_patience {
            cfg.halving_patience = v;
        }
        if let Some(v) = self.max_outer_iters {
            cfg.max_outer_iters = v;
        }
        if let Some(v) = self.max_policy_iters {
            cfg.max_policy_iters = v;
        }
        if let Some(v) = self.policy_step_tol {
            cfg.policy_step_tol = v;
        }
        if let Some(v) = self.theta_stagnation_tol {
            cfg.theta_stagnation_tol = v;
        }
        if let Some(v) = &self.inner {
            cfg.inner = v.clone();
        }
        cfg
    }
}

/// Utility-evaluator settings; every field overrides an [`EvalConfig`]
/// default when present. The MAP solver settings live in the separate `map`
/// section, and the cache directory is supplied at build time so the config
/// digest stays independent of filesystem layout.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorSection {
    pub rank_override: Option<usize>,
    pub oversample: Option<usize>,
    pub power_iters: Option<usize>,
    pub eig_seed: Option<u64>,
    pub refresh_threshold: Option<f64>,
}

impl EvaluatorSection {
    fn config(&self, map: MapConfig, cache_dir: Option<&Path>) -> EvalConfig {
        let mut cfg = EvalConfig {
            map,
            cache_dir: cache_dir.map(Path::to_path_buf),
            ..EvalConfig::default()
        };
        if let Some(v) = self.rank_override {
            cfg.rank_override = Some(v);
        }
        if let Some(v) = self.oversample {
            cfg.oversample = v;
        }
        if let Some(v) = self.power_iters {
            cfg.power_iters = v;
        }
        if let Some(v) = self.eig_seed {
            cfg.eig_seed = v;
        }
        if let Some(v) = self.refresh_threshold {
            cfg.refresh_threshold = v;
        }
        cfg
    }
}

/// A complete, serializable experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSection,
    #[serde(default)]
    pub prior: PriorSection,
    pub sensors: SensorSection,
    pub noise: NoiseSection,
    pub sampling: SamplingSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default)]
    pub map: MapConfig,
}

/// Everything needed to run the optimization loop.
pub struct ExperimentBundle {
    pub evaluator: UtilityEvaluator,
    pub optimizer: OptimizerConfig,
}

impl ExperimentConfig {
    /// Checks every cross-field constraint without assembling anything.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.mesh.nx == 0 || self.mesh.ny == 0 {
            return Err(invalid("mesh must have at least one cell per axis"));
        }
        if self.prior.gamma <= 0.0 || self.prior.delta <= 0.0 {
            return Err(invalid("prior gamma and delta must be positive"));
        }
        let k = &self.prior.k;
        if (k[0][1] - k[1][0]).abs() > 1e-14 {
            return Err(invalid("prior anisotropy matrix must be symmetric"));
        }
        if k[0][0] <= 0.0 || k[0][0] * k[1][1] - k[0][1] * k[1][0] <= 0.0 {
            return Err(invalid("prior anisotropy matrix must be positive definite"));
        }
        let n_sensors = self.sensors.count()?;
        self.noise.validate(n_sensors)?;
        if self.sampling.n_saa == 0 {
            return Err(invalid("n_saa must be at least 1"));
        }
        if self.optimizer.budget == 0 {
            return Err(invalid("budget must be at least 1"));
        }
        if self.optimizer.budget > n_sensors {
            return Err(invalid(format!(
                "budget {} exceeds the {} available sensors",
                self.optimizer.budget, n_sensors
            )));
        }
        if self.optimizer.n_ens == 0 {
            return Err(invalid("n_ens must be at least 1"));
        }
        if matches!(self.optimizer.eta, Some(v) if v <= 0.0) {
            return Err(invalid("eta must be positive"));
        }
        if matches!(self.evaluator.refresh_threshold, Some(v) if v <= 0.0) {
            return Err(invalid("refresh_threshold must be positive"));
        }
        if self.map.grad_rel_tol <= 0.0 || self.map.max_gn_iters == 0 {
            return Err(invalid("map solver needs a positive tolerance and iteration cap"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; embedded in output artifacts
    /// so results can be traced back to the exact configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }

    /// Validates and assembles the full problem: prior, forward operator,
    /// synthetic dataset, fixed reference MAPs, and optimizer settings.
    pub fn build(&self, cache_dir: Option<&Path>) -> Result<ExperimentBundle, ExperimentError> {
        self.validate()?;
        let grid = Grid::new(self.mesh.nx, self.mesh.ny);
        let prior = GaussianPrior::new(grid, self.prior.params())?;
        let sensors = self.sensors.array(grid)?;
        let noise = self.noise.model(&sensors);
        let forward = ForwardProblem::new(grid, sensors, 0.0, 1.0);
        let theta_bar = noise.theta_midpoint();
        let dataset = synthesize_data(
            &prior,
            &forward,
            &noise,
            &theta_bar,
            self.sampling.n_saa,
            self.sampling.data_seed,
        )?;
        let eval_cfg = self.evaluator.config(self.map.clone(), cache_dir);
        let evaluator =
            UtilityEvaluator::new(Arc::new(prior), Arc::new(forward), noise, dataset, eval_cfg)?;
        let mut optimizer = self.optimizer.config();
        optimizer.initial_thetas = Some(vec![self
            .noise
            .high_noise_theta(self.sensors.count()?)]);
        Ok(ExperimentBundle {
            evaluator,
            optimizer,
        })
    }
}
