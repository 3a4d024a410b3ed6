//! Synthetic data generation and MAP-point estimation.
//!
//! Data are drawn from the generative model: parameter fields sampled from
//! the prior, pushed through the forward map, and corrupted with correlated
//! Gaussian noise at a reference hyperparameter. The MAP estimate minimizes
//! the negative log posterior (precision-weighted data misfit plus the prior
//! Cameron-Martin quadratic) by an inexact Gauss-Newton method with CG inner
//! solves preconditioned by the prior covariance.

use crate::fem::{spmv, Field};
use crate::forward::{ForwardError, ForwardProblem, Linearization};
use crate::noise::{MaskedPrecision, NoiseError, NoiseModel};
use crate::prior::GaussianPrior;
use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InverseError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("noise covariance at the reference hyperparameter is not positive definite")]
    NotPositiveDefinite,
    #[error("map cache i/o: {0}")]
    Cache(#[from] std::io::Error),
    #[error("map cache deserialization: {0}")]
    CacheFormat(#[from] serde_json::Error),
}

/// One synthetic observation record.
#[derive(Debug, Clone)]
pub struct DataSample {
    pub m_true: Field,
    pub noise: DVector<f64>,
    pub y: DVector<f64>,
}

/// Data synthesized once per experiment: truths, noise draws, observations,
/// and the reference hyperparameter the noise was drawn at.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub theta_bar: DVector<f64>,
    pub samples: Vec<DataSample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draw `n_samples` records. Each record uses its own RNG stream derived
/// from `seed`, so extending the dataset leaves existing records unchanged.
/// All sensors are observed; design masking happens later in the likelihood.
pub fn synthesize_data(
    prior: &GaussianPrior,
    forward: &ForwardProblem,
    noise_model: &NoiseModel,
    theta_bar: &DVector<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<SyntheticDataset, InverseError> {
    let gamma = noise_model.covariance(theta_bar)?;
    let chol = Cholesky::new(gamma).ok_or(InverseError::NotPositiveDefinite)?;
    let nd = forward.n_sensors();
    let samples = (0..n_samples)
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let m_true = prior.sample(&mut rng);
            let u = forward.solve_state(&m_true)?;
            let z = DVector::from_fn(nd, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = chol.l() * z;
            let y = forward.sensors().observe(&u) + &noise;
            Ok(DataSample { m_true, noise, y })
        })
        .collect::<Result<Vec<_>, InverseError>>()?;
    Ok(SyntheticDataset {
        seed,
        theta_bar: theta_bar.clone(),
        samples,
    })
}

/// Inexact Gauss-Newton settings for the MAP solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub max_gn_iters: usize,
    /// Terminate when the dual gradient norm (measured in the mass-weighted
    /// norm) falls below this fraction of max(1, initial norm).
    pub grad_rel_tol: f64,
    pub max_cg_iters: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            max_gn_iters: 25,
            grad_rel_tol: 1e-8,
            max_cg_iters: 200,
            armijo_c: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub m: Field,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Negative log posterior (up to a constant): precision-weighted misfit plus
/// the prior quadratic.
pub fn map_objective(
    prior: &GaussianPrior,
    forward: &ForwardProblem,
    w: &MaskedPrecision,
    y: &DVector<f64>,
    m: &Field,
) -> Result<f64, InverseError> {
    let u = forward.solve_state(m)?;
    let r = y - forward.sensors().observe(&u);
    Ok(0.5 * r.dot(&w.apply(&r)) + 0.5 * prior.cm_norm_sq(&(m - prior.mean())))
}

/// Dual gradient of the MAP objective at a linearization point.
pub fn map_gradient(
    prior: &GaussianPrior,
    lin: &Linearization,
    w: &MaskedPrecision,
    y: &DVector<f64>,
    m: &Field,
) -> Field {
    let r = y - lin.predicted();
    prior.apply_precision_dual(&(m - prior.mean())) - lin.jacobian_adjoint(&w.apply(&r))
}

/// Mass-weighted norm of a dual vector: sqrt(g' M^-1 g).
fn dual_norm(prior: &GaussianPrior, g: &Field) -> f64 {
    g.dot(&prior.solve_mass(g)).max(0.0).sqrt()
}

/// Prior-covariance preconditioner for the dual Newton system: maps a dual
/// residual to a primal vector through A^-1 M A^-1.
fn precondition(prior: &GaussianPrior, r: &Field) -> Field {
    prior.solve_a(&spmv(prior.mass(), &prior.solve_a(r)))
}

/// Minimize the negative log posterior by inexact Gauss-Newton: CG on the
/// (prior precision + GN misfit) Hessian with an Eisenstat-Walker forcing
/// term and Armijo backtracking on the full objective.
pub fn solve_map(
    forward: &ForwardProblem,
    prior: &GaussianPrior,
    w: &MaskedPrecision,
    y: &DVector<f64>,
    m0: &Field,
    config: &MapConfig,
) -> Result<MapResult, InverseError> {
    let mut m = m0.clone();
    let mut lin = forward.linearize(&m)?;
    let mut phi = {
        let r = y - lin.predicted();
        0.5 * r.dot(&w.apply(&r)) + 0.5 * prior.cm_norm_sq(&(&m - prior.mean()))
    };
    let mut grad = map_gradient(prior, &lin, w, y, &m);
    let gnorm0 = dual_norm(prior, &grad);
    let tol = config.grad_rel_tol * gnorm0.max(1.0);
    let mut gnorm = gnorm0;
    let mut converged = gnorm <= tol;
    let mut iterations = 0;

    while !converged && iterations < config.max_gn_iters {
        iterations += 1;
        let forcing = 0.5_f64.min((gnorm / gnorm0.max(1e-300)).sqrt());
        let delta = cg_newton_step(prior, &lin, w, &grad, forcing, config.max_cg_iters);

        // Armijo backtracking on the full objective.
        let slope = grad.dot(&delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..config.max_backtracks {
            let trial = &m + alpha * &delta;
            let phi_trial = map_objective(prior, forward, w, y, &trial)?;
            if phi_trial <= phi + config.armijo_c * alpha * slope {
                m = trial;
                phi = phi_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            log::warn!("MAP line search failed at iteration {iterations}; returning best iterate");
            break;
        }

        lin = forward.linearize(&m)?;
        grad = map_gradient(prior, &lin, w, y, &m);
        gnorm = dual_norm(prior, &grad);
        converged = gnorm <= tol;
    }

    Ok(MapResult {
        m,
        objective: phi,
        grad_norm: gnorm,
        iterations,
        converged,
    })
}

/// Preconditioned CG on (prior precision + GN Hessian) delta = -grad.
/// Returns the (primal) Newton direction; stops on the forcing tolerance,
/// the iteration cap, or detected non-positive curvature.
fn cg_newton_step(
    prior: &GaussianPrior,
    lin: &Linearization,
    w: &MaskedPrecision,
    grad: &Field,
    forcing: f64,
    max_iters: usize,
) -> Field {
    let apply = |v: &Field| prior.apply_precision_dual(v) + lin.gn_hessian_apply_dual(w, v);
    let mut x = Field::zeros(grad.len());
    let mut r = -grad;
    let mut z = precondition(prior, &r);
    let mut rz = r.dot(&z);
    let target = forcing * forcing * rz;
    let mut p = z.clone();
    for _ in 0..max_iters {
        if rz <= target || rz <= 0.0 {
            break;
        }
        let q = apply(&p);
        let pq = p.dot(&q);
        if pq <= 0.0 {
            // Not expected for this SPD operator; fall back to the progress
            // made so far (or the preconditioned gradient on iteration one).
            if x.amax() == 0.0 {
                x = precondition(prior, &-grad);
            }
            break;
        }
        let alpha = rz / pq;
        x += alpha * &p;
        r -= alpha * &q;
        z = precondition(prior, &r);
        let rz_new = r.dot(&z);
        p = &z + (rz_new / rz) * &p;
        rz = rz_new;
    }
    if x.amax() == 0.0 {
        x = precondition(prior, &-grad);
    }
    x
}

/// Cache key for fixed MAP points: every quantity that determines them.
#[derive(Serialize)]
struct CacheKey<'a> {
    nx: usize,
    ny: usize,
    gamma: f64,
    delta: f64,
    k_mat: [[f64; 2]; 2],
    prior_mean: f64,
    sensors: &'a [(f64, f64)],
    g_bottom: f64,
    g_top: f64,
    theta_bar: &'a [f64],
    dataset_seed: u64,
    n_samples: usize,
    solver: &'a MapConfig,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    grad_norms: Vec<f64>,
    iterations: Vec<usize>,
    converged: Vec<bool>,
    objectives: Vec<f64>,
    maps: Vec<Vec<f64>>,
}

fn cache_key(
    forward: &ForwardProblem,
    prior: &GaussianPrior,
    dataset: &SyntheticDataset,
    config: &MapConfig,
) -> String {
    let g = forward.grid();
    let p = prior.params();
    let key = CacheKey {
        nx: g.nx(),
        ny: g.ny(),
        gamma: p.gamma,
        delta: p.delta,
        k_mat: [
            [p.k_mat[(0, 0)], p.k_mat[(0, 1)]],
            [p.k_mat[(1, 0)], p.k_mat[(1, 1)]],
        ],
        prior_mean: p.mean,
        sensors: forward.sensors().points(),
        g_bottom: 0.0,
        g_top: 1.0,
        theta_bar: dataset.theta_bar.as_slice(),
        dataset_seed: dataset.seed,
        n_samples: dataset.len(),
        solver: config,
    };
    let bytes = serde_json::to_vec(&key).expect("cache key serialization");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    format!("{:x}", hasher.finalize())
}

/// MAP points for every dataset record at the reference hyperparameter with
/// all sensors active, optionally cached on disk keyed by a hash of the
/// defining configuration. Solves run concurrently.
pub fn compute_fixed_maps(
    forward: &ForwardProblem,
    prior: &GaussianPrior,
    noise_model: &NoiseModel,
    dataset: &SyntheticDataset,
    config: &MapConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<MapResult>, InverseError> {
    let key = cache_key(forward, prior, dataset, config);
    let path = cache_dir.map(|d| d.join(format!("maps-{}.json", &key[..16])));
    if let Some(p) = &path {
        if let Some(cached) = try_load_cache(p, &key)? {
            return Ok(cached);
        }
    }

    let gamma = noise_model.covariance(&dataset.theta_bar)?;
    let mask = vec![true; forward.n_sensors()];
    let w = MaskedPrecision::new(&gamma, &mask)?;
    let m0 = prior.mean().clone();
    let results = dataset
        .samples
        .par_iter()
        .map(|s| solve_map(forward, prior, &w, &s.y, &m0, config))
        .collect::<Result<Vec<_>, InverseError>>()?;

    if let Some(p) = &path {
        write_cache(p, &key, &results)?;
    }
    Ok(results)
}

fn try_load_cache(path: &PathBuf, key: &str) -> Result<Option<Vec<MapResult>>, InverseError> {
    if !path.exists() {
        return Ok(None);
    }
    let file: CacheFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.key != key {
        return Ok(None);
    }
    let out = file
        .maps
        .into_iter()
        .zip(file.objectives)
        .zip(file.grad_norms)
        .zip(file.iterations)
        .zip(file.converged)
        .map(|((((m, objective), grad_norm), iterations), converged)| MapResult {
            m: DVector::from_vec(m),
            objective,
            grad_norm,
            iterations,
            converged,
        })
        .collect();
    Ok(Some(out))
}

fn write_cache(path: &PathBuf, key: &str, results: &[MapResult]) -> Result<(), InverseError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = CacheFile {
        key: key.to_string(),
        grad_norms: results.iter().map(|r| r.grad_norm).collect(),
        iterations: results.iter().map(|r| r.iterations).collect(),
        converged: results.iter().map(|r| r.converged).collect(),
        objectives: results.iter().map(|r| r.objective).collect(),
        maps: results.iter().map(|r| r.m.as_slice().to_vec()).collect(),
    };
    std::fs::write(path, serde_json::to_vec(&file).expect("cache serialization"))?;
    Ok(())
}
