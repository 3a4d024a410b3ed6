//! Max-min design optimization.
//!
//! Alternates two stages against an expanding finite sample of worst-case
//! noise hyperparameters: an outer stochastic ascent on the sampling policy
//! of the budget-constrained design distribution (score-function gradient
//! with a variance-optimal baseline, box-projected), and an inner projected
//! quasi-Newton descent that finds the worst hyperparameter for the current
//! incumbent design and appends it to the sample. The final design is the
//! best sampled design under the worst-case utility.

use crate::design::{ConditionalBernoulli, Design, DesignError};
use crate::utility::{UtilityError, UtilityEvaluator};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("the worst-case hyperparameter sample is empty")]
    EmptyThetaSample,
    #[error("initial policy length {got} does not match sensor count {expected}")]
    PolicyLength { expected: usize, got: usize },
}

/// What the optimizer needs from a utility: evaluation, joint gradient,
/// problem dimensions, and an optional reference-point refresh. The PDE
/// evaluator implements this; tests substitute closed-form surrogates.
pub trait UtilityOracle {
    fn n_sensors(&self) -> usize;
    fn theta_dim(&self) -> usize;
    fn theta_box(&self) -> (DVector<f64>, DVector<f64>);
    fn utility(&self, design: &Design, theta: &DVector<f64>) -> Result<f64, UtilityError>;
    fn utility_and_grad(
        &self,
        design: &Design,
        theta: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>), UtilityError>;
    /// Observe the updated mean worst-case hyperparameter; returns whether
    /// internal state was rebuilt.
    fn update_reference(&mut self, _theta_bar: &DVector<f64>) -> Result<bool, UtilityError> {
        Ok(false)
    }
}

impl UtilityOracle for UtilityEvaluator {
    fn n_sensors(&self) -> usize {
        self.noise_model().n_sensors()
    }

    fn theta_dim(&self) -> usize {
        self.noise_model().theta_dim()
    }

    fn theta_box(&self) -> (DVector<f64>, DVector<f64>) {
        self.noise_model().theta_box()
    }

    fn utility(&self, design: &Design, theta: &DVector<f64>) -> Result<f64, UtilityError> {
        UtilityEvaluator::utility(self, design, theta)
    }

    fn utility_and_grad(
        &self,
        design: &Design,
        theta: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>), UtilityError> {
        UtilityEvaluator::utility_and_grad(self, design, theta)
    }

    fn update_reference(&mut self, theta_bar: &DVector<f64>) -> Result<bool, UtilityError> {
        UtilityEvaluator::update_reference(self, theta_bar)
    }
}

/// Inner (hyperparameter descent) settings: projected L-BFGS with Armijo
/// backtracking along the box-projected path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerConfig {
    pub max_iters: usize,
    /// Stop when the projected-gradient norm falls below this fraction of
    /// max(1, initial norm).
    pub grad_rel_tol: f64,
    pub memory: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            max_iters: 100,
            grad_rel_tol: 1e-6,
            memory: 10,
            armijo_c: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Designs sampled per policy iteration (and for incumbent/final picks).
    pub n_ens: usize,
    pub budget: usize,
    /// Policy ascent learning rate; halved after `halving_patience`
    /// consecutive non-improving iterations.
    pub eta: f64,
    pub halving_patience: usize,
    pub max_outer_iters: usize,
    pub max_policy_iters: usize,
    pub policy_step_tol: f64,
    /// Terminate when the inner stage returns a hyperparameter this close
    /// to an existing sample member (the max-min has stabilized).
    pub theta_stagnation_tol: f64,
    pub seed: u64,
    pub inner: InnerConfig,
    /// Starting policy; defaults to the uniform feasible expectation
    /// budget/n on every entry.
    pub initial_policy: Option<Vec<f64>>,
    /// Starting worst-case sample; defaults to the box midpoint.
    pub initial_thetas: Option<Vec<Vec<f64>>>,
}

impl OptimizerConfig {
    pub fn new(n_ens: usize, budget: usize, seed: u64) -> Self {
        OptimizerConfig {
            n_ens,
            budget,
            eta: 0.5,
            halving_patience: 5,
            max_outer_iters: 20,
            max_policy_iters: 100,
            policy_step_tol: 1e-12,
            theta_stagnation_tol: 1e-8,
            seed,
            inner: InnerConfig::default(),
            initial_policy: None,
            initial_thetas: None,
        }
    }
}

/// Worst-case utility of a design over the finite sample: exact minimum,
/// ties broken by the earliest index.
pub fn robust_min_utility<O: UtilityOracle + ?Sized>(
    oracle: &O,
    design: &Design,
    thetas: &[DVector<f64>],
) -> Result<(f64, usize), OptimizerError> {
    if thetas.is_empty() {
        return Err(OptimizerError::EmptyThetaSample);
    }
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for (k, theta) in thetas.iter().enumerate() {
        let v = oracle.utility(design, theta)?;
        if v < best {
            best = v;
            arg = k;
        }
    }
    Ok((best, arg))
}

/// Variance-optimal baseline for the score-function gradient estimator,
/// clamped to be nonnegative. Returns 0 when the policy is fully pinned
/// (degenerate denominator).
pub fn optimal_baseline(
    dist: &ConditionalBernoulli,
    designs: &[Design],
    values: &[f64],
) -> f64 {
    let n = designs.len();
    if n == 0 {
        return 0.0;
    }
    let denominator = n as f64 * dist.score_variance_sum();
    if denominator <= 1e-300 {
        return 0.0;
    }
    let grads: Vec<Vec<f64>> = designs.iter().map(|d| dist.grad_ln_pmf(d)).collect();
    let mut gsum = vec![0.0; dist.n()];
    for g in &grads {
        for (acc, &x) in gsum.iter_mut().zip(g) {
            *acc += x;
        }
    }
    let numerator: f64 = grads
        .iter()
        .zip(values)
        .map(|(g, &u)| u * g.iter().zip(&gsum).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    (numerator / denominator).max(0.0)
}

/// Outcome of one policy-ascent stage.
#[derive(Debug, Clone)]
pub struct PolicyOptOutcome {
    pub policy: Vec<f64>,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub mean_objective: f64,
    pub baseline: f64,
    pub grad_norm: f64,
}

/// Counters proving budget feasibility of every sampled design.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleCounters {
    pub total: u64,
    pub feasible: u64,
}

impl SampleCounters {
    fn record(&mut self, design: &Design, budget: usize) {
        self.total += 1;
        if design.count_active() == budget {
            self.feasible += 1;
        }
    }
}

/// Stochastic policy ascent: sample designs, evaluate worst-case utilities
/// over the finite sample (memoized upstream), step along the baselined
/// score-function gradient with box projection, until the projected step
/// stalls or the iteration cap is reached.
pub fn policy_opt<O: UtilityOracle + ?Sized>(
    oracle: &O,
    thetas: &[DVector<f64>],
    p0: Vec<f64>,
    config: &OptimizerConfig,
    rng: &mut ChaCha12Rng,
    counters: &mut SampleCounters,
) -> Result<PolicyOptOutcome, OptimizerError> {
    let mut p = p0;
    let mut eta = config.eta;
    let mut best_mean = f64::NEG_INFINITY;
    let mut non_improving = 0;
    let mut outcome = PolicyOptOutcome {
        policy: p.clone(),
        iterations: 0,
        final_step_norm: f64::INFINITY,
        mean_objective: f64::NAN,
        baseline: 0.0,
        grad_norm: 0.0,
    };

    for iter in 0..config.max_policy_iters {
        let dist = ConditionalBernoulli::new(&p, config.budget)?;
        let designs: Vec<Design> = (0..config.n_ens).map(|_| dist.sample(rng)).collect();
        for d in &designs {
            counters.record(d, config.budget);
        }
        let mut values = Vec::with_capacity(designs.len());
        for d in &designs {
            values.push(robust_min_utility(oracle, d, thetas)?.0);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if mean > best_mean {
            best_mean = mean;
            non_improving = 0;
        } else {
            non_improving += 1;
            if non_improving >= config.halving_patience {
                eta *= 0.5;
                non_improving = 0;
            }
        }

        let baseline = optimal_baseline(&dist, &designs, &values);
        let mut grad = vec![0.0; p.len()];
        for (d, &u) in designs.iter().zip(&values) {
            let g = dist.grad_ln_pmf(d);
            for (acc, &x) in grad.iter_mut().zip(&g) {
                *acc += (u - baseline) * x;
            }
        }
        let scale = 1.0 / designs.len() as f64;
        // A large clamped step can pin more entries at a bound than the
        // budget admits, leaving an empty conditional distribution; shrink
        // the step toward the current (valid) policy until it is accepted.
        let mut factor = 1.0;
        let (next, step_norm) = loop {
            let mut cand = p.clone();
            let mut step_norm_sq = 0.0;
            for (pi, g) in cand.iter_mut().zip(&grad) {
                let target = (*pi + factor * eta * scale * g).clamp(0.0, 1.0);
                step_norm_sq += (target - *pi) * (target - *pi);
                *pi = target;
            }
            if ConditionalBernoulli::new(&cand, config.budget).is_ok() {
                break (cand, step_norm_sq.sqrt());
            }
            factor *= 0.5;
            if factor < 1e-18 {
                break (p.clone(), 0.0);
            }
        };
        p = next;

        outcome.iterations = iter + 1;
        outcome.final_step_norm = step_norm;
        outcome.mean_objective = mean;
        outcome.baseline = baseline;
        outcome.grad_norm = (grad.iter().map(|g| g * g).sum::<f64>()).sqrt() * scale;
        if step_norm < config.policy_step_tol {
            break;
        }
    }
    outcome.policy = p;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub theta: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(theta: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| theta[i].clamp(lo[i], hi[i]))
}

/// Box-constrained minimization of `theta -> U(design, theta)` by projected
/// L-BFGS with Armijo backtracking; returns the best iterate on failure.
pub fn inner_minimize<O: UtilityOracle + ?Sized>(
    oracle: &O,
    design: &Design,
    theta0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    config: &InnerConfig,
) -> Result<InnerOutcome, OptimizerError> {
    let mut theta = project(theta0, lo, hi);
    let (mut f, mut g) = oracle.utility_and_grad(design, &theta)?;
    let pg_norm = |t: &DVector<f64>, grad: &DVector<f64>| {
        (t - project(&(t - grad), lo, hi)).norm()
    };
    let pg0 = pg_norm(&theta, &g);
    let tol = config.grad_rel_tol * pg0.max(1.0);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = pg0 <= tol;

    while !converged && iterations < config.max_iters {
        iterations += 1;
        let mut dir = lbfgs_direction(&g, &history);
        if dir.dot(&g) >= 0.0 {
            // Stale curvature made the model direction uphill; discard it.
            history.clear();
            dir = -&g;
        }
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..config.max_backtracks {
            let cand = project(&(&theta + alpha * &dir), lo, hi);
            let step = &cand - &theta;
            if step.norm() == 0.0 {
                break;
            }
            let (fc, gc) = oracle.utility_and_grad(design, &cand)?;
            if fc <= f + config.armijo_c * g.dot(&step) {
                let y = &gc - &g;
                let sy = step.dot(&y);
                if sy > 1e-10 * step.norm() * y.norm() {
                    history.push_back((step.clone(), y, 1.0 / sy));
                    if history.len() > config.memory {
                        history.pop_front();
                    }
                }
                theta = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        converged = pg_norm(&theta, &g) <= tol;
    }

    Ok(InnerOutcome {
        theta,
        value: f,
        iterations,
        converged,
    })
}

/// Standard two-loop recursion returning the descent direction `-H g`.
fn lbfgs_direction(
    g: &DVector<f64>,
    history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>,
) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= a * y;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += (a - b) * s;
    }
    -q
}

/// Per-outer-iteration trajectory record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub policy: Vec<f64>,
    pub policy_iterations: usize,
    pub policy_step_norm: f64,
    pub mean_objective: f64,
    pub baseline: f64,
    pub policy_grad_norm: f64,
    pub incumbent: String,
    pub incumbent_value: f64,
    pub theta_new: Vec<f64>,
    pub inner_iterations: usize,
    pub inner_value: f64,
    pub stagnated: bool,
    pub reference_refreshed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    PolicyConverged,
    ThetaStagnated,
    MaxOuterIterations,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub design_opt: Design,
    /// Worst-case utility of the selected design over the final sample.
    pub design_value: f64,
    /// The hyperparameter attaining that worst case.
    pub theta_opt: DVector<f64>,
    pub policy: Vec<f64>,
    pub theta_samples: Vec<DVector<f64>>,
    pub trajectory: Vec<OuterRecord>,
    pub termination: Termination,
    pub counters: SampleCounters,
}

/// Evaluate the worst-case utility of each distinct design in a batch and
/// return the best (design, value, worst-theta index); ties keep the
/// earliest design.
fn best_of_batch<O: UtilityOracle + ?Sized>(
    oracle: &O,
    batch: &[Design],
    thetas: &[DVector<f64>],
) -> Result<(Design, f64, usize), OptimizerError> {
    let mut seen: HashMap<u64, (f64, usize)> = HashMap::new();
    let mut best: Option<(Design, f64, usize)> = None;
    for d in batch {
        let key = d.bitmask();
        let (v, arg) = match seen.get(&key) {
            Some(&hit) => hit,
            None => {
                let r = robust_min_utility(oracle, d, thetas)?;
                seen.insert(key, r);
                r
            }
        };
        let better = match &best {
            None => true,
            Some((_, bv, _)) => v > *bv,
        };
        if better {
            best = Some((d.clone(), v, arg));
        }
    }
    Ok(best.expect("nonempty batch"))
}

/// Full max-min loop: policy ascent, incumbent selection, inner descent,
/// sample expansion, and final extraction from the optimized policy.
pub fn run<O: UtilityOracle + ?Sized>(
    oracle: &mut O,
    config: &OptimizerConfig,
) -> Result<RunResult, OptimizerError> {
    let nd = oracle.n_sensors();
    let (lo, hi) = oracle.theta_box();
    let mut thetas: Vec<DVector<f64>> = match &config.initial_thetas {
        Some(list) => list.iter().map(|t| DVector::from_vec(t.clone())).collect(),
        None => vec![0.5 * (&lo + &hi)],
    };
    if thetas.is_empty() {
        return Err(OptimizerError::EmptyThetaSample);
    }
    let mut p = match &config.initial_policy {
        Some(p0) => {
            if p0.len() != nd {
                return Err(OptimizerError::PolicyLength {
                    expected: nd,
                    got: p0.len(),
                });
            }
            p0.clone()
        }
        None => vec![config.budget as f64 / nd as f64; nd],
    };
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut counters = SampleCounters::default();
    let mut trajectory = Vec::new();
    let mut termination = Termination::MaxOuterIterations;

    for iteration in 0..config.max_outer_iters {
        let stage = policy_opt(oracle, &thetas, p, config, &mut rng, &mut counters)?;
        p = stage.policy.clone();

        // Incumbent: best worst-case design among a fresh batch.
        let dist = ConditionalBernoulli::new(&p, config.budget)?;
        let batch: Vec<Design> = (0..config.n_ens).map(|_| dist.sample(&mut rng)).collect();
        for d in &batch {
            counters.record(d, config.budget);
        }
        let (incumbent, incumbent_value, worst_idx) = best_of_batch(oracle, &batch, &thetas)?;

        // Inner stage starts from the incumbent's current worst member.
        let inner = inner_minimize(
            oracle,
            &incumbent,
            &thetas[worst_idx].clone(),
            &lo,
            &hi,
            &config.inner,
        )?;
        let stagnated = thetas
            .iter()
            .any(|t| (t - &inner.theta).norm() < config.theta_stagnation_tol);
        let mut refreshed = false;
        if !stagnated {
            thetas.push(inner.theta.clone());
            let mut mean = DVector::zeros(oracle.theta_dim());
            for t in &thetas {
                mean += t;
            }
            mean /= thetas.len() as f64;
            refreshed = oracle.update_reference(&mean)?;
        }

        trajectory.push(OuterRecord {
            iteration,
            policy: p.clone(),
            policy_iterations: stage.iterations,
            policy_step_norm: stage.final_step_norm,
            mean_objective: stage.mean_objective,
            baseline: stage.baseline,
            policy_grad_norm: stage.grad_norm,
            incumbent: incumbent.to_string(),
            incumbent_value,
            theta_new: inner.theta.iter().cloned().collect(),
            inner_iterations: inner.iterations,
            inner_value: inner.value,
            stagnated,
            reference_refreshed: refreshed,
        });

        if stagnated {
            termination = Termination::ThetaStagnated;
            break;
        }
        if stage.final_step_norm < config.policy_step_tol {
            termination = Termination::PolicyConverged;
            break;
        }
    }

    // Final extraction: fresh batch from the optimized policy.
    let dist = ConditionalBernoulli::new(&p, config.budget)?;
    let batch: Vec<Design> = (0..config.n_ens).map(|_| dist.sample(&mut rng)).collect();
    for d in &batch {
        counters.record(d, config.budget);
    }
    let (design_opt, design_value, worst_idx) = best_of_batch(oracle, &batch, &thetas)?;

    Ok(RunResult {
        design_opt,
        design_value,
        theta_opt: thetas[worst_idx].clone(),
        policy: p,
        theta_samples: thetas,
        trajectory,
        termination,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Separable surrogate: U = c . design + s . theta, minimized over the
    /// box at the lower or upper corner depending on the sign of s.
    struct ToyOracle {
        c: Vec<f64>,
        slope: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl ToyOracle {
        fn new(c: Vec<f64>, slope: Vec<f64>) -> Self {
            let dim = slope.len();
            ToyOracle {
                c,
                slope: DVector::from_vec(slope),
                lo: DVector::zeros(dim),
                hi: DVector::repeat(dim, 1.0),
            }
        }
    }

    impl UtilityOracle for ToyOracle {
        fn n_sensors(&self) -> usize {
            self.c.len()
        }

        fn theta_dim(&self) -> usize {
            self.slope.len()
        }

        fn theta_box(&self) -> (DVector<f64>, DVector<f64>) {
            (self.lo.clone(), self.hi.clone())
        }

        fn utility(&self, design: &Design, theta: &DVector<f64>) -> Result<f64, UtilityError> {
            let base: f64 = design
                .active_indices()
                .iter()
                .map(|&i| self.c[i])
                .sum();
            Ok(base + self.slope.dot(theta))
        }

        fn utility_and_grad(
            &self,
            design: &Design,
            theta: &DVector<f64>,
        ) -> Result<(f64, DVector<f64>), UtilityError> {
            Ok((self.utility(design, theta)?, self.slope.clone()))
        }
    }

    fn midpoint_theta(oracle: &impl UtilityOracle) -> Vec<DVector<f64>> {
        let (lo, hi) = oracle.theta_box();
        vec![0.5 * (lo + hi)]
    }

    #[test]
    fn robust_min_enumerates_and_breaks_ties_early() {
        let oracle = ToyOracle::new(vec![1.0, 2.0], vec![1.0]);
        let design = Design::new(vec![true, false]);
        let thetas = vec![
            DVector::from_vec(vec![0.9]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.5]),
        ];
        let (v, arg) = robust_min_utility(&oracle, &design, &thetas).unwrap();
        assert_relative_eq!(v, 1.1, max_relative = 1e-14);
        assert_eq!(arg, 1, "duplicate minima must keep the earliest index");
        // A duplicated member does not change the value.
        let (v2, _) = robust_min_utility(&oracle, &design, &thetas[..3]).unwrap();
        assert_relative_eq!(v, v2, max_relative = 1e-14);
    }

    #[test]
    fn baseline_clamps_and_degenerates_to_zero() {
        let p = vec![0.4, 0.6, 0.5, 0.3];
        let dist = ConditionalBernoulli::new(&p, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let designs: Vec<Design> = (0..16).map(|_| dist.sample(&mut rng)).collect();

        // All-zero utilities: numerator vanishes.
        assert_eq!(optimal_baseline(&dist, &designs, &[0.0; 16]), 0.0);
        // Uniformly negative utilities force a negative optimum -> clamp.
        assert_eq!(optimal_baseline(&dist, &designs, &[-1.0; 16]), 0.0);
        // Positive utilities give a strictly positive baseline.
        let values: Vec<f64> = designs
            .iter()
            .map(|d| 1.0 + d.active_indices()[0] as f64)
            .collect();
        assert!(optimal_baseline(&dist, &designs, &values) > 0.0);

        // Fully pinned policy: degenerate denominator falls back to zero.
        let pinned = ConditionalBernoulli::new(&[1.0, 1.0, 0.0, 0.0], 2).unwrap();
        let d = pinned.sample(&mut rng);
        assert_eq!(optimal_baseline(&pinned, &[d], &[5.0]), 0.0);
    }

    #[test]
    fn baseline_reduces_estimator_variance() {
        // Fixed six-entry toy problem, 200 paired resamples.
        let oracle = ToyOracle::new(vec![5.0, 4.0, 3.0, 0.5, 0.2, 0.1], vec![0.0]);
        let thetas = midpoint_theta(&oracle);
        let p = vec![0.5, 0.55, 0.45, 0.5, 0.4, 0.6];
        let dist = ConditionalBernoulli::new(&p, 3).unwrap();
        let n_ens = 16;
        let n_resample = 200;
        let dim = p.len();

        let mut plain: Vec<Vec<f64>> = Vec::new();
        let mut baselined: Vec<Vec<f64>> = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..n_resample {
            let designs: Vec<Design> = (0..n_ens).map(|_| dist.sample(&mut rng)).collect();
            let values: Vec<f64> = designs
                .iter()
                .map(|d| robust_min_utility(&oracle, d, &thetas).unwrap().0)
                .collect();
            let b = optimal_baseline(&dist, &designs, &values);
            let mut est0 = vec![0.0; dim];
            let mut estb = vec![0.0; dim];
            for (d, &u) in designs.iter().zip(&values) {
                let g = dist.grad_ln_pmf(d);
                for i in 0..dim {
                    est0[i] += u * g[i] / n_ens as f64;
                    estb[i] += (u - b) * g[i] / n_ens as f64;
                }
            }
            plain.push(est0);
            baselined.push(estb);
        }

        let total_variance = |runs: &[Vec<f64>]| -> f64 {
            let n = runs.len() as f64;
            (0..dim)
                .map(|i| {
                    let mean = runs.iter().map(|r| r[i]).sum::<f64>() / n;
                    runs.iter().map(|r| (r[i] - mean) * (r[i] - mean)).sum::<f64>() / n
                })
                .sum()
        };
        let v0 = total_variance(&plain);
        let vb = total_variance(&baselined);
        assert!(
            vb <= v0,
            "baselined variance {vb} must not exceed plain {v0}"
        );
    }

    #[test]
    fn policy_ascent_finds_the_top_entries_of_a_linear_utility() {
        let oracle = ToyOracle::new(vec![5.0, 4.0, 3.0, 0.5, 0.2, 0.1], vec![0.0]);
        let thetas = midpoint_theta(&oracle);
        let config = OptimizerConfig::new(64, 3, 17);
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let mut counters = SampleCounters::default();
        let out = policy_opt(
            &oracle,
            &thetas,
            vec![0.5; 6],
            &config,
            &mut rng,
            &mut counters,
        )
        .unwrap();
        assert_eq!(counters.total, counters.feasible);

        let dist = ConditionalBernoulli::new(&out.policy, 3).unwrap();
        let mut hits = 0;
        for _ in 0..200 {
            let d = dist.sample(&mut rng);
            if d[0] && d[1] && d[2] {
                hits += 1;
            }
        }
        assert!(
            hits >= 190,
            "top-3 selection frequency {}/200 below 0.95 (policy {:?})",
            hits,
            out.policy
        );
    }

    #[test]
    fn zero_learning_rate_freezes_the_policy() {
        let oracle = ToyOracle::new(vec![3.0, 2.0, 1.0], vec![0.0]);
        let thetas = midpoint_theta(&oracle);
        let mut config = OptimizerConfig::new(8, 2, 5);
        config.eta = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut counters = SampleCounters::default();
        let p0 = vec![0.7, 0.5, 0.3];
        let out = policy_opt(&oracle, &thetas, p0.clone(), &config, &mut rng, &mut counters)
            .unwrap();
        assert_eq!(out.policy, p0);
        assert_eq!(out.iterations, 1);
        assert_eq!(out.final_step_norm, 0.0);
    }

    #[test]
    fn pinned_feasible_policy_is_a_fixed_point() {
        let oracle = ToyOracle::new(vec![3.0, 2.0, 1.0, 0.5], vec![0.0]);
        let thetas = midpoint_theta(&oracle);
        let config = OptimizerConfig::new(8, 2, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut counters = SampleCounters::default();
        let p0 = vec![1.0, 0.0, 1.0, 0.0];
        let out = policy_opt(&oracle, &thetas, p0.clone(), &config, &mut rng, &mut counters)
            .unwrap();
        // The unique sampled design keeps the gradient at zero everywhere.
        assert_eq!(out.policy, p0);
        assert_eq!(out.iterations, 1);
    }

    /// Quadratic bowl with the minimum outside the box.
    struct QuadraticOracle {
        target: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    }

    impl UtilityOracle for QuadraticOracle {
        fn n_sensors(&self) -> usize {
            2
        }

        fn theta_dim(&self) -> usize {
            self.target.len()
        }

        fn theta_box(&self) -> (DVector<f64>, DVector<f64>) {
            (self.lo.clone(), self.hi.clone())
        }

        fn utility(&self, _d: &Design, theta: &DVector<f64>) -> Result<f64, UtilityError> {
            Ok((theta - &self.target).norm_squared())
        }

        fn utility_and_grad(
            &self,
            d: &Design,
            theta: &DVector<f64>,
        ) -> Result<(f64, DVector<f64>), UtilityError> {
            Ok((self.utility(d, theta)?, 2.0 * (theta - &self.target)))
        }
    }

    #[test]
    fn inner_descent_lands_on_the_projected_minimum() {
        let oracle = QuadraticOracle {
            target: DVector::from_vec(vec![2.0, -1.0, 0.4]),
            lo: DVector::zeros(3),
            hi: DVector::repeat(3, 1.0),
        };
        let design = Design::new(vec![true, true]);
        let theta0 = DVector::from_vec(vec![0.5, 0.5, 0.9]);
        let out = inner_minimize(
            &oracle,
            &design,
            &theta0,
            &oracle.lo.clone(),
            &oracle.hi.clone(),
            &InnerConfig::default(),
        )
        .unwrap();
        assert!(out.converged, "iterations {}", out.iterations);
        let expect = DVector::from_vec(vec![1.0, 0.0, 0.4]);
        assert!((out.theta - expect).norm() < 1e-6);
    }

    #[test]
    fn constant_utility_returns_start_immediately() {
        let oracle = ToyOracle::new(vec![1.0, 1.0], vec![0.0]);
        let design = Design::new(vec![true, false]);
        let (lo, hi) = oracle.theta_box();
        let theta0 = DVector::from_vec(vec![0.3]);
        let out = inner_minimize(&oracle, &design, &theta0, &lo, &hi, &InnerConfig::default())
            .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.theta, theta0);
    }

    #[test]
    fn full_loop_solves_the_separable_toy_problem() {
        // Utility decreases in theta, so the worst case sits at the box
        // upper corner; the best design takes the three largest weights.
        let mut oracle = ToyOracle::new(vec![5.0, 4.0, 3.0, 0.5, 0.2, 0.1], vec![-2.0, -1.0]);
        let mut config = OptimizerConfig::new(32, 3, 23);
        config.max_outer_iters = 6;
        let result = run(&mut oracle, &config).unwrap();

        assert_eq!(result.design_opt.active_indices(), vec![0, 1, 2]);
        assert_eq!(result.counters.total, result.counters.feasible);
        assert!(result.counters.total > 0);
        // Either the policy pins (step norm zero) or the inner stage starts
        // returning the same corner (stagnation) — never the iteration cap.
        assert_ne!(result.termination, Termination::MaxOuterIterations);
        let corner = DVector::from_vec(vec![1.0, 1.0]);
        assert!((result.theta_opt.clone() - corner).norm() < 1e-6);
        // One theta appended per non-stagnated outer iteration.
        let appended = result
            .trajectory
            .iter()
            .filter(|r| !r.stagnated)
            .count();
        assert_eq!(result.theta_samples.len(), 1 + appended);
        // Worst-case value over the sample is non-increasing as it grows.
        for pair in result.trajectory.windows(2) {
            assert!(pair[1].incumbent_value <= pair[0].incumbent_value + 1e-12);
        }
    }
}
