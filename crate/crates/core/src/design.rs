//! Conditional Bernoulli distribution over binary designs with a fixed number
//! of active entries.
//!
//! Given per-entry activation probabilities `p` and a budget `z`, the
//! distribution is an independent Bernoulli vector conditioned on having
//! exactly `z` ones. Probabilities, sequential sampling and inclusion
//! probabilities all reduce to elementary symmetric polynomials
//! `R(k, A) = sum over k-subsets S of A of prod_{i in S} w_i` of the odds
//! `w_i = p_i / (1 - p_i)`, evaluated with the stable recursion
//! `R(k, A + {j}) = R(k, A) + w_j R(k-1, A)`. Entries with `p_i` exactly 0 or
//! 1 are excluded from the combinatorics and forced off/on. When the odds
//! spread exceeds `1e8` (or products risk overflow) all tables switch to
//! log-space with log-sum-exp accumulation.

use rand::Rng;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("budget {budget} infeasible: {forced_on} entries forced on, at most {max_active} can be active")]
    InfeasibleBudget {
        budget: usize,
        forced_on: usize,
        max_active: usize,
    },
    #[error("policy entry {index} is {value}, expected a probability in [0, 1]")]
    InvalidPolicy { index: usize, value: f64 },
}

/// A binary sensor-activation pattern.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Design {
    bits: Vec<bool>,
}

impl Design {
    pub fn new(bits: Vec<bool>) -> Self {
        Design { bits }
    }

    pub fn from_indices(n: usize, active: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in active {
            bits[i] = true;
        }
        Design { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn as_mask(&self) -> &[bool] {
        &self.bits
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Compact key for memoization; designs are limited to 64 entries.
    pub fn bitmask(&self) -> u64 {
        assert!(self.bits.len() <= 64, "bitmask keys support up to 64 sensors");
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, b)| if *b { acc | (1 << i) } else { acc })
    }
}

impl std::ops::Index<usize> for Design {
    type Output = bool;
    fn index(&self, i: usize) -> &bool {
        &self.bits[i]
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{}", if *b { '1' } else { '0' })?;
        }
        Ok(())
    }
}

/// Elementary symmetric polynomial `e_k` of a weight set, by the stable
/// one-pass recursion. `e_0 = 1`; `e_k = 0` for `k > len`.
pub fn elementary_symmetric(weights: &[f64], k: usize) -> f64 {
    if k > weights.len() {
        return 0.0;
    }
    let mut r = vec![0.0; k + 1];
    r[0] = 1.0;
    for &w in weights {
        for j in (1..=k).rev() {
            r[j] += w * r[j - 1];
        }
    }
    r[k]
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

const CLAMP_EPS: f64 = 1e-7;
const LOG_SPACE_ODDS_RATIO: f64 = 1e8;

pub struct ConditionalBernoulli {
    n: usize,
    budget: usize,
    /// Clamped interior probabilities for the free entries.
    p_free: Vec<f64>,
    free: Vec<usize>,
    forced_on: Vec<usize>,
    /// Odds (or log-odds in log-space mode) per free entry.
    w: Vec<f64>,
    /// Remaining budget to distribute over the free entries.
    z: usize,
    /// `suffix[j][k] = R(k, free[j..])`, linear or log-space.
    suffix: Vec<Vec<f64>>,
    log_space: bool,
}

impl ConditionalBernoulli {
    pub fn new(p: &[f64], budget: usize) -> Result<Self, DesignError> {
        Self::build(p, budget, None)
    }

    /// As [`ConditionalBernoulli::new`] but with the log-space mode forced on
    /// or off; used to cross-validate the two evaluation paths.
    pub fn with_log_space(p: &[f64], budget: usize, log_space: bool) -> Result<Self, DesignError> {
        Self::build(p, budget, Some(log_space))
    }

    fn build(p: &[f64], budget: usize, force_log: Option<bool>) -> Result<Self, DesignError> {
        let n = p.len();
        for (i, &v) in p.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(DesignError::InvalidPolicy { index: i, value: v });
            }
        }
        let forced_on: Vec<usize> = (0..n).filter(|&i| p[i] == 1.0).collect();
        let forced_off = (0..n).filter(|&i| p[i] == 0.0).count();
        let free: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0 && p[i] < 1.0).collect();
        let max_active = n - forced_off;
        if budget < forced_on.len() || budget > max_active {
            return Err(DesignError::InfeasibleBudget {
                budget,
                forced_on: forced_on.len(),
                max_active,
            });
        }
        let z = budget - forced_on.len();
        let p_free: Vec<f64> = free
            .iter()
            .map(|&i| p[i].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS))
            .collect();
        let odds: Vec<f64> = p_free.iter().map(|&q| q / (1.0 - q)).collect();
        let log_space = force_log.unwrap_or_else(|| {
            if odds.is_empty() {
                return false;
            }
            let max = odds.iter().cloned().fold(f64::MIN, f64::max);
            let min = odds.iter().cloned().fold(f64::MAX, f64::min);
            max / min > LOG_SPACE_ODDS_RATIO
                || (z as f64) * max.max(1.0).log10() > 250.0
        });
        let w: Vec<f64> = if log_space {
            odds.iter().map(|v| v.ln()).collect()
        } else {
            odds
        };
        let suffix = Self::suffix_table(&w, z, log_space);
        Ok(ConditionalBernoulli {
            n,
            budget,
            p_free,
            free,
            forced_on,
            w,
            z,
            suffix,
            log_space,
        })
    }

    fn zero(log_space: bool) -> f64 {
        if log_space {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    fn one(log_space: bool) -> f64 {
        if log_space {
            0.0
        } else {
            1.0
        }
    }

    fn acc(a: f64, b: f64, log_space: bool) -> f64 {
        if log_space {
            log_sum_exp(a, b)
        } else {
            a + b
        }
    }

    fn mul(a: f64, b: f64, log_space: bool) -> f64 {
        if log_space {
            a + b
        } else {
            a * b
        }
    }

    fn suffix_table(w: &[f64], z: usize, log_space: bool) -> Vec<Vec<f64>> {
        let f = w.len();
        let mut table = vec![vec![Self::zero(log_space); z + 1]; f + 1];
        table[f][0] = Self::one(log_space);
        for j in (0..f).rev() {
            table[j][0] = Self::one(log_space);
            for k in 1..=z {
                let keep = table[j + 1][k];
                let take = Self::mul(w[j], table[j + 1][k - 1], log_space);
                table[j][k] = Self::acc(keep, take, log_space);
            }
        }
        table
    }

    fn prefix_table(&self) -> Vec<Vec<f64>> {
        let f = self.w.len();
        let ls = self.log_space;
        let mut table = vec![vec![Self::zero(ls); self.z + 1]; f + 1];
        table[0][0] = Self::one(ls);
        for j in 0..f {
            table[j + 1][0] = Self::one(ls);
            for k in 1..=self.z {
                let keep = table[j][k];
                let take = Self::mul(self.w[j], table[j][k - 1], ls);
                table[j + 1][k] = Self::acc(keep, take, ls);
            }
        }
        table
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn uses_log_space(&self) -> bool {
        self.log_space
    }

    fn in_support(&self, design: &Design) -> bool {
        if design.len() != self.n || design.count_active() != self.budget {
            return false;
        }
        if self.forced_on.iter().any(|&i| !design[i]) {
            return false;
        }
        // Entries outside free and forced_on are forced off.
        let mut allowed = vec![false; self.n];
        for &i in self.free.iter().chain(self.forced_on.iter()) {
            allowed[i] = true;
        }
        (0..self.n).all(|i| allowed[i] || !design[i])
    }

    /// Probability mass of a design; zero off the support.
    pub fn pmf(&self, design: &Design) -> f64 {
        match self.ln_pmf(design) {
            Some(lp) => lp.exp(),
            None => 0.0,
        }
    }

    /// Natural log of the pmf, `None` off the support.
    pub fn ln_pmf(&self, design: &Design) -> Option<f64> {
        if !self.in_support(design) {
            return None;
        }
        let ls = self.log_space;
        if ls {
            let mut num = 0.0;
            for (j, &i) in self.free.iter().enumerate() {
                if design[i] {
                    num += self.w[j];
                }
            }
            Some(num - self.suffix[0][self.z])
        } else {
            let mut num = 1.0;
            for (j, &i) in self.free.iter().enumerate() {
                if design[i] {
                    num *= self.w[j];
                }
            }
            Some((num / self.suffix[0][self.z]).ln())
        }
    }

    /// Draw one design with exactly `budget` active entries by sequential
    /// conditional sampling over the free entries.
    pub fn sample(&self, rng: &mut impl Rng) -> Design {
        let mut bits = vec![false; self.n];
        for &i in &self.forced_on {
            bits[i] = true;
        }
        let ls = self.log_space;
        let mut k = self.z;
        for (j, &i) in self.free.iter().enumerate() {
            if k == 0 {
                break;
            }
            let prob = if ls {
                (self.w[j] + self.suffix[j + 1][k - 1] - self.suffix[j][k]).exp()
            } else {
                self.w[j] * self.suffix[j + 1][k - 1] / self.suffix[j][k]
            };
            if rng.gen::<f64>() < prob {
                bits[i] = true;
                k -= 1;
            }
        }
        debug_assert_eq!(bits.iter().filter(|b| **b).count(), self.budget);
        Design::new(bits)
    }

    /// Marginal activation probabilities; they sum to the budget.
    pub fn inclusion_probs(&self) -> Vec<f64> {
        let mut pi = vec![0.0; self.n];
        for &i in &self.forced_on {
            pi[i] = 1.0;
        }
        if self.z == 0 || self.free.is_empty() {
            return pi;
        }
        let prefix = self.prefix_table();
        let ls = self.log_space;
        let total = self.suffix[0][self.z];
        for (j, &i) in self.free.iter().enumerate() {
            // R(z - 1, free minus j) by splitting around position j.
            let mut excl = Self::zero(ls);
            #[allow(clippy::needless_range_loop)] // a and z-1-a pair two tables
            for a in 0..self.z {
                if a > j || (self.z - 1 - a) > self.free.len() - j - 1 {
                    continue;
                }
                let term = Self::mul(prefix[j][a], self.suffix[j + 1][self.z - 1 - a], ls);
                excl = Self::acc(excl, term, ls);
            }
            pi[i] = if ls {
                (self.w[j] + excl - total).exp()
            } else {
                self.w[j] * excl / total
            };
        }
        pi
    }

    /// Sum over free entries of `(pi_i - pi_i^2) / (p_i^2 (1 - p_i)^2)`:
    /// the expected squared norm of the log-PMF score, used to normalize
    /// the variance-optimal gradient baseline. Zero when every entry is
    /// pinned at 0 or 1.
    pub fn score_variance_sum(&self) -> f64 {
        let pi = self.inclusion_probs();
        self.free
            .iter()
            .zip(&self.p_free)
            .map(|(&i, &q)| (pi[i] - pi[i] * pi[i]) / (q * q * (1.0 - q) * (1.0 - q)))
            .sum()
    }

    /// Gradient of `ln pmf(design)` with respect to the unclamped policy.
    /// Components at entries with policy exactly 0 or 1 are zero.
    pub fn grad_ln_pmf(&self, design: &Design) -> Vec<f64> {
        assert!(
            self.in_support(design),
            "gradient requested for a design outside the support"
        );
        let pi = self.inclusion_probs();
        let mut g = vec![0.0; self.n];
        for (j, &i) in self.free.iter().enumerate() {
            let q = self.p_free[j];
            let xi = if design[i] { 1.0 } else { 0.0 };
            g[i] = (xi - pi[i]) / (q * (1.0 - q));
        }
        g
    }
}
