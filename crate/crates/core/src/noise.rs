//! Parametric observation-noise covariances and masked precision operators.
//!
//! A noise model maps an uncertain parameter vector `theta` (constrained to a
//! box) to the covariance of the sensor noise. Deactivating sensors masks the
//! covariance to the active principal submatrix; the corresponding precision
//! is the Moore-Penrose pseudoinverse of the masked covariance, computed
//! exactly by inverting the active block and embedding it back.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("theta has {found} entries, model expects {expected}")]
    InvalidThetaDimension { expected: usize, found: usize },
    #[error("invalid noise parameter: {0}")]
    InvalidParam(String),
    #[error("masked covariance block is not positive definite")]
    NotPositiveDefinite,
    #[error("design has no active sensors")]
    EmptyDesign,
}

/// Families of noise covariance parameterizations.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Two sensors with individual standard deviations and a shared
    /// correlation: `theta = (sigma1, sigma2, rho)`.
    TwoSensorCorrelated {
        sigma_box: (f64, f64),
        rho_box: (f64, f64),
    },
    /// One standard deviation per sensor plus two correlation lengths;
    /// correlation decays exponentially with the per-axis sensor distances:
    /// `theta = (sigma_1 .. sigma_n, ell1, ell2)`.
    GridExponential {
        positions: Vec<(f64, f64)>,
        sigma_box: (f64, f64),
        ell1_box: (f64, f64),
        ell2_box: (f64, f64),
    },
}

impl NoiseModel {
    pub fn two_sensor_default() -> Self {
        NoiseModel::TwoSensorCorrelated {
            sigma_box: (0.05, 0.15),
            rho_box: (0.0, 0.99),
        }
    }

    pub fn n_sensors(&self) -> usize {
        match self {
            NoiseModel::TwoSensorCorrelated { .. } => 2,
            NoiseModel::GridExponential { positions, .. } => positions.len(),
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            NoiseModel::TwoSensorCorrelated { .. } => 3,
            NoiseModel::GridExponential { positions, .. } => positions.len() + 2,
        }
    }

    /// Lower and upper bounds of the admissible box.
    pub fn theta_box(&self) -> (DVector<f64>, DVector<f64>) {
        match self {
            NoiseModel::TwoSensorCorrelated { sigma_box, rho_box } => (
                DVector::from_vec(vec![sigma_box.0, sigma_box.0, rho_box.0]),
                DVector::from_vec(vec![sigma_box.1, sigma_box.1, rho_box.1]),
            ),
            NoiseModel::GridExponential {
                positions,
                sigma_box,
                ell1_box,
                ell2_box,
            } => {
                let n = positions.len();
                let mut lo = vec![sigma_box.0; n];
                let mut hi = vec![sigma_box.1; n];
                lo.extend([ell1_box.0, ell2_box.0]);
                hi.extend([ell1_box.1, ell2_box.1]);
                (DVector::from_vec(lo), DVector::from_vec(hi))
            }
        }
    }

    /// Center of the admissible box, the default nominal parameter.
    pub fn theta_midpoint(&self) -> DVector<f64> {
        let (lo, hi) = self.theta_box();
        0.5 * (lo + hi)
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<(), NoiseError> {
        if theta.len() != self.theta_dim() {
            return Err(NoiseError::InvalidThetaDimension {
                expected: self.theta_dim(),
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// Full covariance matrix at `theta`.
    pub fn covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>, NoiseError> {
        self.check_theta(theta)?;
        match self {
            NoiseModel::TwoSensorCorrelated { .. } => {
                let (s1, s2, rho) = (theta[0], theta[1], theta[2]);
                if s1 <= 0.0 || s2 <= 0.0 {
                    return Err(NoiseError::InvalidParam(format!(
                        "standard deviations must be positive, got ({s1}, {s2})"
                    )));
                }
                if rho.abs() >= 1.0 {
                    return Err(NoiseError::InvalidParam(format!(
                        "correlation must lie strictly inside (-1, 1), got {rho}"
                    )));
                }
                Ok(DMatrix::from_row_slice(
                    2,
                    2,
                    &[s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2],
                ))
            }
            NoiseModel::GridExponential { positions, .. } => {
                let n = positions.len();
                let sig = theta.rows(0, n);
                let (l1, l2) = (theta[n], theta[n + 1]);
                if sig.iter().any(|s| *s <= 0.0) {
                    return Err(NoiseError::InvalidParam(
                        "standard deviations must be positive".into(),
                    ));
                }
                if l1 <= 0.0 || l2 <= 0.0 {
                    return Err(NoiseError::InvalidParam(format!(
                        "correlation lengths must be positive, got ({l1}, {l2})"
                    )));
                }
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        g[(i, j)] = sig[i] * sig[j] * correlation(positions, i, j, l1, l2);
                    }
                }
                Ok(g)
            }
        }
    }

    /// Elementwise derivative of the covariance with respect to `theta[j]`.
    pub fn d_covariance(
        &self,
        theta: &DVector<f64>,
        j: usize,
    ) -> Result<DMatrix<f64>, NoiseError> {
        self.check_theta(theta)?;
        assert!(j < self.theta_dim(), "theta component out of range");
        match self {
            NoiseModel::TwoSensorCorrelated { .. } => {
                let (s1, s2, rho) = (theta[0], theta[1], theta[2]);
                let d = match j {
                    0 => [2.0 * s1, rho * s2, rho * s2, 0.0],
                    1 => [0.0, rho * s1, rho * s1, 2.0 * s2],
                    _ => [0.0, s1 * s2, s1 * s2, 0.0],
                };
                Ok(DMatrix::from_row_slice(2, 2, &d))
            }
            NoiseModel::GridExponential { positions, .. } => {
                let n = positions.len();
                let sig = theta.rows(0, n);
                let (l1, l2) = (theta[n], theta[n + 1]);
                let mut d = DMatrix::zeros(n, n);
                if j < n {
                    // d Gamma_ik / d sigma_j: only row/column j is affected.
                    for i in 0..n {
                        if i == j {
                            d[(j, j)] = 2.0 * sig[j];
                        } else {
                            let c = correlation(positions, i, j, l1, l2);
                            d[(i, j)] = sig[i] * c;
                            d[(j, i)] = sig[i] * c;
                        }
                    }
                } else {
                    let wrt_l1 = j == n;
                    for i in 0..n {
                        for k in 0..n {
                            if i == k {
                                continue;
                            }
                            let c = correlation(positions, i, k, l1, l2);
                            let (dx, dy) = axis_distances(positions, i, k);
                            let factor = if wrt_l1 {
                                dx / (2.0 * l1 * l1)
                            } else {
                                dy / (2.0 * l2 * l2)
                            };
                            d[(i, k)] = sig[i] * sig[k] * c * factor;
                        }
                    }
                }
                Ok(d)
            }
        }
    }
}

fn axis_distances(positions: &[(f64, f64)], i: usize, j: usize) -> (f64, f64) {
    (
        (positions[i].0 - positions[j].0).abs(),
        (positions[i].1 - positions[j].1).abs(),
    )
}

fn correlation(positions: &[(f64, f64)], i: usize, j: usize, l1: f64, l2: f64) -> f64 {
    if i == j {
        return 1.0;
    }
    let (dx, dy) = axis_distances(positions, i, j);
    (-dx / (2.0 * l1) - dy / (2.0 * l2)).exp()
}

/// Pseudoinverse of a masked covariance: the inverse of the active principal
/// submatrix embedded back into the full sensor index set.
#[derive(Debug, Clone)]
pub struct MaskedPrecision {
    active: Vec<usize>,
    w: DMatrix<f64>,
}

impl MaskedPrecision {
    pub fn new(gamma: &DMatrix<f64>, mask: &[bool]) -> Result<Self, NoiseError> {
        assert_eq!(gamma.nrows(), mask.len(), "mask sized for a different sensor set");
        let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if active.is_empty() {
            return Err(NoiseError::EmptyDesign);
        }
        let k = active.len();
        let sub = DMatrix::from_fn(k, k, |i, j| gamma[(active[i], active[j])]);
        let inv = Cholesky::new(sub)
            .ok_or(NoiseError::NotPositiveDefinite)?
            .inverse();
        let n = mask.len();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..k {
            for j in 0..k {
                w[(active[i], active[j])] = inv[(i, j)];
            }
        }
        Ok(MaskedPrecision { active, w })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// The embedded precision as a dense matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.w * v
    }

    /// Derivative of the masked precision with respect to a covariance
    /// perturbation `d_gamma`: `-W dGamma W`. Parameters that do not touch
    /// the active block produce the zero matrix.
    pub fn d_precision(&self, d_gamma: &DMatrix<f64>) -> DMatrix<f64> {
        -(&self.w * d_gamma * &self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid_model() -> NoiseModel {
        let mut positions = Vec::new();
        for j in 1..=3 {
            for i in 1..=2 {
                positions.push((i as f64 / 3.0, j as f64 / 4.0));
            }
        }
        NoiseModel::GridExponential {
            positions,
            sigma_box: (0.05, 0.15),
            ell1_box: (0.01, 2.0),
            ell2_box: (0.01, 2.0),
        }
    }

    fn random_theta(model: &NoiseModel, rng: &mut impl Rng) -> DVector<f64> {
        let (lo, hi) = model.theta_box();
        DVector::from_fn(lo.len(), |i, _| rng.gen_range(lo[i]..=hi[i]))
    }

    #[test]
    fn two_sensor_covariance_entries() {
        let model = NoiseModel::two_sensor_default();
        let theta = DVector::from_vec(vec![0.05, 0.15, 0.99]);
        let g = model.covariance(&theta).unwrap();
        assert_relative_eq!(g[(0, 0)], 0.0025, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], 0.0225, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 1)], 0.007425, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 0)], 0.007425, epsilon = 1e-15);
    }

    #[test]
    fn covariances_are_spd_across_the_box() {
        let mut rng = StdRng::seed_from_u64(1);
        for model in [NoiseModel::two_sensor_default(), grid_model()] {
            for _ in 0..25 {
                let theta = random_theta(&model, &mut rng);
                let g = model.covariance(&theta).unwrap();
                assert!(((&g) - g.transpose()).amax() < 1e-14);
                assert!(Cholesky::new(g).is_some(), "covariance not SPD at {theta}");
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let model = NoiseModel::two_sensor_default();
        let bad_rho = DVector::from_vec(vec![0.1, 0.1, 1.0]);
        assert!(matches!(
            model.covariance(&bad_rho),
            Err(NoiseError::InvalidParam(_))
        ));
        let bad_dim = DVector::from_vec(vec![0.1, 0.1]);
        assert!(matches!(
            model.covariance(&bad_dim),
            Err(NoiseError::InvalidThetaDimension { expected: 3, found: 2 })
        ));
        let model = grid_model();
        let mut theta = model.theta_midpoint();
        theta[6] = 0.0;
        assert!(matches!(
            model.covariance(&theta),
            Err(NoiseError::InvalidParam(_))
        ));
    }

    #[test]
    fn covariance_derivatives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let h = 1e-6;
        for model in [NoiseModel::two_sensor_default(), grid_model()] {
            for _ in 0..5 {
                let theta = random_theta(&model, &mut rng);
                for j in 0..model.theta_dim() {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[j] += h;
                    tm[j] -= h;
                    let fd = (model.covariance(&tp).unwrap() - model.covariance(&tm).unwrap())
                        / (2.0 * h);
                    let an = model.d_covariance(&theta, j).unwrap();
                    assert!(
                        (&fd - &an).amax() < 1e-7 * (1.0 + an.amax()),
                        "component {j}: fd {:.5e} vs analytic {:.5e}",
                        fd.amax(),
                        an.amax()
                    );
                }
            }
        }
    }

    #[test]
    fn grid_correlation_decays_with_distance() {
        let model = grid_model();
        let theta = model.theta_midpoint();
        let g = model.covariance(&theta).unwrap();
        // Sensors 0 and 1 are closer than 0 and 5.
        assert!(g[(0, 1)] > g[(0, 5)]);
        assert!(g[(0, 0)] > g[(0, 1)]);
    }

    #[test]
    fn masked_precision_matches_svd_pseudoinverse() {
        let mut rng = StdRng::seed_from_u64(3);
        let model = grid_model();
        for _ in 0..10 {
            let theta = random_theta(&model, &mut rng);
            let g = model.covariance(&theta).unwrap();
            let mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
            if mask.iter().all(|b| !b) {
                continue;
            }
            let n = mask.len();
            let sel = DMatrix::from_fn(n, n, |i, j| {
                if i == j && mask[i] {
                    1.0
                } else {
                    0.0
                }
            });
            let masked_cov = &sel * &g * &sel;
            let pinv = masked_cov.pseudo_inverse(1e-12).unwrap();
            let w = MaskedPrecision::new(&g, &mask).unwrap();
            assert!(
                (w.matrix() - &pinv).amax() < 1e-10 * (1.0 + pinv.amax()),
                "pseudoinverse mismatch"
            );
        }
    }

    #[test]
    fn masked_precision_rank_equals_active_count() {
        let model = grid_model();
        let theta = model.theta_midpoint();
        let g = model.covariance(&theta).unwrap();
        let mask = [true, false, true, true, false, false];
        let w = MaskedPrecision::new(&g, &mask).unwrap();
        let rank = w
            .matrix()
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .filter(|l| l.abs() > 1e-10)
            .count();
        assert_eq!(rank, 3);
    }

    #[test]
    fn empty_design_is_rejected() {
        let model = NoiseModel::two_sensor_default();
        let g = model.covariance(&model.theta_midpoint()).unwrap();
        assert!(matches!(
            MaskedPrecision::new(&g, &[false, false]),
            Err(NoiseError::EmptyDesign)
        ));
    }

    #[test]
    fn precision_derivative_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let model = grid_model();
        let h = 1e-6;
        for _ in 0..10 {
            let theta = random_theta(&model, &mut rng);
            let mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.6)).collect();
            if mask.iter().all(|b| !b) {
                continue;
            }
            for j in 0..model.theta_dim() {
                let w = MaskedPrecision::new(&model.covariance(&theta).unwrap(), &mask).unwrap();
                let an = w.d_precision(&model.d_covariance(&theta, j).unwrap());
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += h;
                tm[j] -= h;
                let wp = MaskedPrecision::new(&model.covariance(&tp).unwrap(), &mask).unwrap();
                let wm = MaskedPrecision::new(&model.covariance(&tm).unwrap(), &mask).unwrap();
                let fd = (wp.matrix() - wm.matrix()) / (2.0 * h);
                let scale = 1.0 + an.amax();
                assert!(
                    (&fd - &an).amax() / scale < 1e-5,
                    "component {j} mismatch: {:.3e}",
                    (&fd - &an).amax() / scale
                );
            }
        }
    }

    #[test]
    fn inactive_sensor_sigma_has_zero_precision_derivative() {
        let model = grid_model();
        let theta = model.theta_midpoint();
        let mask = [true, true, false, true, false, false];
        let w = MaskedPrecision::new(&model.covariance(&theta).unwrap(), &mask).unwrap();
        // sigma_2 and sigma_4 belong to inactive sensors.
        for j in [2usize, 4] {
            let d = w.d_precision(&model.d_covariance(&theta, j).unwrap());
            assert!(d.amax() == 0.0);
        }
    }
}
