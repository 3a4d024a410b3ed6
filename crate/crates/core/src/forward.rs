//! Forward problem: elliptic PDE solution operator and point observations.
//!
//! The governing equation is `-div(exp(m) grad u) = 0` on the unit square
//! with fixed values on the bottom/top edges and zero flux on the lateral
//! edges. The parameter-to-observable map is `F(m) = Q u(m)` where `Q`
//! interpolates the solution at the sensor locations.
//!
//! A [`Linearization`] freezes the operator at one parameter field: it caches
//! the state, one factorization of the (self-adjoint) linearized operator
//! shared by all adjoint/incremental solves, and the assembled coupling form
//! `C[i][j] = integral exp(m) phi_j grad(u) . grad(phi_i)` that represents
//! the parameter derivative of the state equation. All first- and
//! second-order (Gauss-Newton) sensitivities reduce to sparse products with
//! `C` and triangular solves against the cached factorization.

use crate::fem::{
    assemble_weighted_stiffness, spmv, ConstrainedSystem, DirichletBc, Field, FemError, Grid,
    SolverKind, SparseMatrix,
};
use crate::noise::MaskedPrecision;
use nalgebra::{DVector, Matrix2};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("sensor {index} at ({x}, {y}) must lie strictly inside the domain")]
    SensorOutsideDomain { index: usize, x: f64, y: f64 },
}

/// Point-observation operator: bilinear interpolation rows, one per sensor.
#[derive(Debug, Clone)]
pub struct SensorArray {
    grid: Grid,
    points: Vec<(f64, f64)>,
    rows: Vec<([usize; 4], [f64; 4])>,
}

impl SensorArray {
    pub fn new(grid: Grid, points: &[(f64, f64)]) -> Result<Self, ForwardError> {
        let mut rows = Vec::with_capacity(points.len());
        for (index, &(x, y)) in points.iter().enumerate() {
            let row = grid
                .interpolation_weights(x, y)
                .map_err(|_| ForwardError::SensorOutsideDomain { index, x, y })?;
            rows.push(row);
        }
        Ok(SensorArray {
            grid,
            points: points.to_vec(),
            rows,
        })
    }

    /// Regular `nx_s x ny_s` sensor lattice strictly inside the domain, at
    /// coordinates `(i / (nx_s + 1), j / (ny_s + 1))`, ordered row-major
    /// bottom to top.
    pub fn regular(grid: Grid, nx_s: usize, ny_s: usize) -> Result<Self, ForwardError> {
        let mut points = Vec::with_capacity(nx_s * ny_s);
        for j in 1..=ny_s {
            for i in 1..=nx_s {
                points.push((i as f64 / (nx_s + 1) as f64, j as f64 / (ny_s + 1) as f64));
            }
        }
        Self::new(grid, &points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `Q u`: observe a nodal field at every sensor.
    pub fn observe(&self, u: &Field) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|(nodes, w)| {
                (0..4).map(|k| w[k] * u[nodes[k]]).sum::<f64>()
            }),
        )
    }

    /// `Q' r`: scatter sensor values back to a dual nodal vector.
    pub fn scatter(&self, r: &DVector<f64>) -> Field {
        let mut out = Field::zeros(self.grid.n_nodes());
        for (s, (nodes, w)) in self.rows.iter().enumerate() {
            for k in 0..4 {
                out[nodes[k]] += w[k] * r[s];
            }
        }
        out
    }
}

/// Problem definition: grid, boundary data and sensor array.
#[derive(Debug, Clone)]
pub struct ForwardProblem {
    grid: Grid,
    sensors: SensorArray,
    g_bottom: f64,
    g_top: f64,
}

impl ForwardProblem {
    pub fn new(grid: Grid, sensors: SensorArray, g_bottom: f64, g_top: f64) -> Self {
        assert_eq!(sensors.grid(), &grid, "sensor array built for another grid");
        ForwardProblem {
            grid,
            sensors,
            g_bottom,
            g_top,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sensors(&self) -> &SensorArray {
        &self.sensors
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    /// Solve the state equation and freeze all linearization data at `m`.
    pub fn linearize(&self, m: &Field) -> Result<Linearization, ForwardError> {
        let kappa = m.map(f64::exp);
        let stiff = assemble_weighted_stiffness(&self.grid, &kappa, &Matrix2::identity())?;
        let bc = DirichletBc::bottom_top(&self.grid, self.g_bottom, self.g_top);
        let system = ConstrainedSystem::new(&stiff, bc, SolverKind::Direct)?;
        let u = system.solve_lifted(&DVector::zeros(self.grid.n_nodes()))?;
        let c_mat = assemble_coupling(&self.grid, &kappa, &u);
        Ok(Linearization {
            grid: self.grid,
            sensors: self.sensors.clone(),
            u,
            system,
            c_mat,
            solves: AtomicU64::new(1),
        })
    }

    /// Solve the state equation only.
    pub fn solve_state(&self, m: &Field) -> Result<Field, ForwardError> {
        let kappa = m.map(f64::exp);
        let stiff = assemble_weighted_stiffness(&self.grid, &kappa, &Matrix2::identity())?;
        let bc = DirichletBc::bottom_top(&self.grid, self.g_bottom, self.g_top);
        let system = ConstrainedSystem::new(&stiff, bc, SolverKind::Direct)?;
        Ok(system.solve_lifted(&DVector::zeros(self.grid.n_nodes()))?)
    }
}

/// Exact derivative of the discrete residual `K(m) u` with `u` frozen:
/// `C[i][j] = d(K(m) u)_i / dm_j`. Because assembly interpolates the
/// coefficient `exp(m)` through its nodal values, each column carries the
/// factor `exp(m_j) phi_j` at the quadrature points (using the interpolated
/// coefficient itself here would only be consistent in the mesh limit and
/// would break finite-difference checks of the discrete map).
fn assemble_coupling(grid: &Grid, kappa: &Field, u: &Field) -> SparseMatrix {
    let (hx, hy) = grid.spacing();
    let jac = 0.25 * hx * hy;
    let gauss = [-0.577_350_269_189_625_7_f64, 0.577_350_269_189_625_7];
    let n = grid.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    let mut gx = [0.0; 4];
    let mut gy = [0.0; 4];
    for cy in 0..grid.ny() {
        for cx in 0..grid.nx() {
            let nodes = grid.cell_nodes(cx, cy);
            let mut local = [[0.0; 4]; 4];
            for &xi in &gauss {
                for &eta in &gauss {
                    let nfun = [
                        0.25 * (1.0 - xi) * (1.0 - eta),
                        0.25 * (1.0 + xi) * (1.0 - eta),
                        0.25 * (1.0 - xi) * (1.0 + eta),
                        0.25 * (1.0 + xi) * (1.0 + eta),
                    ];
                    let dxi = [
                        -0.25 * (1.0 - eta),
                        0.25 * (1.0 - eta),
                        -0.25 * (1.0 + eta),
                        0.25 * (1.0 + eta),
                    ];
                    let deta = [
                        -0.25 * (1.0 - xi),
                        -0.25 * (1.0 + xi),
                        0.25 * (1.0 - xi),
                        0.25 * (1.0 + xi),
                    ];
                    for k in 0..4 {
                        gx[k] = dxi[k] * 2.0 / hx;
                        gy[k] = deta[k] * 2.0 / hy;
                    }
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for k in 0..4 {
                        ux += u[nodes[k]] * gx[k];
                        uy += u[nodes[k]] * gy[k];
                    }
                    for i in 0..4 {
                        let flux = ux * gx[i] + uy * gy[i];
                        for j in 0..4 {
                            local[i][j] += kappa[nodes[j]] * nfun[j] * flux * jac;
                        }
                    }
                }
            }
            for i in 0..4 {
                for j in 0..4 {
                    coo.push(nodes[i], nodes[j], local[i][j]);
                }
            }
        }
    }
    CscMatrix::from(&coo)
}

/// Frozen linearization of the forward map at one parameter field.
pub struct Linearization {
    grid: Grid,
    sensors: SensorArray,
    u: Field,
    system: ConstrainedSystem,
    c_mat: SparseMatrix,
    solves: AtomicU64,
}

impl Linearization {
    pub fn state(&self) -> &Field {
        &self.u
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sensors(&self) -> &SensorArray {
        &self.sensors
    }

    /// Predicted observations `Q u` at the linearization point.
    pub fn predicted(&self) -> DVector<f64> {
        self.sensors.observe(&self.u)
    }

    /// Number of triangular solves issued against the cached factorization
    /// (the state solve counts as one).
    pub fn solve_count(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }

    fn solve_zero_bc(&self, rhs: &Field) -> Field {
        self.solves.fetch_add(1, Ordering::Relaxed);
        self.system
            .solve_zero_bc(rhs)
            .expect("linearized solve failed on a factorized SPD system")
    }

    /// `C mdir` as a dual vector on the state space.
    pub fn apply_coupling(&self, mdir: &Field) -> Field {
        spmv(&self.c_mat, mdir)
    }

    /// `C' p` as a dual vector on the parameter space.
    pub fn apply_coupling_transpose(&self, p: &Field) -> Field {
        spmv(&self.c_mat.transpose(), p)
    }

    /// Incremental state `uhat` solving `K uhat = -C mdir` with zero
    /// boundary values: the state perturbation for a parameter direction.
    pub fn incremental_state(&self, mdir: &Field) -> Field {
        let rhs = -self.apply_coupling(mdir);
        self.solve_zero_bc(&rhs)
    }

    /// Jacobian action `J mdir = Q uhat`.
    pub fn jacobian_apply(&self, mdir: &Field) -> DVector<f64> {
        self.sensors.observe(&self.incremental_state(mdir))
    }

    /// Adjoint solve: `p = K^-1 Q' s` with zero boundary values, for a
    /// sensor-space source `s` (typically a precision-weighted residual).
    pub fn adjoint_solve(&self, s: &DVector<f64>) -> Field {
        self.solve_zero_bc(&self.sensors.scatter(s))
    }

    /// Jacobian adjoint `J' s = -C' K^-1 Q' s` as a dual parameter vector.
    pub fn jacobian_adjoint(&self, s: &DVector<f64>) -> Field {
        -self.apply_coupling_transpose(&self.adjoint_solve(s))
    }

    /// Gauss-Newton data-misfit Hessian action `J' W J mdir`, returned as a
    /// dual parameter vector; two solves against the cached factorization.
    pub fn gn_hessian_apply_dual(&self, w: &MaskedPrecision, mdir: &Field) -> Field {
        let uhat = self.incremental_state(mdir);
        let wd = w.apply(&self.sensors.observe(&uhat));
        let phat = self.solve_zero_bc(&self.sensors.scatter(&wd));
        -self.apply_coupling_transpose(&phat)
    }
}
