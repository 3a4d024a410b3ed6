//! Gaussian prior measure on the parameter field.
//!
//! The covariance is the squared inverse of an anisotropic elliptic operator
//! `A = gamma * div(K grad) + delta * I` equipped with a Robin boundary term
//! `beta = sqrt(gamma * delta / 2)` that damps boundary artifacts. In the
//! discrete setting, with `A_h` the assembled operator and `M` the mass
//! matrix, nodal samples have covariance `A_h^-1 M A_h^-1` and the covariance
//! operator acting on nodal fields is `(A_h^-1 M)^2`. Samples are drawn
//! exactly by pushing white noise through an elementwise factor of `M`.

use crate::fem::{
    assemble_boundary_mass, assemble_mass, assemble_weighted_stiffness, spmv, Field, FemError,
    Grid, SolverKind, SparseMatrix, SpdSolver,
};
use nalgebra::{Cholesky, DVector, Matrix2, Matrix4};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};

/// Parameters of the prior operator.
#[derive(Debug, Clone)]
pub struct PriorParams {
    pub gamma: f64,
    pub delta: f64,
    pub k_mat: Matrix2<f64>,
    /// Constant mean value of the field.
    pub mean: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            gamma: 0.04,
            delta: 0.2,
            k_mat: Matrix2::new(1.25, 0.75, 0.75, 1.25),
            mean: 0.0,
        }
    }
}

pub struct GaussianPrior {
    grid: Grid,
    params: PriorParams,
    a_mat: SparseMatrix,
    mass: SparseMatrix,
    a_solver: SpdSolver,
    mass_solver: SpdSolver,
    /// Rectangular factor G with G G' = M, built from per-cell Cholesky
    /// factors of the local mass matrix; maps white noise to a load vector
    /// with covariance M.
    mass_factor: SparseMatrix,
    mean: Field,
    a_solves: AtomicU64,
    mass_solves: AtomicU64,
}

impl GaussianPrior {
    pub fn new(grid: Grid, params: PriorParams) -> Result<Self, FemError> {
        assert!(
            params.gamma > 0.0 && params.delta > 0.0,
            "prior operator parameters must be positive"
        );
        let ones = Field::repeat(grid.n_nodes(), 1.0);
        let stiff = assemble_weighted_stiffness(&grid, &ones, &params.k_mat)?;
        let mass = assemble_mass(&grid);
        let bmass = assemble_boundary_mass(&grid);
        let beta = (params.gamma * params.delta / 2.0).sqrt();

        let n = grid.n_nodes();
        let mut coo = CooMatrix::new(n, n);
        let mut add = |mat: &SparseMatrix, scale: f64| {
            for (i, j, v) in mat.triplet_iter() {
                coo.push(i, j, scale * v);
            }
        };
        add(&stiff, params.gamma);
        add(&mass, params.delta);
        add(&bmass, beta);
        let a_mat = CscMatrix::from(&coo);

        let a_solver = SpdSolver::new(&a_mat, SolverKind::Direct)?;
        let mass_solver = SpdSolver::new(&mass, SolverKind::Direct)?;
        let mass_factor = elementwise_mass_factor(&grid);
        let mean = Field::repeat(n, params.mean);
        Ok(GaussianPrior {
            grid,
            params,
            a_mat,
            mass,
            a_solver,
            mass_solver,
            mass_factor,
            mean,
            a_solves: AtomicU64::new(0),
            mass_solves: AtomicU64::new(0),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &PriorParams {
        &self.params
    }

    pub fn mean(&self) -> &Field {
        &self.mean
    }

    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    pub fn operator(&self) -> &SparseMatrix {
        &self.a_mat
    }

    /// Cumulative counts of (A-solves, M-solves) issued so far.
    pub fn solve_counts(&self) -> (u64, u64) {
        (
            self.a_solves.load(Ordering::Relaxed),
            self.mass_solves.load(Ordering::Relaxed),
        )
    }

    pub fn solve_a(&self, rhs: &Field) -> Field {
        self.a_solves.fetch_add(1, Ordering::Relaxed);
        self.a_solver.solve(rhs).expect("prior operator solve failed")
    }

    pub fn solve_mass(&self, rhs: &Field) -> Field {
        self.mass_solves.fetch_add(1, Ordering::Relaxed);
        self.mass_solver.solve(rhs).expect("mass solve failed")
    }

    /// Square root of the covariance operator: `v -> A^-1 M v`.
    /// Self-adjoint in the M-weighted inner product.
    pub fn apply_sqrt_cov(&self, v: &Field) -> Field {
        self.solve_a(&spmv(&self.mass, v))
    }

    /// Covariance operator on nodal fields: `v -> A^-1 M A^-1 M v`.
    pub fn apply_cov(&self, v: &Field) -> Field {
        let s = self.apply_sqrt_cov(v);
        self.apply_sqrt_cov(&s)
    }

    /// Precision applied as a dual vector: `x -> A M^-1 A x`, so that
    /// `x' apply_precision_dual(y)` is the Cameron-Martin inner product.
    pub fn apply_precision_dual(&self, x: &Field) -> Field {
        let ax = spmv(&self.a_mat, x);
        let m_inv = self.solve_mass(&ax);
        spmv(&self.a_mat, &m_inv)
    }

    /// Cameron-Martin inner product `<x, y>_{C^-1} = (A x)' M^-1 (A y)`.
    pub fn cm_inner(&self, x: &Field, y: &Field) -> f64 {
        let ax = spmv(&self.a_mat, x);
        let ay = spmv(&self.a_mat, y);
        self.solve_mass(&ay).dot(&ax)
    }

    pub fn cm_norm_sq(&self, x: &Field) -> f64 {
        self.cm_inner(x, x).max(0.0)
    }

    /// Draw one sample `mean + A^-1 b` with `b` white noise of covariance M.
    pub fn sample(&self, rng: &mut impl Rng) -> Field {
        let nz = self.mass_factor.ncols();
        let z = DVector::from_fn(nz, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = spmv(&self.mass_factor, &z);
        &self.mean + self.solve_a(&b)
    }
}

/// Per-cell Cholesky factor of the local mass matrix scattered into a sparse
/// n x (4 * n_cells) map G with G G' = M exactly.
fn elementwise_mass_factor(grid: &Grid) -> SparseMatrix {
    let (hx, hy) = grid.spacing();
    let jac = 0.25 * hx * hy;
    let gauss = [-0.577_350_269_189_625_7_f64, 0.577_350_269_189_625_7];
    let mut local = Matrix4::<f64>::zeros();
    for &xi in &gauss {
        for &eta in &gauss {
            let n = [
                0.25 * (1.0 - xi) * (1.0 - eta),
                0.25 * (1.0 + xi) * (1.0 - eta),
                0.25 * (1.0 - xi) * (1.0 + eta),
                0.25 * (1.0 + xi) * (1.0 + eta),
            ];
            for i in 0..4 {
                for j in 0..4 {
                    local[(i, j)] += n[i] * n[j] * jac;
                }
            }
        }
    }
    let l = Cholesky::new(local)
        .expect("local mass matrix is SPD")
        .l();
    let mut coo = CooMatrix::new(grid.n_nodes(), 4 * grid.n_cells());
    let mut cell = 0;
    for cy in 0..grid.ny() {
        for cx in 0..grid.nx() {
            let nodes = grid.cell_nodes(cx, cy);
            for i in 0..4 {
                for k in 0..=i {
                    coo.push(nodes[i], 4 * cell + k, l[(i, k)]);
                }
            }
            cell += 1;
        }
    }
    CscMatrix::from(&coo)
}
