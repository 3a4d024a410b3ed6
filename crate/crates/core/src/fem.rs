//! Bilinear quadrilateral (Q1) finite elements on a uniform grid of the unit
//! square.
//!
//! Provides exactly the machinery the elliptic problems in this crate need:
//! mass / weighted-stiffness / boundary-mass assembly with 2x2 Gauss
//! quadrature, symmetric Dirichlet elimination with lifting, and cached SPD
//! solves (sparse Cholesky by default, Jacobi-preconditioned CG as a
//! configurable fallback). Scalar coefficient fields are nodal vectors and are
//! interpolated to quadrature points with the same Q1 basis.

use nalgebra::{DMatrix, DVector, Matrix2};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

/// Nodal coefficient vector over a [`Grid`].
pub type Field = DVector<f64>;

/// Sparse symmetric matrix in compressed sparse column format.
pub type SparseMatrix = CscMatrix<f64>;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("coefficient is {value:.3e} <= 0 at quadrature point ({x:.4}, {y:.4})")]
    NonPositiveCoefficient { value: f64, x: f64, y: f64 },
    #[error("field has {found} entries, grid has {expected} nodes")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("linear solve produced residual {residual:.3e} (tolerance {tolerance:.3e})")]
    SingularSystem { residual: f64, tolerance: f64 },
    #[error("CG did not converge in {max_iters} iterations (residual {residual:.3e})")]
    CgDidNotConverge { max_iters: usize, residual: f64 },
    #[error("point ({x}, {y}) is not strictly inside the unit square")]
    PointOutsideDomain { x: f64, y: f64 },
}

const GAUSS_1D: [f64; 2] = [-0.577_350_269_189_625_7, 0.577_350_269_189_625_7];

/// Q1 shape functions on the reference square [-1,1]^2.
/// Local node order: (-1,-1), (1,-1), (-1,1), (1,1).
fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
    ]
}

/// Reference-coordinate gradients (d/dxi, d/deta) of the Q1 shape functions.
fn shape_grad(xi: f64, eta: f64) -> ([f64; 4], [f64; 4]) {
    (
        [
            -0.25 * (1.0 - eta),
            0.25 * (1.0 - eta),
            -0.25 * (1.0 + eta),
            0.25 * (1.0 + eta),
        ],
        [
            -0.25 * (1.0 - xi),
            -0.25 * (1.0 + xi),
            0.25 * (1.0 - xi),
            0.25 * (1.0 + xi),
        ],
    )
}

/// Uniform grid of `nx` x `ny` square cells on the unit square.
///
/// Nodes are numbered row-major, bottom to top: node `(ix, iy)` has index
/// `iy * (nx + 1) + ix` and coordinates `(ix / nx, iy / ny)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    nx: usize,
    ny: usize,
}

/// Which part of the boundary a node belongs to. The bottom and top edges
/// carry Dirichlet data (corners included); the lateral edges are the
/// zero-flux part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    DirichletBottom,
    DirichletTop,
    NeumannLeft,
    NeumannRight,
}

impl Grid {
    pub fn new(nx: usize, ny: usize) -> Self {
        assert!(nx >= 1 && ny >= 1, "grid needs at least one cell per axis");
        Grid { nx, ny }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        (1.0 / self.nx as f64, 1.0 / self.ny as f64)
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix <= self.nx && iy <= self.ny);
        iy * (self.nx + 1) + ix
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let ix = node % (self.nx + 1);
        let iy = node / (self.nx + 1);
        (ix as f64 / self.nx as f64, iy as f64 / self.ny as f64)
    }

    /// Global node indices of cell `(cx, cy)` in local order
    /// (lower-left, lower-right, upper-left, upper-right).
    pub fn cell_nodes(&self, cx: usize, cy: usize) -> [usize; 4] {
        [
            self.node_index(cx, cy),
            self.node_index(cx + 1, cy),
            self.node_index(cx, cy + 1),
            self.node_index(cx + 1, cy + 1),
        ]
    }

    /// Boundary classification of a node; `None` for interior nodes.
    /// Corner nodes count as Dirichlet.
    pub fn boundary_tag(&self, node: usize) -> Option<BoundaryTag> {
        let ix = node % (self.nx + 1);
        let iy = node / (self.nx + 1);
        if iy == 0 {
            Some(BoundaryTag::DirichletBottom)
        } else if iy == self.ny {
            Some(BoundaryTag::DirichletTop)
        } else if ix == 0 {
            Some(BoundaryTag::NeumannLeft)
        } else if ix == self.nx {
            Some(BoundaryTag::NeumannRight)
        } else {
            None
        }
    }

    fn check_field(&self, f: &Field) -> Result<(), FemError> {
        if f.len() != self.n_nodes() {
            return Err(FemError::DimensionMismatch {
                expected: self.n_nodes(),
                found: f.len(),
            });
        }
        Ok(())
    }

    /// Containing cell and local reference coordinates of a point.
    /// A point on an interior cell edge uses the cell to its lower-left.
    pub fn locate(&self, x: f64, y: f64) -> Result<(usize, usize, f64, f64), FemError> {
        if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
            return Err(FemError::PointOutsideDomain { x, y });
        }
        let fx = x * self.nx as f64;
        let fy = y * self.ny as f64;
        let cx = (fx.ceil() as isize - 1).clamp(0, self.nx as isize - 1) as usize;
        let cy = (fy.ceil() as isize - 1).clamp(0, self.ny as isize - 1) as usize;
        let xi = 2.0 * (fx - cx as f64) - 1.0;
        let eta = 2.0 * (fy - cy as f64) - 1.0;
        Ok((cx, cy, xi, eta))
    }

    /// Nodes and bilinear weights interpolating a field at an interior point.
    /// Weights are nonnegative and sum to one.
    pub fn interpolation_weights(&self, x: f64, y: f64) -> Result<([usize; 4], [f64; 4]), FemError> {
        let (cx, cy, xi, eta) = self.locate(x, y)?;
        Ok((self.cell_nodes(cx, cy), shape(xi, eta)))
    }

    /// Evaluate a nodal field at an interior point by bilinear interpolation.
    pub fn interpolate(&self, f: &Field, x: f64, y: f64) -> Result<f64, FemError> {
        self.check_field(f)?;
        let (nodes, w) = self.interpolation_weights(x, y)?;
        Ok((0..4).map(|k| w[k] * f[nodes[k]]).sum())
    }
}

/// Q1 mass matrix: `M[i][j] = integral of phi_i phi_j`.
pub fn assemble_mass(grid: &Grid) -> SparseMatrix {
    let (hx, hy) = grid.spacing();
    let jac = 0.25 * hx * hy;
    // Reference element mass, exact under 2x2 Gauss quadrature.
    let mut local = [[0.0; 4]; 4];
    for &xi in &GAUSS_1D {
        for &eta in &GAUSS_1D {
            let n = shape(xi, eta);
            for i in 0..4 {
                for j in 0..4 {
                    local[i][j] += n[i] * n[j] * jac;
                }
            }
        }
    }
    let n = grid.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    for cy in 0..grid.ny {
        for cx in 0..grid.nx {
            let nodes = grid.cell_nodes(cx, cy);
            for i in 0..4 {
                for j in 0..4 {
                    coo.push(nodes[i], nodes[j], local[i][j]);
                }
            }
        }
    }
    CscMatrix::from(&coo)
}

/// Weighted anisotropic stiffness matrix
/// `S[i][j] = integral of kappa * grad(phi_i) . K grad(phi_j)`,
/// with the scalar coefficient `kappa` given as a nodal field and interpolated
/// to quadrature points. Fails if the interpolated coefficient is not strictly
/// positive at every quadrature point.
pub fn assemble_weighted_stiffness(
    grid: &Grid,
    kappa: &Field,
    k_mat: &Matrix2<f64>,
) -> Result<SparseMatrix, FemError> {
    grid.check_field(kappa)?;
    let (hx, hy) = grid.spacing();
    let jac = 0.25 * hx * hy;
    let n = grid.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    let mut gx = [0.0; 4];
    let mut gy = [0.0; 4];
    for cy in 0..grid.ny {
        for cx in 0..grid.nx {
            let nodes = grid.cell_nodes(cx, cy);
            let mut local = [[0.0; 4]; 4];
            for &xi in &GAUSS_1D {
                for &eta in &GAUSS_1D {
                    let nfun = shape(xi, eta);
                    let (dxi, deta) = shape_grad(xi, eta);
                    let kq: f64 = (0..4).map(|k| nfun[k] * kappa[nodes[k]]).sum();
                    if kq <= 0.0 {
                        let x = (cx as f64 + 0.5 * (xi + 1.0)) * hx;
                        let y = (cy as f64 + 0.5 * (eta + 1.0)) * hy;
                        return Err(FemError::NonPositiveCoefficient { value: kq, x, y });
                    }
                    for k in 0..4 {
                        gx[k] = dxi[k] * 2.0 / hx;
                        gy[k] = deta[k] * 2.0 / hy;
                    }
                    for i in 0..4 {
                        let kgx = k_mat[(0, 0)] * gx[i] + k_mat[(0, 1)] * gy[i];
                        let kgy = k_mat[(1, 0)] * gx[i] + k_mat[(1, 1)] * gy[i];
                        for j in 0..4 {
                            local[i][j] += kq * (kgx * gx[j] + kgy * gy[j]) * jac;
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
    Ok(CscMatrix::from(&coo))
}

/// Boundary mass matrix: 1D Q1 mass on every edge of the domain boundary.
/// Used for Robin terms of the prior operator.
pub fn assemble_boundary_mass(grid: &Grid) -> SparseMatrix {
    let (hx, hy) = grid.spacing();
    let n = grid.n_nodes();
    let mut coo = CooMatrix::new(n, n);
    let mut push_edge = |a: usize, b: usize, h: f64| {
        coo.push(a, a, h / 3.0);
        coo.push(b, b, h / 3.0);
        coo.push(a, b, h / 6.0);
        coo.push(b, a, h / 6.0);
    };
    for ix in 0..grid.nx {
        push_edge(grid.node_index(ix, 0), grid.node_index(ix + 1, 0), hx);
        push_edge(
            grid.node_index(ix, grid.ny),
            grid.node_index(ix + 1, grid.ny),
            hx,
        );
    }
    for iy in 0..grid.ny {
        push_edge(grid.node_index(0, iy), grid.node_index(0, iy + 1), hy);
        push_edge(
            grid.node_index(grid.nx, iy),
            grid.node_index(grid.nx, iy + 1),
            hy,
        );
    }
    CscMatrix::from(&coo)
}

/// Dirichlet constraints: a set of nodes with prescribed values.
#[derive(Debug, Clone)]
pub struct DirichletBc {
    values: Vec<Option<f64>>,
}

impl DirichletBc {
    pub fn none(grid: &Grid) -> Self {
        DirichletBc {
            values: vec![None; grid.n_nodes()],
        }
    }

    /// Constrain the bottom and top edges (corners included) to constant
    /// values; lateral edges stay unconstrained.
    pub fn bottom_top(grid: &Grid, bottom: f64, top: f64) -> Self {
        let mut bc = Self::none(grid);
        for ix in 0..=grid.nx() {
            bc.set(grid.node_index(ix, 0), bottom);
            bc.set(grid.node_index(ix, grid.ny()), top);
        }
        bc
    }

    /// Constrain nodes with arbitrary per-node values from a function of
    /// node coordinates, applied to the bottom and top edges.
    pub fn bottom_top_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut bc = Self::none(grid);
        for ix in 0..=grid.nx() {
            for iy in [0, grid.ny()] {
                let node = grid.node_index(ix, iy);
                let (x, y) = grid.node_coords(node);
                bc.set(node, f(x, y));
            }
        }
        bc
    }

    pub fn set(&mut self, node: usize, value: f64) {
        self.values[node] = Some(value);
    }

    pub fn is_constrained(&self, node: usize) -> bool {
        self.values[node].is_some()
    }

    pub fn value(&self, node: usize) -> Option<f64> {
        self.values[node]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| v.is_none())
    }

    /// Constrained-node values extended by zero to a full nodal vector.
    pub fn extended_values(&self) -> Field {
        Field::from_iterator(self.values.len(), self.values.iter().map(|v| v.unwrap_or(0.0)))
    }
}

/// Linear-solver backend selection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SolverKind {
    /// Sparse Cholesky factorization, the default.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    DiagonalCg { tol: f64, max_iters: usize },
}

/// Factorized (or iteratively solvable) SPD operator.
pub enum SpdSolver {
    Direct {
        chol: CscCholesky<f64>,
        n: usize,
    },
    Cg {
        mat: SparseMatrix,
        inv_diag: DVector<f64>,
        tol: f64,
        max_iters: usize,
    },
}

impl SpdSolver {
    pub fn new(mat: &SparseMatrix, kind: SolverKind) -> Result<Self, FemError> {
        match kind {
            SolverKind::Direct => {
                let chol =
                    CscCholesky::factor(mat).map_err(|_| FemError::NotPositiveDefinite)?;
                Ok(SpdSolver::Direct {
                    chol,
                    n: mat.nrows(),
                })
            }
            SolverKind::DiagonalCg { tol, max_iters } => {
                let mut inv_diag = DVector::zeros(mat.nrows());
                for i in 0..mat.nrows() {
                    let d = csc_get(mat, i, i);
                    if d <= 0.0 {
                        return Err(FemError::NotPositiveDefinite);
                    }
                    inv_diag[i] = 1.0 / d;
                }
                Ok(SpdSolver::Cg {
                    mat: mat.clone(),
                    inv_diag,
                    tol,
                    max_iters,
                })
            }
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, FemError> {
        match self {
            SpdSolver::Direct { chol, n } => {
                debug_assert_eq!(rhs.len(), *n);
                let b = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
                let x = chol.solve(&b);
                Ok(x.column(0).into_owned())
            }
            SpdSolver::Cg {
                mat,
                inv_diag,
                tol,
                max_iters,
            } => pcg(mat, inv_diag, rhs, *tol, *max_iters),
        }
    }
}

fn csc_get(mat: &SparseMatrix, row: usize, col: usize) -> f64 {
    let c = mat.col(col);
    for (r, v) in c.row_indices().iter().zip(c.values()) {
        if *r == row {
            return *v;
        }
    }
    0.0
}

pub fn spmv(mat: &SparseMatrix, v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(mat.nrows());
    for (col, cvec) in mat.col_iter().enumerate() {
        let x = v[col];
        if x != 0.0 {
            for (r, a) in cvec.row_indices().iter().zip(cvec.values()) {
                out[*r] += a * x;
            }
        }
    }
    out
}

fn pcg(
    mat: &SparseMatrix,
    inv_diag: &DVector<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>, FemError> {
    let mut x = DVector::zeros(rhs.len());
    let mut r = rhs.clone();
    let rhs_norm = rhs.norm().max(f64::MIN_POSITIVE);
    if rhs.norm() == 0.0 {
        return Ok(x);
    }
    let mut z = r.component_mul(inv_diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        let ap = spmv(mat, &p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(FemError::NotPositiveDefinite);
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * rhs_norm {
            return Ok(x);
        }
        z = r.component_mul(inv_diag);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Err(FemError::CgDidNotConverge {
        max_iters,
        residual: r.norm() / rhs_norm,
    })
}

/// SPD system with symmetric Dirichlet elimination.
///
/// Constrained rows and columns are removed from the operator (identity is
/// placed on the diagonal) and their coupling to free nodes is stored so that
/// inhomogeneous boundary values can be lifted into the right-hand side. One
/// factorization serves both the lifted solve and any number of solves with
/// homogeneous boundary values on the same constrained set.
pub struct ConstrainedSystem {
    solver: SpdSolver,
    constrained_mat: SparseMatrix,
    bc: DirichletBc,
    /// `A[:, c] * g_c` accumulated over constrained columns, restricted to
    /// free rows: the lifting correction for the stored boundary values.
    lift: DVector<f64>,
    residual_tol: f64,
}

impl ConstrainedSystem {
    pub fn new(mat: &SparseMatrix, bc: DirichletBc, kind: SolverKind) -> Result<Self, FemError> {
        let n = mat.nrows();
        assert_eq!(bc.len(), n, "boundary conditions sized for a different grid");
        let mut coo = CooMatrix::new(n, n);
        let mut lift = DVector::zeros(n);
        for (col, cvec) in mat.col_iter().enumerate() {
            let col_constrained = bc.is_constrained(col);
            let g = bc.value(col).unwrap_or(0.0);
            for (r, a) in cvec.row_indices().iter().zip(cvec.values()) {
                let row_constrained = bc.is_constrained(*r);
                match (row_constrained, col_constrained) {
                    (false, false) => coo.push(*r, col, *a),
                    (false, true) => lift[*r] += a * g,
                    _ => {}
                }
            }
        }
        for i in 0..n {
            if bc.is_constrained(i) {
                coo.push(i, i, 1.0);
            }
        }
        let constrained_mat = CscMatrix::from(&coo);
        let solver = SpdSolver::new(&constrained_mat, kind)?;
        Ok(ConstrainedSystem {
            solver,
            constrained_mat,
            bc,
            lift,
            residual_tol: 1e-10,
        })
    }

    pub fn bc(&self) -> &DirichletBc {
        &self.bc
    }

    fn solve_constrained(&self, rhs: DVector<f64>) -> Result<Field, FemError> {
        let x = self.solver.solve(&rhs)?;
        let res = (spmv(&self.constrained_mat, &x) - &rhs).norm();
        let tol = self.residual_tol * rhs.norm().max(1e-300);
        if !res.is_finite() || res > tol {
            return Err(FemError::SingularSystem {
                residual: res,
                tolerance: tol,
            });
        }
        Ok(x)
    }

    /// Solve with the stored (possibly inhomogeneous) boundary values.
    /// `rhs` is an assembled load vector; its entries at constrained nodes
    /// are ignored.
    pub fn solve_lifted(&self, rhs: &DVector<f64>) -> Result<Field, FemError> {
        let mut b = rhs - &self.lift;
        for i in 0..b.len() {
            if self.bc.is_constrained(i) {
                b[i] = self.bc.value(i).unwrap();
            }
        }
        self.solve_constrained(b)
    }

    /// Solve with homogeneous values on the constrained set; used by adjoint
    /// and incremental equations that share this factorization.
    pub fn solve_zero_bc(&self, rhs: &DVector<f64>) -> Result<Field, FemError> {
        let mut b = rhs.clone();
        for i in 0..b.len() {
            if self.bc.is_constrained(i) {
                b[i] = 0.0;
            }
        }
        self.solve_constrained(b)
    }
}

/// `sqrt(v' M v)`: L2 norm of a nodal field under a mass matrix.
pub fn mass_norm(mass: &SparseMatrix, v: &Field) -> f64 {
    spmv(mass, v).dot(v).max(0.0).sqrt()
}
