//! Grid-refinement behaviour of the Q1 solver: exact reproduction of
//! Q1-representable solutions and second-order L2 convergence for a smooth
//! manufactured solution compatible with the mixed boundary conditions.

use nalgebra::{DVector, Matrix2};
use roed::fem::{
    assemble_mass, assemble_weighted_stiffness, mass_norm, spmv, ConstrainedSystem, DirichletBc,
    Field, Grid, SolverKind,
};
use std::f64::consts::PI;

#[test]
fn linear_solution_is_exact_at_every_resolution() {
    for n in [8, 16, 32] {
        let grid = Grid::new(n, n);
        let kappa = Field::repeat(grid.n_nodes(), 1.0);
        let s = assemble_weighted_stiffness(&grid, &kappa, &Matrix2::identity()).unwrap();
        let sys = ConstrainedSystem::new(
            &s,
            DirichletBc::bottom_top(&grid, 0.0, 1.0),
            SolverKind::Direct,
        )
        .unwrap();
        let u = sys.solve_lifted(&DVector::zeros(grid.n_nodes())).unwrap();
        let exact = Field::from_fn(grid.n_nodes(), |i, _| grid.node_coords(i).1);
        let mass = assemble_mass(&grid);
        assert!(
            mass_norm(&mass, &(u - exact)) <= 1e-10,
            "u = y should be exact at n = {n}"
        );
    }
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    // u = cos(pi x) * y satisfies du/dx = 0 on the lateral edges, u = 0 on the
    // bottom and u = cos(pi x) on the top; -laplace(u) = pi^2 cos(pi x) y.
    let exact = |x: f64, y: f64| (PI * x).cos() * y;
    let rhs_f = |x: f64, y: f64| PI * PI * (PI * x).cos() * y;

    let mut errors = Vec::new();
    for n in [8usize, 16, 32] {
        let grid = Grid::new(n, n);
        let kappa = Field::repeat(grid.n_nodes(), 1.0);
        let s = assemble_weighted_stiffness(&grid, &kappa, &Matrix2::identity()).unwrap();
        let mass = assemble_mass(&grid);
        let f = Field::from_fn(grid.n_nodes(), |i, _| {
            let (x, y) = grid.node_coords(i);
            rhs_f(x, y)
        });
        let load = spmv(&mass, &f);
        let bc = DirichletBc::bottom_top_fn(&grid, exact);
        let sys = ConstrainedSystem::new(&s, bc, SolverKind::Direct).unwrap();
        let u = sys.solve_lifted(&load).unwrap();
        let u_exact = Field::from_fn(grid.n_nodes(), |i, _| {
            let (x, y) = grid.node_coords(i);
            exact(x, y)
        });
        errors.push(mass_norm(&mass, &(u - u_exact)));
    }

    for pair in errors.windows(2) {
        let rate = (pair[0] / pair[1]).log2();
        assert!(
            rate >= 1.9,
            "observed rate {rate:.3} below 1.9 (errors: {errors:?})"
        );
    }
}
