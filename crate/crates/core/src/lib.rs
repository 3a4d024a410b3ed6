//! Budget-constrained robust sensor placement for Bayesian inverse problems
//! governed by an elliptic PDE.
//!
//! The library solves a max-min design problem: choose which `budget` of the
//! candidate sensors to activate so that the expected information gain of the
//! resulting Bayesian inverse problem is as large as possible under the worst
//! admissible observation-noise parameters. Binary designs are relaxed into a
//! conditional-Bernoulli sampling distribution whose policy is improved by
//! stochastic gradient ascent, alternating with a descent step that enlarges
//! the set of adversarial noise parameters.
//!
//! Module map:
//! - [`fem`]: bilinear quadrilateral finite elements on a uniform grid of the
//!   unit square, sparse assembly and SPD solves.
//! - [`prior`]: Gaussian measure with squared-inverse-elliptic covariance.
//! - [`forward`]: PDE solution operator, point observations, first/second
//!   order adjoint machinery.
//! - [`noise`]: parametric noise covariances and masked precision operators.
//! - [`inverse`]: synthetic data generation and MAP point estimation.
//! - [`utility`]: low-rank Laplace information gain and its noise-parameter
//!   gradient, with memoization and solve accounting.
//! - [`design`]: conditional Bernoulli distribution over fixed-size designs.
//! - [`optimizer`]: policy-gradient outer loop and box-constrained inner
//!   descent implementing the alternating max-min scheme.
//! - [`experiment`]: configuration schema and wiring that builds a ready
//!   evaluator/optimizer bundle from a config file.

pub mod design;
pub mod experiment;
pub mod fem;
pub mod forward;
pub mod inverse;
pub mod noise;
pub mod optimizer;
pub mod prior;
pub mod utility;

pub use fem::Grid;
