//! All-at-once neural solvers for parametric PDE-constrained optimal control.
//!
//! Three networks over joint space-parameter inputs — state, adjoint and
//! control — are trained by alternating residual minimization with a
//! projected-gradient control update ([`driver::aonn_solve`]). The penalized
//! KKT baselines, quasi-Monte-Carlo collocation, projections, full-batch
//! quasi-Newton optimizers and an error harness against closed-form optimal
//! solutions round out the toolkit.

pub mod constraints;
pub mod driver;
pub mod gradcheck;
pub mod jet_engine;
pub mod optim;
pub mod problems;
pub mod report;
pub mod sampling;
