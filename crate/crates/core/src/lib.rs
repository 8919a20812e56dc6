//! Finite-element simulator for a two-way coupled mechanotransduction model:
//! bulk/surface reaction–diffusion of focal adhesion kinase (FAK) and RhoA
//! coupled to linear (visco)elastic cell mechanics.
//!
//! Module map:
//! - [`mesh`]: tetrahedral meshes, boundary extraction, region tags, MSH I/O, generators
//! - [`fem`]: P1 assembly of bulk and surface operators
//! - [`linsolve`]: preconditioned CG and rigid-mode constrained solves
//! - [`model`]: parameters, coefficient functions, stimulus modes, unit conversion
//! - [`elasticity`]: traction-driven elasticity in its boundary-condition variants
//! - [`simulator`]: the coupled IMEX time loop and its observables
//! - [`verification`]: manufactured-solution convergence benchmark

pub mod elasticity;
pub mod fem;
pub mod linsolve;
pub mod mesh;
pub mod model;
pub mod simulator;
pub mod verification;
