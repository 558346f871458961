//! Finite element library for the homogeneous Dirichlet problem of the
//! integral fractional Laplacian on 1D intervals and 2D triangulated disks.
//!
//! The pieces fit together as: `mesh` builds uniform and boundary-graded
//! conforming meshes, `quadrature` evaluates the singular pair integrals of
//! the kernel `|x-y|^(-(n+2s))`, `assembly` produces the dense stiffness
//! matrix and load vector, `linalg` solves the SPD system, `analytic` holds
//! exact solutions, and `study` orchestrates energy-norm convergence
//! experiments.

pub mod analytic;
pub mod assembly;
pub mod linalg;
pub mod mesh;
pub mod quadrature;
pub mod study;

pub use mesh::{build_graded_disk_mesh, build_interval_mesh, GradingSpec, Mesh, PairClass};
