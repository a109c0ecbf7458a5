//! Solver library for multispecies density-steering problems on terrain
//! grids.
//!
//! A problem describes `L` species of agents moving on an `N`-cell grid over
//! `T` time steps. Each species has its own sparse movement kernel and
//! per-cell costs; the species are coupled through costs and constraints on
//! the total density. The solver runs generalized Sinkhorn sweeps over the
//! scaling factors of the mass tensor, computing all marginal projections
//! through forward/backward message recursions so the tensor itself is never
//! materialized.
//!
//! Modules:
//! - [`scenario`]: problem data model, scenario file format, example generator
//! - [`kernel`]: movement stencils, sparse cost matrices and kernels
//! - [`propagation`]: message recursions and marginal projections
//! - [`updates`]: per-cost-type scaling updates
//! - [`solver`]: the sweep driver, convergence tracking, checkpointing
//! - [`oracle`]: dense brute-force reference implementation for tests

pub mod kernel;
pub mod oracle;
pub mod propagation;
pub mod scenario;
pub mod solver;
pub mod updates;

pub use scenario::{MarginalCost, Problem, SpeciesSpec, Terrain, TerrainGrid};
pub use solver::{SolveOptions, Solution};
