//! Low-rank plus Neumann-series (LRNS) solvers for Monte-Carlo finite-element
//! discretizations of unsteady diffusion with a random permeability, and for
//! the associated distributed optimal-control problem.

pub mod control;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod functions;
pub mod io;
pub mod linalg;
pub mod lowrank;
pub mod neumann;
pub mod parallel;
pub mod randfield;
pub mod registry;
pub mod verify;
pub mod rng;

pub use error::{LrnsError, Result};
