//! Meshfree state-based peridynamics (linear peridynamic solid) in 2D.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod krylov;
pub mod lps;
pub mod par;
pub mod quadrature;
pub mod static_solver;

pub use error::{Error, Result};
pub use par::Exec;
