//! Entropic semigeostrophic shallow-water solvers.
//!
//! Particles carry the geostrophic measure `sigma`; each time step solves a
//! height-coupled entropic transport problem between a fixed grid and the
//! particles, and moves the particles with the rotated (debiased) potential
//! gradient.

pub mod error;
pub mod geometry;
pub mod numerics;
pub mod oracle;
pub mod diagnostics;
pub mod dynamics;
pub mod ot;
pub mod scenarios;

pub use error::{Error, Result};
pub use geometry::{DiscreteMeasure, Domain, Grid, GridField, Point2};
pub use ot::{DualPotentials, PhysicalParams, SolveStats, SolverConfig};
