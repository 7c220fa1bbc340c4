//! Entropic optimal transport solvers.
//!
//! * [`swsg`]: the height-coupled dual Sinkhorn (log update for `psi`,
//!   Lambert-W update for `phi`).
//! * [`symmetric`]: self-transport potential of the particle measure.
//! * [`balanced`]: plain two-marginal `OT_eps` and the Sinkhorn divergence.
//! * [`barycentric`]: barycentric projections and debiased gradients.
//! * [`saddle`]: the debiased saddle-point problem, solved either by
//!   ascent-descent or by the three-update Sinkhorn-like relaxation.
//!
//! The geostrophic solvers use the kernel `exp(-c/eps)` of
//! [`entropic_cost`](crate::geometry::entropic_cost), which sums the Gibbs
//! weights of all `x1` images so that potentials and barycentres are smooth
//! across the half-period seam. The point-cloud `OT_eps` and Sinkhorn
//! divergence in [`balanced`] use the nearest-image
//! [`transport_cost`](crate::geometry::transport_cost).

pub mod balanced;
pub mod barycentric;
pub mod kernel;
pub mod saddle;
pub mod swsg;
pub mod symmetric;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use balanced::{ot_eps_value, sinkhorn_divergence, OtOptions};
pub use barycentric::{barycentric_map, debiased_gradient};
pub use kernel::GibbsKernel;
pub use saddle::{saddle_ascent_descent, saddle_sinkhorn, SaddleSolution};
pub use swsg::{height_from_phi, solve_swsg_dual, swsg_sinkhorn_step, SwsgSolver};
pub use symmetric::symmetric_sinkhorn;

/// Coriolis and gravity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub f: f64,
    pub g: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self { f: 1.0, g: 0.1 }
    }
}

impl PhysicalParams {
    pub fn new(f: f64, g: f64) -> Result<Self> {
        let p = Self { f, g };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::invalid("f", "must be positive"));
        }
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(Error::invalid("g", "must be positive"));
        }
        Ok(())
    }

    /// `g / f^2`, the Hoskins displacement scale and the height/potential ratio.
    pub fn gamma(&self) -> f64 {
        self.g / (self.f * self.f)
    }
}

/// Stopping rule and entropic parameter of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub eps: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub warm_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 0.03,
            tol: 1e-11,
            max_iters: 20_000,
            warm_start: true,
        }
    }
}

impl SolverConfig {
    pub fn new(eps: f64, tol: f64, max_iters: usize) -> Result<Self> {
        let c = Self {
            eps,
            tol,
            max_iters,
            warm_start: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Kantorovich potentials.
///
/// `phi` lives on grid nodes, `psi` and `psi_sym` on particles, `u` (the
/// exponentiated symmetric potential of the height measure) on grid nodes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_sym: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
}

impl DualPotentials {
    pub fn zeros(n_grid: usize, n_particles: usize) -> Self {
        Self {
            phi: vec![0.0; n_grid],
            psi: vec![0.0; n_particles],
            psi_sym: None,
            u: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.phi) || !finite(&self.psi) {
            return Err(Error::InvalidState("non-finite potential".into()));
        }
        if let Some(s) = &self.psi_sym {
            if !finite(s) {
                return Err(Error::InvalidState("non-finite symmetric potential".into()));
            }
        }
        if let Some(u) = &self.u {
            if u.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::InvalidState("u must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Iteration record of a solve.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl SolveStats {
    fn push(&mut self, r: f64) {
        self.iterations += 1;
        self.final_residual = r;
        self.residual_history.push(r);
    }

    /// Turns an unconverged solve into an error.
    pub fn require_converged(&self, solver: &'static str) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                solver,
                iterations: self.iterations,
                residual: self.final_residual,
                context: String::new(),
            })
        }
    }
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn check_measures(
    grid: &crate::geometry::DiscreteMeasure,
    sigma: &crate::geometry::DiscreteMeasure,
) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("grid measure", "empty"));
    }
    if sigma.is_empty() {
        return Err(Error::invalid("sigma", "empty"));
    }
    Ok(())
}
