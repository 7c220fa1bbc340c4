//! Height-coupled entropic dual and its Sinkhorn relaxation.
//!
//! The dual maximised here is
//!
//! ```text
//! D(phi, psi) = sum_j s_j psi_j - f^2/(2g) sum_i mu_i phi_i^2
//!             - eps sum_ij mu_i s_j (exp((phi_i + psi_j - c_ij)/eps) - 1)
//! ```
//!
//! with grid weights `mu`, particle weights `s`. Its optimality system is
//! solved by alternating
//!
//! ```text
//! psi_j <- -eps log sum_i mu_i exp((phi_i - c_ij)/eps)
//! phi_i <- -eps W0( (g/(eps f^2)) sum_j s_j exp((psi_j - c_ij)/eps) )
//! ```
//!
//! and the entropic height is `h = -(f^2/g) phi`.

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, Domain, GridField};
use crate::numerics::lambert_w0_exp;

use super::kernel::GibbsKernel;
use super::{check_measures, sup_diff, DualPotentials, PhysicalParams, SolveStats, SolverConfig};

/// Sup-norm residuals of the two marginal conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalResiduals {
    /// `max_j |1 - sum_i mu_i exp((phi_i + psi_j - c_ij)/eps)|`
    pub particle: f64,
    /// `max_i |h_i - sum_j s_j exp((phi_i + psi_j - c_ij)/eps)|`
    pub height: f64,
}

/// Solver state for one (grid, particles) pair: the kernel is built once and
/// reused for every iteration, the barycentric map and the residual checks.
#[derive(Debug, Clone)]
pub struct SwsgSolver {
    grid_w: Vec<f64>,
    sigma_w: Vec<f64>,
    params: PhysicalParams,
    eps: f64,
    kernel: GibbsKernel,
}

impl SwsgSolver {
    pub fn new(
        grid: &DiscreteMeasure,
        sigma: &DiscreteMeasure,
        domain: &Domain,
        params: PhysicalParams,
        eps: f64,
    ) -> Result<Self> {
        check_measures(grid, sigma)?;
        params.validate()?;
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        Ok(Self {
            grid_w: grid.weights().to_vec(),
            sigma_w: sigma.weights().to_vec(),
            params,
            eps,
            kernel: GibbsKernel::between(grid.points(), sigma.points(), domain, eps),
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn params(&self) -> PhysicalParams {
        self.params
    }

    pub fn grid_weights(&self) -> &[f64] {
        &self.grid_w
    }

    pub fn sigma_weights(&self) -> &[f64] {
        &self.sigma_w
    }

    pub fn kernel_mut(&mut self) -> &mut GibbsKernel {
        &mut self.kernel
    }

    pub fn n_grid(&self) -> usize {
        self.grid_w.len()
    }

    pub fn n_particles(&self) -> usize {
        self.sigma_w.len()
    }

    /// Re-centres the kernel on a potential pair (cheap insurance before a warm solve).
    pub fn absorb(&mut self, pots: &DualPotentials) {
        self.kernel.absorb(&pots.phi, &pots.psi);
    }

    /// `log sum_i mu_i exp((phi_i - c_ij)/eps)` for every particle.
    pub fn log_grid_integral(&mut self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_particles()];
        self.kernel.reduce_over_rows(phi, &self.grid_w, &mut out);
        out
    }

    /// `log sum_j s_j exp((psi_j - c_ij)/eps)` for every grid node.
    pub fn log_sigma_integral(&mut self, psi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_grid()];
        self.kernel.reduce_over_cols(psi, &self.sigma_w, &mut out);
        out
    }

    /// The `psi` half-step.
    pub fn psi_update(&mut self, phi: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        let mut l = self.log_grid_integral(phi);
        for v in &mut l {
            *v *= -eps;
        }
        l
    }

    /// The Lambert half-step. With `log_u` the argument of `W0` gains the
    /// factor `u` and the result is shifted by `eps log u`.
    pub fn phi_update(&mut self, psi: &[f64], log_u: Option<&[f64]>) -> Vec<f64> {
        let eps = self.eps;
        let log_coef = (self.params.gamma() / eps).ln();
        let log_a = self.log_sigma_integral(psi);
        match log_u {
            None => log_a
                .iter()
                .map(|la| -eps * lambert_w0_exp(log_coef + la))
                .collect(),
            Some(lu) => log_a
                .iter()
                .zip(lu)
                .map(|(la, lu)| eps * lu + -eps * lambert_w0_exp(log_coef + la + lu))
                .collect(),
        }
    }

    /// One full sweep: `psi` from the current `phi`, then `phi` from the new `psi`.
    pub fn step(&mut self, pots: &DualPotentials) -> DualPotentials {
        let psi = self.psi_update(&pots.phi);
        let phi = self.phi_update(&psi, None);
        DualPotentials {
            phi,
            psi,
            psi_sym: pots.psi_sym.clone(),
            u: pots.u.clone(),
        }
    }

    /// Iterates [`step`](Self::step) until the potential increments drop below `cfg.tol`.
    pub fn solve(
        &mut self,
        cfg: &SolverConfig,
        init: Option<&DualPotentials>,
    ) -> Result<(DualPotentials, SolveStats)> {
        cfg.validate()?;
        let mut pots = match init {
            Some(p) => {
                self.check_shape(p)?;
                p.clone()
            }
            None => DualPotentials::zeros(self.n_grid(), self.n_particles()),
        };
        let mut stats = SolveStats::default();
        for _ in 0..cfg.max_iters {
            let next = self.step(&pots);
            let r = sup_diff(&next.phi, &pots.phi).max(sup_diff(&next.psi, &pots.psi));
            pots = next;
            stats.push(r);
            if !r.is_finite() {
                return Err(Error::InvalidState(format!(
                    "non-finite potentials after {} iterations",
                    stats.iterations
                )));
            }
            if r < cfg.tol {
                stats.converged = true;
                break;
            }
        }
        Ok((pots, stats))
    }

    fn check_shape(&self, p: &DualPotentials) -> Result<()> {
        if p.phi.len() != self.n_grid() || p.psi.len() != self.n_particles() {
            return Err(Error::invalid(
                "initial potentials",
                format!(
                    "shape ({}, {}) does not match ({}, {})",
                    p.phi.len(),
                    p.psi.len(),
                    self.n_grid(),
                    self.n_particles()
                ),
            ));
        }
        Ok(())
    }

    /// Residuals of the two marginal conditions with `h = -(f^2/g) phi`.
    pub fn marginal_residuals(&mut self, pots: &DualPotentials) -> MarginalResiduals {
        let h = heights(&pots.phi, &self.params);
        self.marginal_residuals_with_height(pots, &h)
    }

    /// As [`marginal_residuals`](Self::marginal_residuals) with an explicit height.
    pub fn marginal_residuals_with_height(&mut self, pots: &DualPotentials, h: &[f64]) -> MarginalResiduals {
        let inv = 1.0 / self.eps;
        let lg = self.log_grid_integral(&pots.phi);
        let particle = lg
            .iter()
            .zip(&pots.psi)
            .map(|(l, p)| (1.0 - (p * inv + l).exp()).abs())
            .fold(0.0, f64::max);
        let ls = self.log_sigma_integral(&pots.psi);
        let height = ls
            .iter()
            .zip(&pots.phi)
            .zip(h)
            .map(|((l, p), h)| (h - (p * inv + l).exp()).abs())
            .fold(0.0, f64::max);
        MarginalResiduals { particle, height }
    }

    /// Total coupling mass `sum_ij mu_i s_j exp((phi_i + psi_j - c_ij)/eps)`.
    pub fn coupling_mass(&mut self, phi: &[f64], psi: &[f64]) -> f64 {
        let inv = 1.0 / self.eps;
        let lg = self.log_grid_integral(phi);
        lg.iter()
            .zip(psi)
            .zip(&self.sigma_w)
            .map(|((l, p), s)| s * (p * inv + l).exp())
            .sum()
    }

    /// `eps * sum_ij mu_i s_j (exp((phi_i + psi_j - c_ij)/eps) - 1)`.
    pub fn entropy_term(&mut self, phi: &[f64], psi: &[f64]) -> f64 {
        let mass: f64 = self.grid_w.iter().sum::<f64>() * self.sigma_w.iter().sum::<f64>();
        self.eps * (self.coupling_mass(phi, psi) - mass)
    }

    /// The entropic transport term `sum s psi + sum mu h phi - entropy_term`, i.e.
    /// `OT_eps(h mu, sigma)` with reference measure `mu x sigma`.
    pub fn transport_value(&mut self, pots: &DualPotentials, h: &[f64]) -> f64 {
        let a: f64 = self.sigma_w.iter().zip(&pots.psi).map(|(s, p)| s * p).sum();
        let b: f64 = self
            .grid_w
            .iter()
            .zip(&pots.phi)
            .zip(h)
            .map(|((m, p), h)| m * p * h)
            .sum();
        a + b - self.entropy_term(&pots.phi, &pots.psi)
    }

    /// Value of the regularised dual at `(phi, psi)`.
    pub fn dual_value(&mut self, pots: &DualPotentials) -> f64 {
        let p = self.params;
        let a: f64 = self.sigma_w.iter().zip(&pots.psi).map(|(s, p)| s * p).sum();
        let b: f64 = self
            .grid_w
            .iter()
            .zip(&pots.phi)
            .map(|(m, p)| m * p * p)
            .sum();
        a - p.f * p.f / (2.0 * p.g) * b - self.entropy_term(&pots.phi, &pots.psi)
    }
}

fn heights(phi: &[f64], params: &PhysicalParams) -> Vec<f64> {
    let s = -1.0 / params.gamma();
    phi.iter().map(|p| s * p).collect()
}

/// `h_i = -(f^2/g) phi_i`.
pub fn height_from_phi(pots: &DualPotentials, params: &PhysicalParams) -> GridField {
    GridField::new(heights(&pots.phi, params))
}

/// One Sinkhorn sweep on freshly built kernels.
pub fn swsg_sinkhorn_step(
    pots: &DualPotentials,
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    domain: &Domain,
) -> Result<DualPotentials> {
    let mut s = SwsgSolver::new(grid, sigma, domain, *params, cfg.eps)?;
    s.check_shape(pots)?;
    Ok(s.step(pots))
}

/// Solves the height-coupled dual, optionally warm-started from `init`.
///
/// Hitting `max_iters` is not an error: the returned stats carry
/// `converged = false`.
pub fn solve_swsg_dual(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    init: Option<&DualPotentials>,
    domain: &Domain,
) -> Result<(DualPotentials, SolveStats)> {
    let mut s = SwsgSolver::new(grid, sigma, domain, *params, cfg.eps)?;
    if let Some(p) = init {
        s.check_shape(p)?;
        s.absorb(p);
    }
    s.solve(cfg, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{entropic_cost, transport_cost, Point2};
    use approx::assert_abs_diff_eq;

    fn dirac(p: Point2) -> DiscreteMeasure {
        DiscreteMeasure::new(vec![p], vec![1.0]).unwrap()
    }

    #[test]
    fn one_point_coincident_fixed_point() {
        let d = Domain::default();
        let x = Point2::new(0.5, 0.5);
        let params = PhysicalParams::new(1.0, 0.3).unwrap();
        let cfg = SolverConfig::new(0.05, 1e-12, 10_000).unwrap();
        let (p, st) = solve_swsg_dual(&dirac(x), &dirac(x), &params, &cfg, None, &d).unwrap();
        assert!(st.converged);
        assert_abs_diff_eq!(p.phi[0], -0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(p.psi[0], 0.3, epsilon = 1e-10);
        assert_abs_diff_eq!(height_from_phi(&p, &params).values()[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn one_point_separated_fixed_point() {
        let d = Domain::default();
        let x = Point2::new(0.5, 0.5);
        let y = Point2::new(0.6, 0.3);
        let c = transport_cost(x, y, &d);
        let params = PhysicalParams::default();
        let cfg = SolverConfig::new(0.01, 1e-11, 10_000).unwrap();
        let (p, st) = solve_swsg_dual(&dirac(x), &dirac(y), &params, &cfg, None, &d).unwrap();
        assert!(st.converged);
        assert_abs_diff_eq!(p.phi[0], -0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(p.psi[0], 0.1 + c, epsilon = 1e-9);
    }

    #[test]
    fn first_half_step_from_zero_phi() {
        let d = Domain::default();
        let g = crate::geometry::Grid::unit_square(3).unwrap().measure();
        let y = Point2::new(0.2, 0.7);
        let sigma = dirac(y);
        let cfg = SolverConfig::new(0.1, 1e-9, 10).unwrap();
        let p = swsg_sinkhorn_step(
            &DualPotentials::zeros(9, 1),
            &g,
            &sigma,
            &PhysicalParams::default(),
            &cfg,
            &d,
        )
        .unwrap();
        let expect = -0.1
            * g.points()
                .iter()
                .map(|x| (1.0 / 9.0) * (-entropic_cost(*x, y, &d, 0.1) / 0.1).exp())
                .sum::<f64>()
                .ln();
        assert_abs_diff_eq!(p.psi[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn warm_start_at_fixed_point_takes_one_iteration() {
        let d = Domain::default();
        let grid = crate::geometry::Grid::unit_square(4).unwrap().measure();
        let sigma = DiscreteMeasure::uniform(
            vec![Point2::new(0.3, 0.3), Point2::new(0.7, 0.6), Point2::new(0.1, 0.9)],
            1.0,
        )
        .unwrap();
        let params = PhysicalParams::default();
        let cfg = SolverConfig::new(0.05, 1e-11, 10_000).unwrap();
        let (p, _) = solve_swsg_dual(&grid, &sigma, &params, &cfg, None, &d).unwrap();
        let (q, st) = solve_swsg_dual(&grid, &sigma, &params, &cfg, Some(&p), &d).unwrap();
        assert_eq!(st.iterations, 1);
        assert!(st.final_residual < cfg.tol);
        assert!(sup_diff(&p.phi, &q.phi) < cfg.tol);
    }

    #[test]
    fn unconverged_solve_is_flagged() {
        let d = Domain::default();
        let grid = crate::geometry::Grid::unit_square(4).unwrap().measure();
        let sigma = DiscreteMeasure::uniform(vec![Point2::new(0.3, 0.3)], 1.0).unwrap();
        let cfg = SolverConfig::new(0.01, 1e-14, 3).unwrap();
        let (_, st) =
            solve_swsg_dual(&grid, &sigma, &PhysicalParams::default(), &cfg, None, &d).unwrap();
        assert!(!st.converged);
        assert_eq!(st.iterations, 3);
        assert!(st.require_converged("swsg").is_err());
    }

    #[test]
    fn rejects_mismatched_init() {
        let d = Domain::default();
        let grid = crate::geometry::Grid::unit_square(2).unwrap().measure();
        let sigma = dirac(Point2::new(0.5, 0.5));
        let bad = DualPotentials::zeros(3, 1);
        let cfg = SolverConfig::default();
        assert!(solve_swsg_dual(&grid, &sigma, &PhysicalParams::default(), &cfg, Some(&bad), &d).is_err());
        assert!(solve_swsg_dual(&DiscreteMeasure::empty(), &sigma, &PhysicalParams::default(), &cfg, None, &d).is_err());
    }

    #[test]
    fn height_examples() {
        let params = PhysicalParams::new(1.0, 0.1).unwrap();
        let p = DualPotentials {
            phi: vec![-0.1, 0.0],
            ..Default::default()
        };
        let h = height_from_phi(&p, &params);
        assert_abs_diff_eq!(h.values()[0], 1.0, epsilon = 1e-15);
        assert_eq!(h.values()[1], 0.0);
    }
}
