//! Debiased height-coupled problem as a saddle point.
//!
//! With `gamma = g/f^2`, `E_ij = exp((phi_i + psi_j - c_ij)/eps)` and the
//! grid self-kernel `K_ik = exp(-c(X_i, X_k)/eps)`, the functional is
//!
//! ```text
//! F(phi, psi, h, u) = sum_j s_j psi_j + sum_i mu_i phi_i h_i - eps sum_i mu_i h_i log u_i
//!                   - eps sum_ij mu_i s_j (E_ij - 1)
//!                   + eps/2 sum_ik mu_i mu_k u_i u_k K_ik + gamma/2 sum_i mu_i h_i^2
//! ```
//!
//! maximised in `(phi, psi)` and minimised in `(h, u)`. Its stationarity
//! conditions, written as gradients with respect to the weighted inner
//! products, are
//!
//! ```text
//! psi:  1 - sum_i mu_i E_ij                      = 0
//! phi:  h_i - sum_j s_j E_ij                     = 0
//! h:    phi_i - eps log u_i + gamma h_i          = 0
//! u:    eps (sum_k mu_k u_k K_ik - h_i / u_i)    = 0
//! ```
//!
//! Dropping the two `u` terms recovers the biased problem of [`super::swsg`].

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, Domain, GridField};

use super::kernel::GibbsKernel;
use super::swsg::SwsgSolver;
use super::{check_measures, sup_diff, PhysicalParams, SolveStats};

/// Saddle point returned by either saddle solver.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub h: GridField,
    pub u: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub stats: SolveStats,
}

/// Per-point gradients of `F` (weighted inner products).
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleGradient {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
}

impl SaddleGradient {
    /// Largest absolute entry over all four blocks.
    pub fn sup_norm(&self) -> f64 {
        [&self.phi, &self.psi, &self.h, &self.u]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Sup-norm residuals of the four stationarity conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleResiduals {
    pub dpsi: f64,
    pub dphi: f64,
    pub dh: f64,
    pub du: f64,
}

impl SaddleResiduals {
    pub fn max(&self) -> f64 {
        self.dpsi.max(self.dphi).max(self.dh).max(self.du)
    }
}

/// Point of the saddle problem's state space.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
}

/// Kernels and weights of one saddle problem.
#[derive(Debug, Clone)]
pub struct SaddleProblem {
    swsg: SwsgSolver,
    self_kernel: GibbsKernel,
    /// Without the symmetric terms `u` is frozen at 1 and `F` is the biased dual.
    pub symmetric_terms: bool,
}

impl SaddleProblem {
    pub fn new(
        grid: &DiscreteMeasure,
        sigma: &DiscreteMeasure,
        params: PhysicalParams,
        eps: f64,
        domain: &Domain,
    ) -> Result<Self> {
        check_measures(grid, sigma)?;
        Ok(Self {
            swsg: SwsgSolver::new(grid, sigma, domain, params, eps)?,
            self_kernel: GibbsKernel::between(grid.points(), grid.points(), domain, eps),
            symmetric_terms: true,
        })
    }

    pub fn eps(&self) -> f64 {
        self.swsg.eps()
    }

    fn gamma(&self) -> f64 {
        self.swsg.params().gamma()
    }

    pub fn swsg_mut(&mut self) -> &mut SwsgSolver {
        &mut self.swsg
    }

    /// Starting point `phi = psi = 0`, `u = 1`, constant `h` carrying the particle mass.
    pub fn initial_point(&self) -> SaddlePoint {
        let n = self.swsg.n_grid();
        let mg: f64 = self.swsg.grid_weights().iter().sum();
        let ms: f64 = self.swsg.sigma_weights().iter().sum();
        SaddlePoint {
            phi: vec![0.0; n],
            psi: vec![0.0; self.swsg.n_particles()],
            h: vec![ms / mg; n],
            u: vec![1.0; n],
        }
    }

    /// `sum_k mu_k u_k K_ik` for every grid node.
    pub fn self_integral(&mut self, u: &[f64]) -> Vec<f64> {
        let eps = self.eps();
        let pot: Vec<f64> = u.iter().map(|u| eps * u.ln()).collect();
        let mut out = vec![0.0; u.len()];
        let w = self.swsg.grid_weights().to_vec();
        self.self_kernel.reduce_over_cols(&pot, &w, &mut out);
        out.iter().map(|l| l.exp()).collect()
    }

    /// Value of `F`.
    pub fn functional(&mut self, x: &SaddlePoint) -> f64 {
        let eps = self.eps();
        let gamma = self.gamma();
        let mu = self.swsg.grid_weights().to_vec();
        let s = self.swsg.sigma_weights();
        let lin: f64 = s.iter().zip(&x.psi).map(|(s, p)| s * p).sum();
        let mut grid_terms = 0.0;
        for i in 0..mu.len() {
            let mut t = x.phi[i] * x.h[i] + 0.5 * gamma * x.h[i] * x.h[i];
            if self.symmetric_terms {
                t -= eps * x.h[i] * x.u[i].ln();
            }
            grid_terms += mu[i] * t;
        }
        let entropy = self.swsg.entropy_term(&x.phi, &x.psi);
        let mut v = lin + grid_terms - entropy;
        if self.symmetric_terms {
            let ku = self.self_integral(&x.u);
            let quad: f64 = (0..mu.len()).map(|i| mu[i] * x.u[i] * ku[i]).sum();
            v += 0.5 * eps * quad;
        }
        v
    }

    /// Per-point gradients of `F`. Partial derivatives are these times the point weights.
    pub fn gradient(&mut self, x: &SaddlePoint) -> SaddleGradient {
        let eps = self.eps();
        let inv = 1.0 / eps;
        let gamma = self.gamma();
        let lg = self.swsg.log_grid_integral(&x.phi);
        let psi: Vec<f64> = lg
            .iter()
            .zip(&x.psi)
            .map(|(l, p)| 1.0 - (p * inv + l).exp())
            .collect();
        let ls = self.swsg.log_sigma_integral(&x.psi);
        let phi: Vec<f64> = ls
            .iter()
            .zip(&x.phi)
            .zip(&x.h)
            .map(|((l, p), h)| h - (p * inv + l).exp())
            .collect();
        let n = x.phi.len();
        let (h, u) = if self.symmetric_terms {
            let ku = self.self_integral(&x.u);
            let h = (0..n)
                .map(|i| x.phi[i] - eps * x.u[i].ln() + gamma * x.h[i])
                .collect();
            let u = (0..n).map(|i| eps * (ku[i] - x.h[i] / x.u[i])).collect();
            (h, u)
        } else {
            let h = (0..n).map(|i| x.phi[i] + gamma * x.h[i]).collect();
            (h, vec![0.0; n])
        };
        SaddleGradient { phi, psi, h, u }
    }

    /// Residuals of the stationarity system. The `u` residual is `h - u (K mu u)`.
    pub fn residuals(&mut self, x: &SaddlePoint) -> SaddleResiduals {
        let g = self.gradient(x);
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let du = if self.symmetric_terms {
            let ku = self.self_integral(&x.u);
            (0..x.h.len())
                .map(|i| (x.h[i] - x.u[i] * ku[i]).abs())
                .fold(0.0, f64::max)
        } else {
            0.0
        };
        SaddleResiduals {
            dpsi: sup(&g.psi),
            dphi: sup(&g.phi),
            dh: sup(&g.h),
            du,
        }
    }

    /// One sweep of the three-update relaxation, without damping of `u`.
    ///
    /// Returns the new `(psi, phi)` and the undamped `log u` proposal.
    pub fn sinkhorn_sweep(&mut self, phi: &[f64], log_u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let eps = self.eps();
        let gamma = self.gamma();
        let psi = self.swsg.psi_update(phi);
        let phi_new = self.swsg.phi_update(&psi, Some(log_u));
        let u: Vec<f64> = log_u.iter().map(|l| l.exp()).collect();
        let ku = self.self_integral(&u);
        let log_u_new = (0..phi.len())
            .map(|i| (eps * log_u[i] - phi_new[i]).ln() - gamma.ln() - ku[i].ln())
            .collect();
        (psi, phi_new, log_u_new)
    }

    /// Height implied by `u` through `h = u (K mu u)`.
    pub fn height_from_u(&mut self, u: &[f64]) -> Vec<f64> {
        let ku = self.self_integral(u);
        u.iter().zip(&ku).map(|(u, k)| u * k).collect()
    }
}

/// Damping of the `log u` update: `log u <- (1 - w) log u + w * proposal`.
pub const U_RELAXATION: f64 = 0.5;

/// Three-update relaxation of the stationarity system.
///
/// Starts from `init` or from `phi = psi = 0`, `u = 1`. Stops when the sup
/// norm of the increments of `phi`, `psi` and `u` falls below `tol`.
pub fn saddle_sinkhorn(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    tol: f64,
    max_iters: usize,
    init: Option<&SaddlePoint>,
    domain: &Domain,
) -> Result<SaddleSolution> {
    let mut prob = SaddleProblem::new(grid, sigma, *params, eps, domain)?;
    saddle_sinkhorn_on(&mut prob, tol, max_iters, init)
}

/// [`saddle_sinkhorn`] on a prepared problem.
pub fn saddle_sinkhorn_on(
    prob: &mut SaddleProblem,
    tol: f64,
    max_iters: usize,
    init: Option<&SaddlePoint>,
) -> Result<SaddleSolution> {
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::invalid("tol/max_iters", "must be positive"));
    }
    let start = init.cloned().unwrap_or_else(|| prob.initial_point());
    if start.phi.len() != prob.swsg.n_grid() || start.psi.len() != prob.swsg.n_particles() {
        return Err(Error::invalid("saddle init", "shape mismatch"));
    }
    if start.u.iter().any(|u| !(*u > 0.0 && u.is_finite())) {
        return Err(Error::InvalidState("u must be positive".into()));
    }
    let mut phi = start.phi;
    let mut psi = start.psi;
    let mut log_u: Vec<f64> = start.u.iter().map(|u| u.ln()).collect();
    let mut u = start.u;
    let mut stats = SolveStats::default();
    for _ in 0..max_iters {
        let (psi_new, phi_new, proposal) = prob.sinkhorn_sweep(&phi, &log_u);
        let log_u_new: Vec<f64> = log_u
            .iter()
            .zip(&proposal)
            .map(|(a, b)| (1.0 - U_RELAXATION) * a + U_RELAXATION * b)
            .collect();
        if log_u_new.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidState(format!(
                "u left (0, inf) after {} iterations",
                stats.iterations + 1
            )));
        }
        let u_new: Vec<f64> = log_u_new.iter().map(|l| l.exp()).collect();
        let r = sup_diff(&phi_new, &phi)
            .max(sup_diff(&psi_new, &psi))
            .max(sup_diff(&u_new, &u));
        phi = phi_new;
        psi = psi_new;
        log_u = log_u_new;
        u = u_new;
        stats.push(r);
        if !r.is_finite() {
            return Err(Error::InvalidState("non-finite saddle iterate".into()));
        }
        if r < tol {
            stats.converged = true;
            break;
        }
    }
    let h = prob.height_from_u(&u);
    Ok(SaddleSolution {
        h: GridField::new(h),
        u,
        phi,
        psi,
        stats,
    })
}

/// Options of the ascent-descent solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentDescentOptions {
    /// Step size; `None` selects `0.5 eps g / f^2`.
    pub step: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    /// Keep the `u` terms of `F` (false gives the biased problem).
    pub symmetric_terms: bool,
}

impl Default for AscentDescentOptions {
    fn default() -> Self {
        Self {
            step: None,
            tol: 1e-10,
            max_iters: 2_000_000,
            symmetric_terms: true,
        }
    }
}

/// Window and growth factor of the divergence detector.
const DIVERGENCE_WINDOW: usize = 100;
const DIVERGENCE_GROWTH: f64 = 10.0;
const MAX_HALVINGS: usize = 30;

/// Simultaneous gradient ascent in `(phi, psi)` and descent in `(h, u)`.
///
/// When the gradient norm grows tenfold over 100 iterations, or `u` leaves
/// `(0, inf)`, the step is halved and the iteration restarts from the initial
/// point. The stats record the iterations of the final, successful pass.
pub fn saddle_ascent_descent(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    opts: &AscentDescentOptions,
    domain: &Domain,
) -> Result<SaddleSolution> {
    let mut prob = SaddleProblem::new(grid, sigma, *params, eps, domain)?;
    prob.symmetric_terms = opts.symmetric_terms;
    saddle_ascent_descent_on(&mut prob, opts, None)
}

/// [`saddle_ascent_descent`] on a prepared problem.
pub fn saddle_ascent_descent_on(
    prob: &mut SaddleProblem,
    opts: &AscentDescentOptions,
    init: Option<&SaddlePoint>,
) -> Result<SaddleSolution> {
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::invalid("tol/max_iters", "must be positive"));
    }
    let mut t = opts.step.unwrap_or(0.5 * prob.eps() * prob.gamma());
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let start = init.cloned().unwrap_or_else(|| prob.initial_point());
    'restart: for _ in 0..=MAX_HALVINGS {
        let mut x = start.clone();
        let mut stats = SolveStats::default();
        let mut window: Vec<f64> = Vec::with_capacity(opts.max_iters.min(1 << 20));
        for it in 0..opts.max_iters {
            let g = prob.gradient(&x);
            let r = g.sup_norm();
            stats.push(r);
            window.push(r);
            if !r.is_finite() {
                t *= 0.5;
                continue 'restart;
            }
            if r < opts.tol {
                stats.converged = true;
                let h = x.h.clone();
                return Ok(SaddleSolution {
                    h: GridField::new(h),
                    u: x.u,
                    phi: x.phi,
                    psi: x.psi,
                    stats,
                });
            }
            if it >= DIVERGENCE_WINDOW && r > DIVERGENCE_GROWTH * window[it - DIVERGENCE_WINDOW] {
                log::debug!("ascent-descent diverging at step {t:e}; halving");
                t *= 0.5;
                continue 'restart;
            }
            for (p, d) in x.phi.iter_mut().zip(&g.phi) {
                *p += t * d;
            }
            for (p, d) in x.psi.iter_mut().zip(&g.psi) {
                *p += t * d;
            }
            for (p, d) in x.h.iter_mut().zip(&g.h) {
                *p -= t * d;
            }
            if prob.symmetric_terms {
                for (p, d) in x.u.iter_mut().zip(&g.u) {
                    *p -= t * d;
                }
                if x.u.iter().any(|u| *u <= 0.0) {
                    t *= 0.5;
                    continue 'restart;
                }
            }
        }
        let h = x.h.clone();
        return Ok(SaddleSolution {
            h: GridField::new(h),
            u: x.u,
            phi: x.phi,
            psi: x.psi,
            stats,
        });
    }
    Err(Error::InvalidState(format!(
        "ascent-descent diverged after {MAX_HALVINGS} step halvings"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Grid, Point2};
    use crate::ot::{solve_swsg_dual, DualPotentials, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, n: usize, m: usize) -> (DiscreteMeasure, DiscreteMeasure) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gp: Vec<Point2> = (0..n).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let sp: Vec<Point2> = (0..m).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let t: f64 = w.iter().sum();
        (
            DiscreteMeasure::uniform(gp, 1.0).unwrap(),
            DiscreteMeasure::new(sp, w.iter().map(|x| x / t).collect()).unwrap(),
        )
    }

    #[test]
    fn first_sweep_with_unit_u_is_the_biased_sweep() {
        let d = Domain::default();
        let (g, s) = random_instance(1, 9, 7);
        let params = PhysicalParams::default();
        let mut prob = SaddleProblem::new(&g, &s, params, 0.05, &d).unwrap();
        let (psi, phi, _) = prob.sinkhorn_sweep(&vec![0.0; 9], &vec![0.0; 9]);
        let mut sw = SwsgSolver::new(&g, &s, &d, params, 0.05).unwrap();
        let b = sw.step(&DualPotentials::zeros(9, 7));
        assert_eq!(psi, b.psi);
        assert_eq!(phi, b.phi);
    }

    fn bump(p: &mut SaddlePoint, block: usize, i: usize, d: f64) {
        match block {
            0 => p.phi[i] += d,
            1 => p.psi[i] += d,
            2 => p.h[i] += d,
            _ => p.u[i] += d,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = Domain::default();
        let (g, s) = random_instance(2, 6, 5);
        let mut prob = SaddleProblem::new(&g, &s, PhysicalParams::default(), 0.1, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = SaddlePoint {
            phi: (0..6).map(|_| rng.gen_range(-0.2..0.0)).collect(),
            psi: (0..5).map(|_| rng.gen_range(0.0..0.2)).collect(),
            h: (0..6).map(|_| rng.gen_range(0.5..1.5)).collect(),
            u: (0..6).map(|_| rng.gen_range(0.5..2.0)).collect(),
        };
        let grad = prob.gradient(&x);
        let mu = g.weights().to_vec();
        let sw = s.weights().to_vec();
        let step = 1e-6;
        let mut check = |block: usize, i: usize, analytic: f64| {
            let mut a = x.clone();
            let mut b = x.clone();
            bump(&mut a, block, i, step);
            bump(&mut b, block, i, -step);
            let fd = (prob.functional(&a) - prob.functional(&b)) / (2.0 * step);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-3);
            assert!(rel < 1e-6, "block {block} index {i}: fd {fd} analytic {analytic}");
        };
        for i in 0..6 {
            check(0, i, mu[i] * grad.phi[i]);
            check(2, i, mu[i] * grad.h[i]);
            check(3, i, mu[i] * grad.u[i]);
        }
        for j in 0..5 {
            check(1, j, sw[j] * grad.psi[j]);
        }
    }

    #[test]
    fn one_point_fixed_point() {
        let d = Domain::default();
        let x = Point2::new(0.5, 0.5);
        let g = DiscreteMeasure::new(vec![x], vec![1.0]).unwrap();
        let s = DiscreteMeasure::new(vec![Point2::new(0.55, 0.45)], vec![1.0]).unwrap();
        let params = PhysicalParams::default();
        let sol = saddle_sinkhorn(&g, &s, &params, 0.05, 1e-12, 10_000, None, &d).unwrap();
        assert!(sol.stats.converged);
        // one point: h = 1 and u K u = h with K = 1 gives u = 1
        assert!((sol.h.values()[0] - 1.0).abs() < 1e-10);
        assert!((sol.u[0] - 1.0).abs() < 1e-10);
        let mut prob = SaddleProblem::new(&g, &s, params, 0.05, &d).unwrap();
        let r = prob.residuals(&SaddlePoint {
            phi: sol.phi,
            psi: sol.psi,
            h: sol.h.into_values(),
            u: sol.u,
        });
        assert!(r.max() < 1e-10, "{r:?}");
    }

    #[test]
    fn ascent_descent_without_symmetric_terms_matches_biased_solver() {
        let d = Domain::default();
        let (g, s) = random_instance(4, 6, 5);
        let params = PhysicalParams::default();
        let eps = 0.1;
        let opts = AscentDescentOptions {
            step: Some(0.02),
            tol: 1e-11,
            symmetric_terms: false,
            ..Default::default()
        };
        let ad = saddle_ascent_descent(&g, &s, &params, eps, &opts, &d).unwrap();
        assert!(ad.stats.converged);
        let cfg = SolverConfig::new(eps, 1e-13, 100_000).unwrap();
        let (p, _) = solve_swsg_dual(&g, &s, &params, &cfg, None, &d).unwrap();
        let h = crate::ot::height_from_phi(&p, &params);
        assert!(sup_diff(h.values(), ad.h.values()) < 1e-8);
    }

    #[test]
    fn relaxation_and_ascent_descent_agree() {
        let d = Domain::default();
        let (g, s) = random_instance(5, 8, 8);
        let params = PhysicalParams::default();
        let eps = 0.1;
        let sk = saddle_sinkhorn(&g, &s, &params, eps, 1e-12, 100_000, None, &d).unwrap();
        assert!(sk.stats.converged);
        let opts = AscentDescentOptions {
            step: Some(0.02),
            tol: 1e-11,
            ..Default::default()
        };
        let ad = saddle_ascent_descent(&g, &s, &params, eps, &opts, &d).unwrap();
        assert!(ad.stats.converged);
        assert!(sup_diff(sk.h.values(), ad.h.values()) < 1e-7);
    }

    #[test]
    fn grid_self_transport_has_unit_height() {
        let d = Domain::default();
        let g = Grid::unit_square(5).unwrap().measure();
        let sol = saddle_sinkhorn(&g, &g, &PhysicalParams::default(), 0.05, 1e-11, 100_000, None, &d).unwrap();
        assert!(sol.stats.converged);
        let m = sol.h.values().iter().fold(0.0f64, |m, h| m.max((h - 1.0).abs()));
        assert!(m < 1e-8, "{m}");
    }
}
