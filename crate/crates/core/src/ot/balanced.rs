//! Two-marginal entropic transport and the Sinkhorn divergence.
//!
//! `OT_eps(a, b)` is taken relative to the product reference `a x b`:
//!
//! ```text
//! OT_eps(a, b) = max_{f,g} sum a f + sum b g - eps sum_ij a_i b_j (exp((f_i + g_j - c_ij)/eps) - 1)
//! ```
//!
//! The solvers are generic over the ground cost so the same code serves the
//! planar losses and the four-dimensional phase-space loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transport_cost, DiscreteMeasure, Domain};

use super::kernel::GibbsKernel;
use super::symmetric::symmetric_on_kernel;
use super::{sup_diff, SolveStats};

/// Mass mismatch tolerated by the balanced solvers.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtOptions {
    pub eps: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for OtOptions {
    fn default() -> Self {
        Self {
            eps: 0.01,
            tol: 1e-9,
            max_iters: 100_000,
        }
    }
}

impl OtOptions {
    pub fn new(eps: f64, tol: f64) -> Result<Self> {
        let o = Self {
            eps,
            tol,
            ..Self::default()
        };
        o.validate()?;
        Ok(o)
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

/// Converged potentials and value of a balanced problem.
#[derive(Debug, Clone)]
pub struct OtSolution {
    pub value: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub stats: SolveStats,
}

fn check_mass(wa: &[f64], wb: &[f64]) -> Result<()> {
    let ma: f64 = wa.iter().sum();
    let mb: f64 = wb.iter().sum();
    if (ma - mb).abs() > MASS_TOLERANCE * ma.abs().max(mb.abs()).max(1.0) {
        return Err(Error::MassMismatch(ma, mb));
    }
    if wa.is_empty() || wb.is_empty() {
        return Err(Error::invalid("measure", "empty"));
    }
    Ok(())
}

/// Dual value at `(f, g)` for an explicit kernel.
fn dual_value(kernel: &mut GibbsKernel, wa: &[f64], wb: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let eps = kernel.eps();
    let mut lg = vec![0.0; wb.len()];
    kernel.reduce_over_rows(f, wa, &mut lg);
    let coupling: f64 = lg
        .iter()
        .zip(g)
        .zip(wb)
        .map(|((l, g), b)| b * (g / eps + l).exp())
        .sum();
    let ma: f64 = wa.iter().sum();
    let mb: f64 = wb.iter().sum();
    let lin: f64 = wa.iter().zip(f).map(|(a, f)| a * f).sum::<f64>()
        + wb.iter().zip(g).map(|(b, g)| b * g).sum::<f64>();
    lin - eps * (coupling - ma * mb)
}

/// `OT_eps` between weights `wa`, `wb` under `cost(i, j)`.
pub fn ot_eps_generic(
    wa: &[f64],
    wb: &[f64],
    cost: impl Fn(usize, usize) -> f64,
    opts: &OtOptions,
) -> Result<OtSolution> {
    opts.validate()?;
    check_mass(wa, wb)?;
    let eps = opts.eps;
    let mut k = GibbsKernel::from_cost(wa.len(), wb.len(), eps, cost);
    let mut f = vec![0.0; wa.len()];
    let mut g = vec![0.0; wb.len()];
    let mut g_new = vec![0.0; wb.len()];
    let mut f_new = vec![0.0; wa.len()];
    let mut stats = SolveStats::default();
    for _ in 0..opts.max_iters {
        k.reduce_over_rows(&f, wa, &mut g_new);
        for v in &mut g_new {
            *v *= -eps;
        }
        k.reduce_over_cols(&g_new, wb, &mut f_new);
        for v in &mut f_new {
            *v *= -eps;
        }
        let r = sup_diff(&f_new, &f).max(sup_diff(&g_new, &g));
        std::mem::swap(&mut f, &mut f_new);
        std::mem::swap(&mut g, &mut g_new);
        stats.push(r);
        if !r.is_finite() {
            return Err(Error::InvalidState("non-finite OT potential".into()));
        }
        if r < opts.tol {
            stats.converged = true;
            break;
        }
    }
    stats.require_converged("ot_eps")?;
    let value = dual_value(&mut k, wa, wb, &f, &g);
    Ok(OtSolution { value, f, g, stats })
}

/// `OT_eps(a, a)` through the symmetric averaged iteration.
pub fn ot_eps_self_generic(
    w: &[f64],
    cost: impl Fn(usize, usize) -> f64,
    opts: &OtOptions,
) -> Result<OtSolution> {
    opts.validate()?;
    if w.is_empty() {
        return Err(Error::invalid("measure", "empty"));
    }
    let mut k = GibbsKernel::from_cost(w.len(), w.len(), opts.eps, cost);
    let (f, stats) = symmetric_on_kernel(&mut k, w, opts.tol, opts.max_iters, None)?;
    stats.require_converged("ot_eps_self")?;
    let value = dual_value(&mut k, w, w, &f, &f);
    Ok(OtSolution {
        value,
        g: f.clone(),
        f,
        stats,
    })
}

/// `S_eps(a, b)` under explicit costs for the three pairings.
pub fn sinkhorn_divergence_generic(
    wa: &[f64],
    wb: &[f64],
    cost_ab: impl Fn(usize, usize) -> f64,
    cost_aa: impl Fn(usize, usize) -> f64,
    cost_bb: impl Fn(usize, usize) -> f64,
    opts: &OtOptions,
) -> Result<f64> {
    let ab = ot_eps_generic(wa, wb, cost_ab, opts)?.value;
    let aa = ot_eps_self_generic(wa, cost_aa, opts)?.value;
    let bb = ot_eps_self_generic(wb, cost_bb, opts)?.value;
    Ok(ab - 0.5 * aa - 0.5 * bb)
}

/// `OT_eps(mu_a, mu_b)` under the periodic transport cost.
pub fn ot_eps_value(
    mu_a: &DiscreteMeasure,
    mu_b: &DiscreteMeasure,
    eps: f64,
    tol: f64,
    domain: &Domain,
) -> Result<f64> {
    let (pa, pb) = (mu_a.points(), mu_b.points());
    let opts = OtOptions::new(eps, tol)?;
    Ok(ot_eps_generic(mu_a.weights(), mu_b.weights(), |i, j| transport_cost(pa[i], pb[j], domain), &opts)?.value)
}

/// Sinkhorn divergence `OT(a,b) - OT(a,a)/2 - OT(b,b)/2` under the periodic transport cost.
pub fn sinkhorn_divergence(
    mu_a: &DiscreteMeasure,
    mu_b: &DiscreteMeasure,
    eps: f64,
    tol: f64,
    domain: &Domain,
) -> Result<f64> {
    let (pa, pb) = (mu_a.points(), mu_b.points());
    let opts = OtOptions::new(eps, tol)?;
    sinkhorn_divergence_generic(
        mu_a.weights(),
        mu_b.weights(),
        |i, j| transport_cost(pa[i], pb[j], domain),
        |i, j| transport_cost(pa[i], pa[j], domain),
        |i, j| transport_cost(pb[i], pb[j], domain),
        &opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dirac(p: Point2) -> DiscreteMeasure {
        DiscreteMeasure::new(vec![p], vec![1.0]).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, n: usize) -> DiscreteMeasure {
        let pts: Vec<Point2> = (0..n).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let t: f64 = w.iter().sum();
        DiscreteMeasure::new(pts, w.iter().map(|x| x / t).collect()).unwrap()
    }

    #[test]
    fn identical_diracs_cost_nothing() {
        let d = Domain::default();
        let a = dirac(Point2::new(0.3, 0.3));
        for eps in [1.0, 0.1, 0.001] {
            assert!(ot_eps_value(&a, &a, eps, 1e-12, &d).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn separated_diracs_cost_their_distance() {
        let d = Domain::default();
        let (x, y) = (Point2::new(0.3, 0.3), Point2::new(0.5, 0.4));
        let c = transport_cost(x, y, &d);
        let v = ot_eps_value(&dirac(x), &dirac(y), 1e-3, 1e-12, &d).unwrap();
        assert!((v - c).abs() < 5e-3);
        let s = sinkhorn_divergence(&dirac(x), &dirac(y), 1e-3, 1e-12, &d).unwrap();
        assert!((s - c).abs() < 1e-12);
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        let d = Domain::default();
        let a = DiscreteMeasure::new(vec![Point2::new(0.1, 0.1)], vec![1.0]).unwrap();
        let b = DiscreteMeasure::new(vec![Point2::new(0.1, 0.1)], vec![0.9]).unwrap();
        assert!(matches!(
            ot_eps_value(&a, &b, 0.1, 1e-9, &d),
            Err(Error::MassMismatch(..))
        ));
    }

    #[test]
    fn divergence_vanishes_on_identical_measures() {
        let d = Domain::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_measure(&mut rng, 12);
        let s = sinkhorn_divergence(&a, &a, 0.05, 1e-12, &d).unwrap();
        assert!(s.abs() < 1e-10);
    }

    #[test]
    fn ot_value_grows_with_eps() {
        let d = Domain::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_measure(&mut rng, 10);
        let b = random_measure(&mut rng, 9);
        let vals: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.3]
            .iter()
            .map(|&e| ot_eps_value(&a, &b, e, 1e-12, &d).unwrap())
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-11, "{vals:?}");
        }
    }
}
