//! Self-transport potential of a single measure.
//!
//! Fixed point of `T(psi)_j = -eps log sum_k s_k exp((psi_k - c_kj)/eps)`,
//! reached through the averaged map `psi <- (psi + T psi)/2`. The plain
//! iteration oscillates between two states; averaging removes the
//! oscillation without moving the fixed point.

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, Domain};

use super::kernel::GibbsKernel;
use super::{sup_diff, SolveStats};

/// Solves for the symmetric potential on an already built self-kernel.
///
/// The residual is `sup |T psi - psi|` and the returned potential is the
/// iterate at which it was measured.
pub fn symmetric_on_kernel(
    kernel: &mut GibbsKernel,
    weights: &[f64],
    tol: f64,
    max_iters: usize,
    init: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = weights.len();
    if kernel.rows() != n || kernel.cols() != n {
        return Err(Error::invalid("symmetric kernel", "must be square over the measure"));
    }
    let eps = kernel.eps();
    let mut psi = match init {
        Some(p) if p.len() == n => p.to_vec(),
        Some(p) => {
            return Err(Error::invalid(
                "symmetric init",
                format!("length {} for {} points", p.len(), n),
            ))
        }
        None => vec![0.0; n],
    };
    let mut t = vec![0.0; n];
    let mut stats = SolveStats::default();
    for _ in 0..max_iters {
        kernel.reduce_over_rows(&psi, weights, &mut t);
        for v in &mut t {
            *v *= -eps;
        }
        let r = sup_diff(&t, &psi);
        stats.push(r);
        if !r.is_finite() {
            return Err(Error::InvalidState("non-finite symmetric potential".into()));
        }
        if r < tol {
            stats.converged = true;
            break;
        }
        for (p, v) in psi.iter_mut().zip(&t) {
            *p = 0.5 * (*p + v);
        }
    }
    Ok((psi, stats))
}

/// Symmetric potential `psi^S` of the particle measure.
pub fn symmetric_sinkhorn(
    sigma: &DiscreteMeasure,
    eps: f64,
    tol: f64,
    max_iters: usize,
    init: Option<&[f64]>,
    domain: &Domain,
) -> Result<(Vec<f64>, SolveStats)> {
    if sigma.is_empty() {
        return Err(Error::invalid("sigma", "empty"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::invalid("tol/max_iters", "must be positive"));
    }
    let mut k = GibbsKernel::between(sigma.points(), sigma.points(), domain, eps);
    if let Some(p) = init {
        if p.len() == sigma.len() {
            k.absorb(p, p);
        }
    }
    symmetric_on_kernel(&mut k, sigma.weights(), tol, max_iters, init)
}
