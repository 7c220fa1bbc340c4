//! Barycentric projections of entropic couplings.
//!
//! For a particle `Y_j` the barycentre of its coupling column is
//! `b_j = Y_j + sum_i w_ij d(Y_j, X_i)` with `d` the displacement to the `x1`
//! images of `X_i` averaged with their Gibbs weights, i.e. `-grad_y` of the
//! image-summed cost. The average never straddles the periodic seam and the
//! gradient of the particle potential is `Y_j - b_j`.

use crate::error::{Error, Result};
use crate::geometry::{entropic_displacement, DiscreteMeasure, Domain, Point2};

use super::kernel::GibbsKernel;
use super::DualPotentials;

/// Barycentres of every column of `kernel` against the row cloud.
///
/// `row_pot` is the potential living on the rows; the column potential only
/// scales each column and cancels in the average.
pub fn column_barycenters(
    kernel: &mut GibbsKernel,
    row_pot: &[f64],
    row_weights: &[f64],
    row_points: &[Point2],
    col_points: &[Point2],
    domain: &Domain,
) -> Result<Vec<Point2>> {
    let eps = kernel.eps();
    let acc = kernel.column_averages::<2>(row_pot, row_weights, |i, j| {
        let d = entropic_displacement(col_points[j], row_points[i], domain, eps);
        [d.x1, d.x2]
    });
    let mut out = Vec::with_capacity(col_points.len());
    for (j, (sum, norm)) in acc.into_iter().enumerate() {
        let y = col_points[j];
        if norm > 1e-280 && norm.is_finite() {
            out.push(y + Point2::new(sum[0] / norm, sum[1] / norm));
            continue;
        }
        let mut d = Point2::ZERO;
        let ok = kernel.for_each_in_column(j, row_pot, row_weights, |i, w| {
            d += entropic_displacement(y, row_points[i], domain, eps) * w;
        });
        if !ok {
            return Err(Error::DegenerateRow(j));
        }
        out.push(y + d);
    }
    Ok(out)
}

/// Barycentric map of the grid/particle coupling: one target per particle.
pub fn barycentric_map(
    pots: &DualPotentials,
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    eps: f64,
    domain: &Domain,
) -> Result<Vec<Point2>> {
    super::check_measures(grid, sigma)?;
    let mut k = GibbsKernel::between(grid.points(), sigma.points(), domain, eps);
    column_barycenters(&mut k, &pots.phi, grid.weights(), grid.points(), sigma.points(), domain)
}

/// Self-coupling barycentres of `sigma` under its symmetric potential.
pub fn symmetric_barycenters(
    psi_sym: &[f64],
    sigma: &DiscreteMeasure,
    eps: f64,
    domain: &Domain,
) -> Result<Vec<Point2>> {
    let mut k = GibbsKernel::between(sigma.points(), sigma.points(), domain, eps);
    column_barycenters(&mut k, psi_sym, sigma.weights(), sigma.points(), sigma.points(), domain)
}

/// `grad(psi - psi^S)` per particle, i.e. `b^S_j - b_j`.
pub fn debiased_gradient(
    pots: &DualPotentials,
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    eps: f64,
    domain: &Domain,
) -> Result<Vec<Point2>> {
    let sym = pots
        .psi_sym
        .as_ref()
        .ok_or_else(|| Error::InvalidState("debiased gradient needs psi_sym".into()))?;
    let b = barycentric_map(pots, grid, sigma, eps, domain)?;
    let bs = symmetric_barycenters(sym, sigma, eps, domain)?;
    Ok(bs.into_iter().zip(b).map(|(s, b)| s - b).collect())
}
