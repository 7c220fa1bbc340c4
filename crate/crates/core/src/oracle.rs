//! Independent reference solvers for small instances.
//!
//! These share no code with the production solvers beyond the cost function:
//! dense matrices, plain exponentials, Newton steps and bisection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{entropic_cost, transport_cost, DiscreteMeasure, Domain};
use crate::ot::PhysicalParams;

/// Cost matrix; `eps` selects the image-summed cost of the regularised problems.
fn cost_matrix(grid: &DiscreteMeasure, sigma: &DiscreteMeasure, domain: &Domain, eps: Option<f64>) -> Vec<Vec<f64>> {
    let cost = |x, y| match eps {
        Some(e) => entropic_cost(x, y, domain, e),
        None => transport_cost(x, y, domain),
    };
    grid.points()
        .iter()
        .map(|x| sigma.points().iter().map(|y| cost(*x, *y)).collect())
        .collect()
}

/// Regularised dual `sum s psi - 1/(2 gamma) sum mu phi^2 - eps sum mu s (exp((phi + psi - c)/eps) - 1)`.
fn regularised_dual(c: &[Vec<f64>], mu: &[f64], s: &[f64], gamma: f64, eps: f64, phi: &[f64], psi: &[f64]) -> f64 {
    let mut v: f64 = s.iter().zip(psi).map(|(s, p)| s * p).sum();
    for i in 0..mu.len() {
        v -= mu[i] * phi[i] * phi[i] / (2.0 * gamma);
        for j in 0..s.len() {
            v -= eps * mu[i] * s[j] * (((phi[i] + psi[j] - c[i][j]) / eps).exp() - 1.0);
        }
    }
    v
}

/// Maximiser of the regularised height-coupled dual by damped Newton ascent
/// on dense matrices. Returns `(phi, psi)` once the weighted gradient is below `tol`.
pub fn dense_dual_ascent(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    tol: f64,
    domain: &Domain,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (grid.len(), sigma.len());
    let c = cost_matrix(grid, sigma, domain, Some(eps));
    let (mu, s) = (grid.weights(), sigma.weights());
    let gamma = params.gamma();
    let mut x = DVector::<f64>::zeros(n + m);
    for _ in 0..500 {
        let (phi, psi) = (x.rows(0, n), x.rows(n, m));
        let e: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..m).map(|j| ((phi[i] + psi[j] - c[i][j]) / eps).exp()).collect())
            .collect();
        let mut g = DVector::<f64>::zeros(n + m);
        let mut h = DMatrix::<f64>::zeros(n + m, n + m);
        for i in 0..n {
            let row: f64 = (0..m).map(|j| s[j] * e[i][j]).sum();
            g[i] = -mu[i] * phi[i] / gamma - mu[i] * row;
            h[(i, i)] = mu[i] / gamma + mu[i] * row / eps;
            for j in 0..m {
                let v = mu[i] * s[j] * e[i][j] / eps;
                h[(i, n + j)] = v;
                h[(n + j, i)] = v;
            }
        }
        for j in 0..m {
            let col: f64 = (0..n).map(|i| mu[i] * e[i][j]).sum();
            g[n + j] = s[j] * (1.0 - col);
            h[(n + j, n + j)] = s[j] * col / eps;
        }
        let scaled = (0..n)
            .map(|i| (g[i] / mu[i]).abs())
            .chain((0..m).map(|j| (g[n + j] / s[j]).abs()))
            .fold(0.0, f64::max);
        if scaled < tol {
            return Ok((x.rows(0, n).iter().copied().collect(), x.rows(n, m).iter().copied().collect()));
        }
        // h is minus the Hessian, positive definite
        let dir = h
            .cholesky()
            .ok_or_else(|| Error::InvalidState("dense dual Hessian not definite".into()))?
            .solve(&g);
        let f0 = regularised_dual(&c, mu, s, gamma, eps, phi.as_slice(), psi.as_slice());
        let slope = g.dot(&dir);
        let mut t = 1.0;
        loop {
            let y = &x + &dir * t;
            let f = regularised_dual(&c, mu, s, gamma, eps, &y.as_slice()[..n], &y.as_slice()[n..]);
            if f.is_finite() && f >= f0 + 1e-4 * t * slope - 1e-15 * f0.abs() {
                x = y;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(Error::InvalidState("dense dual line search stalled".into()));
            }
        }
    }
    Err(Error::NotConverged {
        solver: "dense dual oracle".into(),
        iterations: 500,
        residual: f64::NAN,
        context: String::new(),
    })
}

/// Bracket on the unregularised dual optimum `max sum s psi - 1/(2 gamma) sum mu phi^2`
/// subject to `phi_i + psi_j <= c_ij`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualBracket {
    pub lower: f64,
    pub upper: f64,
}

fn project_simplex(v: &mut [f64], mass: f64) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - mass) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Brackets the unregularised dual optimum through its primal
/// `min sum c pi + gamma/2 sum_i (sum_j pi_ij)^2 / mu_i` over couplings with
/// column sums `s`, solved by accelerated projected gradient.
///
/// The primal value at the iterate is an upper bound; the dual value at
/// `phi = -gamma h`, `psi_j = min_i (c_ij - phi_i)` is a lower bound.
/// `cost_eps` selects the image-summed cost of the solvers at that `eps`;
/// `None` uses [`transport_cost`].
pub fn unregularised_dual_bracket(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    cost_eps: Option<f64>,
    iters: usize,
    domain: &Domain,
) -> DualBracket {
    let (n, m) = (grid.len(), sigma.len());
    let c = cost_matrix(grid, sigma, domain, cost_eps);
    let (mu, s) = (grid.weights(), sigma.weights());
    let gamma = params.gamma();
    let mu_min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let step = mu_min / (gamma * m as f64);
    let mut pi = vec![vec![0.0; m]; n];
    for j in 0..m {
        for row in pi.iter_mut() {
            row[j] = s[j] / n as f64;
        }
    }
    let mut prev = pi.clone();
    let mut tk = 1.0f64;
    let row_sums = |p: &[Vec<f64>]| -> Vec<f64> { p.iter().map(|r| r.iter().sum()).collect() };
    for _ in 0..iters {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let beta = (tk - 1.0) / t_next;
        let y: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..m).map(|j| pi[i][j] + beta * (pi[i][j] - prev[i][j])).collect())
            .collect();
        let r = row_sums(&y);
        let mut next = y.clone();
        for j in 0..m {
            let mut col: Vec<f64> = (0..n)
                .map(|i| y[i][j] - step * (c[i][j] + gamma * r[i] / mu[i]))
                .collect();
            project_simplex(&mut col, s[j]);
            for i in 0..n {
                next[i][j] = col[i];
            }
        }
        prev = std::mem::replace(&mut pi, next);
        tk = t_next;
    }
    let r = row_sums(&pi);
    let upper: f64 = (0..n)
        .map(|i| (0..m).map(|j| c[i][j] * pi[i][j]).sum::<f64>() + 0.5 * gamma * r[i] * r[i] / mu[i])
        .sum();
    let phi: Vec<f64> = (0..n).map(|i| -gamma * r[i] / mu[i]).collect();
    let psi: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| c[i][j] - phi[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let lower = s.iter().zip(&psi).map(|(s, p)| s * p).sum::<f64>()
        - (0..n).map(|i| mu[i] * phi[i] * phi[i]).sum::<f64>() / (2.0 * gamma);
    DualBracket { lower, upper }
}

/// Value of the regularised dual at given potentials.
pub fn regularised_dual_value(
    grid: &DiscreteMeasure,
    sigma: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    phi: &[f64],
    psi: &[f64],
    domain: &Domain,
) -> f64 {
    let c = cost_matrix(grid, sigma, domain, Some(eps));
    regularised_dual(&c, grid.weights(), sigma.weights(), params.gamma(), eps, phi, psi)
}

/// Principal-branch Lambert W by bisection of `w exp(w) = z` on `[-1, max(1, ln z)]`.
pub fn lambert_w0_bisect(z: f64) -> f64 {
    assert!(z >= -(-1.0f64).exp(), "z below the branch point");
    if z == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0, 1.0f64.max(z.ln_1p()));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid.exp() < z {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use crate::ot::{solve_swsg_dual, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut ChaCha8Rng, n: usize) -> DiscreteMeasure {
        let pts = (0..n).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let w = (0..n).map(|_| rng.gen_range(0.5..1.5) / n as f64).collect();
        DiscreteMeasure::new(pts, w).unwrap()
    }

    #[test]
    fn bisection_matches_known_values() {
        assert!((lambert_w0_bisect(1.0) - 0.567_143_290_409_783_8).abs() < 1e-15);
        assert!((lambert_w0_bisect(std::f64::consts::E) - 1.0).abs() < 1e-15);
        assert_eq!(lambert_w0_bisect(0.0), 0.0);
    }

    #[test]
    fn newton_oracle_agrees_with_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Domain::default();
        let p = PhysicalParams::default();
        let g = random_measure(&mut rng, 5);
        let s = random_measure(&mut rng, 4);
        let (phi, psi) = dense_dual_ascent(&g, &s, &p, 0.1, 1e-13, &d).unwrap();
        let cfg = SolverConfig::new(0.1, 1e-13, 100_000).unwrap();
        let (pots, _) = solve_swsg_dual(&g, &s, &p, &cfg, None, &d).unwrap();
        for (a, b) in phi.iter().zip(&pots.phi).chain(psi.iter().zip(&pots.psi)) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn bracket_is_tight_and_below_the_regularised_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Domain::default();
        let p = PhysicalParams::default();
        let g = random_measure(&mut rng, 6);
        let s = random_measure(&mut rng, 5);
        let b = unregularised_dual_bracket(&g, &s, &p, Some(0.05), 20_000, &d);
        assert!(b.lower <= b.upper + 1e-12);
        assert!(b.upper - b.lower < 1e-8, "{b:?}");
        let (phi, psi) = dense_dual_ascent(&g, &s, &p, 0.05, 1e-13, &d).unwrap();
        assert!(regularised_dual_value(&g, &s, &p, 0.05, &phi, &psi, &d) >= b.upper);
    }

    #[test]
    fn central_difference_of_a_cubic() {
        let d = central_difference(|x| x * x * x, 2.0, 1e-4);
        assert!((d - 12.0).abs() < 1e-7);
    }
}
