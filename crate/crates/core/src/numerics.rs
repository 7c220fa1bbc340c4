//! Scalar special functions and stabilised reductions.
//!
//! Reductions sum left to right over their input order; no pairwise or
//! parallel reordering is done, so results are bitwise reproducible.

use std::f64::consts::E;

use crate::error::{Error, Result};
use crate::geometry::{entropic_cost, DiscreteMeasure, Domain, Point2};

/// `-1/e`, the branch point of the Lambert function.
pub const BRANCH_POINT: f64 = -1.0 / E;

const HALLEY_MAX_ITERS: usize = 64;

/// Principal branch `W0` of the Lambert function: the `w >= -1` with `w e^w = z`.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() || z < BRANCH_POINT {
        return Err(Error::Domain(format!("lambert_w0 undefined at z = {z}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    if z == BRANCH_POINT {
        return Ok(-1.0);
    }
    if z > E {
        return Ok(w0_from_log(z.ln()));
    }

    let mut w = if z < -0.32 {
        // series about the branch point
        let p = (2.0 * (E * z + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        z.ln_1p()
    };

    for _ in 0..HALLEY_MAX_ITERS {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let step = f / denom;
        let next = (w - step).max(-1.0);
        let done = (next - w).abs() <= 2.0 * f64::EPSILON * next.abs().max(f64::MIN_POSITIVE);
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

/// `W0(e^log_z)` without forming `e^log_z`, so arbitrarily large arguments are safe.
pub fn lambert_w0_exp(log_z: f64) -> f64 {
    if log_z.is_nan() {
        return f64::NAN;
    }
    if log_z == f64::NEG_INFINITY {
        return 0.0;
    }
    if log_z <= 1.0 {
        // z = e^log_z is in (0, e]: always inside the domain
        return lambert_w0(log_z.exp()).unwrap_or(0.0);
    }
    w0_from_log(log_z)
}

/// Solves `w + ln w = l` for `l > 1` by Halley iteration.
fn w0_from_log(l: f64) -> f64 {
    if l == f64::INFINITY {
        return f64::INFINITY;
    }
    let ll = l.ln();
    let mut w = (l - ll + ll / l).max(0.5);
    for _ in 0..HALLEY_MAX_ITERS {
        let g = w + w.ln() - l;
        let gp = 1.0 + 1.0 / w;
        let gpp = -1.0 / (w * w);
        let denom = 2.0 * gp * gp - g * gpp;
        let next = w - 2.0 * g * gp / denom;
        let done = (next - w).abs() <= 2.0 * f64::EPSILON * next.abs();
        w = next;
        if done {
            break;
        }
    }
    w
}

/// Extended-real log weights; `-inf` encodes zero mass, `+inf` and NaN are rejected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogWeightVector(Vec<f64>);

impl LogWeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::invalid(
                "log weights",
                format!("entry {i} is {}", values[i]),
            ));
        }
        Ok(Self(values))
    }

    /// Logarithms of nonnegative masses.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        Self::new(masses.iter().map(|m| m.ln()).collect())
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-subtracted `log sum_i exp(x_i)`, exactly `-inf` when every term vanishes.
pub fn logsumexp<I>(terms: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = terms.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = terms.into_iter().map(|t| (t - max).exp()).sum();
    max + s.ln()
}

/// `log sum_i exp(logs_i + log_weights_i)`.
pub fn logsumexp_weighted(logs: &LogWeightVector, log_weights: &LogWeightVector) -> Result<f64> {
    if logs.len() != log_weights.len() {
        return Err(Error::invalid(
            "log_weights",
            format!("length {} vs {}", log_weights.len(), logs.len()),
        ));
    }
    Ok(logsumexp(
        logs.0.iter().zip(&log_weights.0).map(|(a, b)| a + b),
    ))
}

/// `log sum_i w_i exp(p_i - c(X_i, target)/eps)` where `p = potentials / eps`
/// and `c` is [`entropic_cost`].
///
/// This is the logarithm of the heat-kernel integral of `e^{phi/eps}` against
/// `sources`, evaluated entirely in log space.
pub fn kernel_logsumexp(
    target: Point2,
    sources: &DiscreteMeasure,
    potentials_over_eps: &LogWeightVector,
    eps: f64,
    domain: &Domain,
) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::invalid("sources", "empty measure"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    if potentials_over_eps.len() != sources.len() {
        return Err(Error::invalid(
            "potentials",
            format!("length {} vs {}", potentials_over_eps.len(), sources.len()),
        ));
    }
    let terms = sources
        .points()
        .iter()
        .zip(sources.weights())
        .zip(potentials_over_eps.values())
        .map(|((x, w), p)| p - entropic_cost(*x, target, domain, eps) / eps + w.ln());
    Ok(logsumexp(terms.collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Bisection oracle on `w e^w - z`, independent of the Halley path.
    fn w0_bisect(z: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0f64, z.max(1.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() > z {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn lambert_examples() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert_relative_eq!(lambert_w0(E).unwrap(), 1.0, max_relative = 1e-15);
        assert_relative_eq!(
            lambert_w0(1.0).unwrap(),
            0.5671432904097838,
            max_relative = 1e-15
        );
        assert_relative_eq!(w0_bisect(1.0), 0.5671432904097838, max_relative = 1e-15);
        assert_eq!(lambert_w0(BRANCH_POINT).unwrap(), -1.0);
    }

    #[test]
    fn lambert_rejects_below_branch_point() {
        assert!(matches!(lambert_w0(-0.5), Err(Error::Domain(_))));
        assert!(lambert_w0(f64::NAN).is_err());
    }

    #[test]
    fn lambert_matches_bisection_over_decades() {
        for k in -30..=300 {
            let z = 10f64.powf(k as f64 / 10.0);
            let w = lambert_w0(z).unwrap();
            assert_relative_eq!(w, w0_bisect(z), max_relative = 1e-13);
        }
        for k in 1..100 {
            let z = BRANCH_POINT * k as f64 / 100.0;
            let w = lambert_w0(z).unwrap();
            assert!((w * w.exp() - z).abs() <= 1e-15, "z={z} w={w}");
        }
    }

    #[test]
    fn lambert_log_form_handles_huge_arguments() {
        // log z = 800 would overflow exp
        let w = lambert_w0_exp(800.0);
        assert_relative_eq!(w + w.ln(), 800.0, max_relative = 1e-15);
        for l in [-50.0, -1.0, 0.0, 0.5, 1.0, 1.5, 10.0, 700.0] {
            let a = lambert_w0_exp(l);
            let b = lambert_w0(f64::exp(l)).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
        assert_eq!(lambert_w0_exp(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn logsumexp_examples() {
        let h = 0.5f64.ln();
        let a = LogWeightVector::new(vec![0.0, 0.0]).unwrap();
        let b = LogWeightVector::new(vec![h, h]).unwrap();
        assert!(logsumexp_weighted(&a, &b).unwrap().abs() < 1e-15);

        let a = LogWeightVector::new(vec![3.7]).unwrap();
        let b = LogWeightVector::zeros(1);
        assert_eq!(logsumexp_weighted(&a, &b).unwrap(), 3.7);

        let a = LogWeightVector::zeros(3);
        let b = LogWeightVector::zeros(3);
        assert_relative_eq!(
            logsumexp_weighted(&a, &b).unwrap(),
            3f64.ln(),
            max_relative = 1e-15
        );

        let a = LogWeightVector::new(vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(
            logsumexp_weighted(&a, &LogWeightVector::zeros(2)).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(logsumexp_weighted(&a, &LogWeightVector::zeros(3)).is_err());
        assert!(LogWeightVector::new(vec![f64::INFINITY]).is_err());
        assert!(LogWeightVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn kernel_logsumexp_examples() {
        let d = Domain::default();
        let t = Point2::new(0.3, 0.4);
        let one = DiscreteMeasure::new(vec![t], vec![1.0]).unwrap();
        let z = LogWeightVector::zeros(1);
        assert_eq!(kernel_logsumexp(t, &one, &z, 0.1, &d).unwrap(), 0.0);

        // transport cost 0.04 at eps = 0.04 gives exactly -1
        let s = Point2::new(0.3, 0.4 + 0.08f64.sqrt());
        let src = DiscreteMeasure::new(vec![s], vec![1.0]).unwrap();
        assert_relative_eq!(
            kernel_logsumexp(t, &src, &z, 0.04, &d).unwrap(),
            -1.0,
            max_relative = 1e-14
        );

        // two equidistant sources with half mass each
        let a = Point2::new(0.1, 0.4);
        let b = Point2::new(0.5, 0.4);
        let c = entropic_cost(a, t, &d, 0.05);
        let two = DiscreteMeasure::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(
            kernel_logsumexp(t, &two, &LogWeightVector::zeros(2), 0.05, &d).unwrap(),
            -c / 0.05,
            max_relative = 1e-14
        );
    }

    proptest! {
        #[test]
        fn lambert_inverts_w_exp_w(w in -1.0..20.0f64) {
            let z = w * w.exp();
            let got = lambert_w0(z).unwrap();
            // residual form holds everywhere; near w = -1 the inverse is
            // ill-conditioned (dw/dz is unbounded) so compare in z there.
            prop_assert!((got * got.exp() - z).abs() <= 1e-14 * z.abs().max(1e-3));
            if w > -0.9 {
                prop_assert!((got - w).abs() <= 1e-12 * w.abs().max(1.0));
            }
        }

        #[test]
        fn lambert_is_monotone(a in -0.36..50.0f64, b in -0.36..50.0f64) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lambert_w0(lo).unwrap() <= lambert_w0(hi).unwrap());
        }

        #[test]
        fn logsumexp_is_permutation_invariant(
            v in proptest::collection::vec((-50.0..50.0f64, -5.0..0.0f64), 1..30),
            seed in 0usize..1000,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..a.len()).collect();
            idx.rotate_left(seed % a.len());
            idx.reverse();
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let x = logsumexp_weighted(&LogWeightVector::new(a).unwrap(), &LogWeightVector::new(b).unwrap()).unwrap();
            let y = logsumexp_weighted(&LogWeightVector::new(pa).unwrap(), &LogWeightVector::new(pb).unwrap()).unwrap();
            prop_assert!((x - y).abs() <= 1e-13 * x.abs().max(1.0));
        }

        #[test]
        fn kernel_logsumexp_is_log_linear(
            pts in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.1..1.0f64, -2.0..2.0f64), 1..12),
            s in -3.0..3.0f64,
            eps in 0.01..0.5f64,
        ) {
            let d = Domain::default();
            let points = pts.iter().map(|p| Point2::new(p.0, p.1)).collect();
            let weights = pts.iter().map(|p| p.2).collect();
            let m = DiscreteMeasure::new(points, weights).unwrap();
            let pot: Vec<f64> = pts.iter().map(|p| p.3).collect();
            let shifted: Vec<f64> = pot.iter().map(|p| p + s / eps).collect();
            let t = Point2::new(0.42, 0.58);
            let a = kernel_logsumexp(t, &m, &LogWeightVector::new(pot).unwrap(), eps, &d).unwrap();
            let b = kernel_logsumexp(t, &m, &LogWeightVector::new(shifted).unwrap(), eps, &d).unwrap();
            prop_assert!((b - (a + s / eps)).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
