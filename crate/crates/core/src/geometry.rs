//! Periodic channel geometry and the weighted point-cloud data model.
//!
//! The domain is `[0, period) x [x2_min, x2_max]`, periodic in `x1` with
//! rigid walls in `x2`. Walls are never enforced explicitly: particles keep
//! whatever `x2` the dynamics gives them and only `x1` is wrapped.
//!
//! Two cost notions live here. [`periodic_cost`] is the squared periodic
//! distance. [`transport_cost`] is half of it and is the ground cost every
//! transport solver in this crate uses, so that Kantorovich potentials
//! relate to Brenier potentials through `P(x) = |x|^2/2 - phi(x)`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel domain, periodic in `x1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x1_period: f64,
    pub x2_min: f64,
    pub x2_max: f64,
}

impl Default for Domain {
    fn default() -> Self {
        Self {
            x1_period: 1.0,
            x2_min: 0.0,
            x2_max: 1.0,
        }
    }
}

impl Domain {
    pub fn new(x1_period: f64, x2_min: f64, x2_max: f64) -> Result<Self> {
        let d = Self {
            x1_period,
            x2_min,
            x2_max,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1_period.is_finite() && self.x1_period > 0.0) {
            return Err(Error::invalid("x1_period", "must be positive and finite"));
        }
        if !(self.x2_min.is_finite() && self.x2_max.is_finite() && self.x2_min < self.x2_max) {
            return Err(Error::invalid("x2_min/x2_max", "require x2_min < x2_max"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2_max - self.x2_min
    }

    /// Wraps an `x1` difference to the nearest image in `[-period/2, period/2]`.
    #[inline]
    pub fn wrap_delta(&self, d1: f64) -> f64 {
        d1 - self.x1_period * (d1 / self.x1_period).round()
    }

    /// Displacement `to - from` using the `x1` image of `to` nearest to `from`.
    #[inline]
    pub fn displacement(&self, from: Point2, to: Point2) -> Point2 {
        Point2::new(self.wrap_delta(to.x1 - from.x1), to.x2 - from.x2)
    }

    /// Wraps one coordinate into `[0, period)`.
    #[inline]
    pub fn wrap_x1(&self, x1: f64) -> f64 {
        let r = x1.rem_euclid(self.x1_period);
        // rem_euclid returns `period` for tiny negative inputs.
        if r >= self.x1_period {
            0.0
        } else {
            r
        }
    }
}

/// A point in the plane, nondimensional coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x1: f64,
    pub x2: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x1: 0.0, x2: 0.0 };

    #[inline]
    pub const fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.x1 * self.x1 + self.x2 * self.x2
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }

    /// The quarter turn `(a, b) -> (b, -a)`.
    #[inline]
    pub fn rotate_j(self) -> Self {
        Self::new(self.x2, -self.x1)
    }
}

impl Add for Point2 {
    type Output = Point2;
    #[inline]
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x1 + o.x1, self.x2 + o.x2)
    }
}

impl AddAssign for Point2 {
    #[inline]
    fn add_assign(&mut self, o: Point2) {
        self.x1 += o.x1;
        self.x2 += o.x2;
    }
}

impl Sub for Point2 {
    type Output = Point2;
    #[inline]
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x1 - o.x1, self.x2 - o.x2)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    #[inline]
    fn neg(self) -> Point2 {
        Point2::new(-self.x1, -self.x2)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    #[inline]
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x1 * s, self.x2 * s)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x1, self.x2)
    }
}

/// Squared periodic distance: the smallest of the three `x1` images plus `|dx2|^2`.
#[inline]
pub fn periodic_cost(x: Point2, y: Point2, domain: &Domain) -> f64 {
    let p = domain.x1_period;
    let d1 = x.x1 - y.x1;
    let a = d1 * d1;
    let b = (d1 + p) * (d1 + p);
    let c = (d1 - p) * (d1 - p);
    let d2 = x.x2 - y.x2;
    a.min(b).min(c) + d2 * d2
}

/// Ground cost of the transport problems: `periodic_cost / 2`.
#[inline]
pub fn transport_cost(x: Point2, y: Point2, domain: &Domain) -> f64 {
    0.5 * periodic_cost(x, y, domain)
}

/// Images `k` with `|k| <= image_reach` carry all weight above `e^-40` at `eps`.
pub fn image_reach(domain: &Domain, eps: f64) -> i32 {
    let p2 = domain.x1_period * domain.x1_period;
    let mut k = 1;
    while ((k * (k + 1)) as f64) * p2 <= 80.0 * eps {
        k += 1;
    }
    k
}

/// Log of the image sum relative to zero separation, and the image-averaged
/// `x1` offset, for a nearest-image difference `d1`.
#[inline]
fn image_sum(d1: f64, domain: &Domain, eps: f64) -> (f64, f64) {
    let p = domain.x1_period;
    let reach = image_reach(domain, eps);
    let (mut z, mut z0, mut m) = (0.0, 0.0, 0.0);
    for k in -reach..=reach {
        let s = k as f64 * p;
        let e = d1 + s;
        let w = (-(e * e - d1 * d1) / (2.0 * eps)).exp();
        z += w;
        m += w * e;
        z0 += (-s * s / (2.0 * eps)).exp();
    }
    (z.ln() - z0.ln(), m / z)
}

/// Transport cost of the solvers, with the Gibbs weights of all `x1` images summed:
/// `-eps log (sum_k exp(-|x - y + k period e1|^2 / (2 eps)) / sum_k exp(-|k period|^2 / (2 eps)))`.
///
/// Smooth across the half-period seam, zero on the diagonal, nonnegative,
/// and within `O(eps exp(-period (period - 2|dx1|) / (2 eps)))` of [`transport_cost`].
#[inline]
pub fn entropic_cost(x: Point2, y: Point2, domain: &Domain, eps: f64) -> f64 {
    let d = domain.displacement(x, y);
    let (lz, _) = image_sum(d.x1, domain, eps);
    0.5 * (d.x1 * d.x1 + d.x2 * d.x2) - eps * lz
}

/// `to - from` averaged over the `x1` images of `to` with their Gibbs weights.
#[inline]
pub fn entropic_displacement(from: Point2, to: Point2, domain: &Domain, eps: f64) -> Point2 {
    let d = domain.displacement(from, to);
    let (_, m) = image_sum(d.x1, domain, eps);
    Point2::new(m, d.x2)
}

/// Shifts every `x1` into `[0, period)`; `x2` is left untouched.
pub fn remap_periodic(points: &[Point2], domain: &Domain) -> Vec<Point2> {
    points
        .iter()
        .map(|p| Point2::new(domain.wrap_x1(p.x1), p.x2))
        .collect()
}

/// Weighted point cloud `sum_i w_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    points: Vec<Point2>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Point2>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::invalid(
                "weights",
                format!("{} weights for {} points", weights.len(), points.len()),
            ));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "weights",
                format!("weight {i} is {} (must be finite and >= 0)", weights[i]),
            ));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid("points", format!("point {i} is not finite")));
        }
        Ok(Self { points, weights })
    }

    /// Equal weights `mass / n`.
    pub fn uniform(points: Vec<Point2>, mass: f64) -> Result<Self> {
        let n = points.len();
        let w = if n == 0 { 0.0 } else { mass / n as f64 };
        Self::new(points, vec![w; n])
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    /// Same weights at new positions.
    pub fn with_points(&self, points: Vec<Point2>) -> Result<Self> {
        Self::new(points, self.weights.clone())
    }

    /// Scales weights so the total mass equals `mass`.
    pub fn normalized_to(&self, mass: f64) -> Self {
        let m = self.total_mass();
        let s = if m > 0.0 { mass / m } else { 0.0 };
        Self {
            points: self.points.clone(),
            weights: self.weights.iter().map(|w| w * s).collect(),
        }
    }

    /// Drops zero-weight atoms, logging how many were removed.
    pub fn without_zero_weights(self) -> Self {
        let keep = self.weights.iter().filter(|w| **w > 0.0).count();
        if keep == self.len() {
            return self;
        }
        log::warn!(
            "dropping {} zero-weight atoms from a measure of {}",
            self.len() - keep,
            self.len()
        );
        let (points, weights) = self
            .points
            .into_iter()
            .zip(self.weights)
            .filter(|(_, w)| *w > 0.0)
            .unzip();
        Self { points, weights }
    }

    pub fn remapped(&self, domain: &Domain) -> Self {
        Self {
            points: remap_periodic(&self.points, domain),
            weights: self.weights.clone(),
        }
    }

    /// Writes `x1 x2 weight` rows, one atom per line, full round-trip precision.
    pub fn write_columns<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# x1 x2 weight")?;
        for (p, w) in self.points.iter().zip(&self.weights) {
            writeln!(out, "{:e} {:e} {:e}", p.x1, p.x2, w)?;
        }
        Ok(())
    }

    /// Reads the format produced by [`write_columns`](Self::write_columns).
    pub fn read_columns<R: BufRead>(input: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() < 3 {
                return Err(Error::Parse(format!(
                    "line {}: expected 3 columns, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push(Point2::new(vals[0], vals[1]));
            weights.push(vals[2]);
        }
        Self::new(points, weights)
    }
}

pub fn total_mass(m: &DiscreteMeasure) -> f64 {
    m.weights.iter().sum()
}

/// Regular cell-centred Cartesian grid over a [`Domain`].
///
/// Node `k = j * n1 + i` sits at `((i + 1/2) dx1, x2_min + (j + 1/2) dx2)`,
/// so rows of constant `x2` are contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n1: usize,
    pub n2: usize,
    pub domain: Domain,
}

impl Grid {
    pub fn new(n1: usize, n2: usize, domain: Domain) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::invalid("grid", "n1 and n2 must be positive"));
        }
        domain.validate()?;
        Ok(Self { n1, n2, domain })
    }

    /// Square `n x n` grid on the unit channel.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, Domain::default())
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> (f64, f64) {
        (
            self.domain.x1_period / self.n1 as f64,
            self.domain.width() / self.n2 as f64,
        )
    }

    pub fn node(&self, k: usize) -> Point2 {
        let (dx1, dx2) = self.spacing();
        let i = k % self.n1;
        let j = k / self.n1;
        Point2::new(
            (i as f64 + 0.5) * dx1,
            self.domain.x2_min + (j as f64 + 0.5) * dx2,
        )
    }

    pub fn nodes(&self) -> Vec<Point2> {
        (0..self.len()).map(|k| self.node(k)).collect()
    }

    /// Lebesgue measure discretised as `(1/N) sum_k delta_{X_k}` scaled by the domain area.
    pub fn measure(&self) -> DiscreteMeasure {
        let area = self.domain.x1_period * self.domain.width();
        DiscreteMeasure::uniform(self.nodes(), area).expect("grid nodes are finite")
    }
}

/// Scalar field sampled on grid nodes, in node order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridField {
    values: Vec<f64>,
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Checks finiteness and that the field matches `grid`.
    pub fn on_grid(values: Vec<f64>, grid: &Grid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "grid field",
                format!("{} values for {} nodes", values.len(), grid.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid field", "non-finite value"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean over nodes.
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dom() -> Domain {
        Domain::default()
    }

    #[test]
    fn entropic_cost_is_smooth_across_the_seam() {
        let d = dom();
        let x = Point2::new(0.1, 0.3);
        let eps = 0.04;
        let c = |y1: f64| entropic_cost(x, Point2::new(y1, 0.5), &d, eps);
        // the nearest image switches at y1 = 0.6
        for y1 in [0.3, 0.6 - 1e-9, 0.6, 0.6 + 1e-9, 0.85] {
            let h = 1e-5;
            let fd = (c(y1 + h) - c(y1 - h)) / (2.0 * h);
            let g = entropic_displacement(x, Point2::new(y1, 0.5), &d, eps);
            assert!((fd - g.x1).abs() < 1e-8, "{y1}: {fd} vs {}", g.x1);
        }
        assert!(entropic_displacement(x, Point2::new(0.6, 0.5), &d, eps).x1.abs() < 1e-15);
    }

    #[test]
    fn entropic_cost_reach_covers_wide_kernels() {
        assert_eq!(image_reach(&dom(), 0.01), 1);
        assert!(image_reach(&dom(), 0.5) >= 6);
    }

    proptest! {
        #[test]
        fn entropic_cost_is_a_smoothed_transport_cost(
            a in (0.0f64..1.0, 0.0f64..1.0),
            b in (0.0f64..1.0, 0.0f64..1.0),
            eps in 0.005f64..0.5,
        ) {
            let d = dom();
            let (x, y) = (Point2::new(a.0, a.1), Point2::new(b.0, b.1));
            let c = entropic_cost(x, y, &d, eps);
            prop_assert!(c >= 0.0);
            prop_assert!((c - entropic_cost(y, x, &d, eps)).abs() < 1e-15);
            prop_assert!(entropic_cost(x, x, &d, eps).abs() < 1e-15);
            let gap = (c - transport_cost(x, y, &d)).abs();
            let dx1 = d.displacement(x, y).x1.abs();
            let bound = 3.0 * eps * (-(1.0 - 2.0 * dx1) / (2.0 * eps)).exp();
            prop_assert!(gap <= bound + 1e-15, "{gap} > {bound}");
        }
    }

    #[test]
    fn cost_examples() {
        let d = dom();
        assert_abs_diff_eq!(
            periodic_cost(Point2::new(0.9, 0.5), Point2::new(0.1, 0.5), &d),
            0.04,
            epsilon = 1e-15
        );
        assert_eq!(
            periodic_cost(Point2::new(0.3, 0.7), Point2::new(0.3, 0.7), &d),
            0.0
        );
        assert_abs_diff_eq!(
            periodic_cost(Point2::new(0.2, 0.1), Point2::new(0.4, 0.7), &d),
            0.40,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            transport_cost(Point2::new(0.9, 0.5), Point2::new(0.1, 0.5), &d),
            0.02,
            epsilon = 1e-15
        );
    }

    #[test]
    fn remap_examples() {
        let d = dom();
        let out = remap_periodic(
            &[
                Point2::new(1.3, 0.5),
                Point2::new(-0.1, 0.2),
                Point2::new(0.5, 0.5),
                Point2::new(-1e-18, 0.5),
            ],
            &d,
        );
        assert_abs_diff_eq!(out[0].x1, 0.3, epsilon = 1e-15);
        assert_eq!(out[0].x2, 0.5);
        assert_abs_diff_eq!(out[1].x1, 0.9, epsilon = 1e-15);
        assert_eq!(out[1].x2, 0.2);
        assert_eq!(out[2], Point2::new(0.5, 0.5));
        assert!(out[3].x1 >= 0.0 && out[3].x1 < 1.0);
    }

    #[test]
    fn mass_examples() {
        let g = Grid::unit_square(8).unwrap();
        assert_abs_diff_eq!(g.measure().total_mass(), 1.0, epsilon = 1e-14);
        assert_eq!(DiscreteMeasure::empty().total_mass(), 0.0);
        let m = DiscreteMeasure::new(vec![Point2::ZERO, Point2::ZERO], vec![0.2, 0.3]).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn measure_rejects_bad_input() {
        assert!(DiscreteMeasure::new(vec![Point2::ZERO], vec![]).is_err());
        assert!(DiscreteMeasure::new(vec![Point2::ZERO], vec![-1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![Point2::new(f64::NAN, 0.0)], vec![1.0]).is_err());
        assert!(Domain::new(1.0, 1.0, 0.0).is_err());
        assert!(Domain::new(0.0, 0.0, 1.0).is_err());
        assert!(Grid::new(0, 3, Domain::default()).is_err());
    }

    #[test]
    fn zero_weights_are_dropped() {
        let m = DiscreteMeasure::new(
            vec![Point2::ZERO, Point2::new(0.5, 0.5), Point2::new(0.1, 0.1)],
            vec![0.5, 0.0, 0.5],
        )
        .unwrap()
        .without_zero_weights();
        assert_eq!(m.len(), 2);
        assert_eq!(m.points()[1], Point2::new(0.1, 0.1));
    }

    #[test]
    fn grid_nodes_are_cell_centred() {
        let g = Grid::new(4, 2, Domain::default()).unwrap();
        assert_eq!(g.node(0), Point2::new(0.125, 0.25));
        assert_eq!(g.node(5), Point2::new(0.375, 0.75));
        for p in g.nodes() {
            assert!(p.x1 > 0.0 && p.x1 < 1.0 && p.x2 > 0.0 && p.x2 < 1.0);
        }
    }

    #[test]
    fn columns_round_trip() {
        let m = DiscreteMeasure::new(
            vec![Point2::new(0.1, 1.0 / 3.0), Point2::new(0.7, 0.25)],
            vec![std::f64::consts::PI / 10.0, 0.2],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_columns(&mut buf).unwrap();
        let back = DiscreteMeasure::read_columns(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rotate_j_matches_matrix() {
        assert_eq!(Point2::new(1.0, 0.0).rotate_j(), Point2::new(0.0, -1.0));
    }

    fn pt() -> impl Strategy<Value = Point2> {
        (-2.0..3.0f64, 0.0..1.0f64).prop_map(|(a, b)| Point2::new(a, b))
    }

    proptest! {
        #[test]
        fn cost_is_symmetric(x in pt(), y in pt()) {
            let d = dom();
            prop_assert_eq!(periodic_cost(x, y, &d), periodic_cost(y, x, &d));
        }

        #[test]
        fn cost_is_translation_invariant(a in 0.0..1.0f64, b in 0.0..1.0f64, x2 in 0.0..1.0f64, y2 in 0.0..1.0f64, s in -3.0..3.0f64) {
            let d = Domain::default();
            let (x, y) = (Point2::new(a, x2), Point2::new(b, y2));
            let xs = Point2::new(d.wrap_x1(a + s), x2);
            let ys = Point2::new(d.wrap_x1(b + s), y2);
            prop_assert!((periodic_cost(xs, ys, &d) - periodic_cost(x, y, &d)).abs() < 1e-12);
        }

        #[test]
        fn remap_is_idempotent(pts in proptest::collection::vec(pt(), 0..20)) {
            let d = dom();
            let once = remap_periodic(&pts, &d);
            let twice = remap_periodic(&once, &d);
            prop_assert_eq!(once.clone(), twice);
            for p in &once {
                prop_assert!(p.x1 >= 0.0 && p.x1 < 1.0);
            }
        }
    }
}
