//! Initial data: jet and perturbed-jet heights and their Hoskins images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, Domain, Grid, Point2};
use crate::ot::PhysicalParams;

/// `h0 = a tanh(b (x2 - c)) + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JetParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl JetParams {
    /// Steep jet `(0.1, 10, 0.5, 1)`.
    pub const STEEP: JetParams = JetParams {
        a: 0.1,
        b: 10.0,
        c: 0.5,
        d: 1.0,
    };

    /// Shallow jet, `b = 5`.
    pub const SHALLOW: JetParams = JetParams {
        a: 0.1,
        b: 5.0,
        c: 0.5,
        d: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.c, self.d].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("jet", "parameters must be finite"));
        }
        if self.d - self.a.abs() <= 0.0 {
            return Err(Error::invalid("jet", "d - |a| must be positive"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian bump `alpha/(2 pi s^2) exp(-|x - m|^2 / (2 s^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma0: f64,
    pub alpha: f64,
}

impl Default for BumpParams {
    fn default() -> Self {
        Self {
            mu1: 0.5,
            mu2: 0.3,
            sigma0: 0.1,
            alpha: 0.001,
        }
    }
}

impl BumpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::invalid("sigma0", "must be positive"));
        }
        if ![self.mu1, self.mu2, self.alpha].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("bump", "parameters must be finite"));
        }
        Ok(())
    }
}

/// Height and its gradient.
pub type HeightSample = (f64, Point2);

pub fn jet_height(p: Point2, jet: &JetParams) -> HeightSample {
    let th = (jet.b * (p.x2 - jet.c)).tanh();
    let sech2 = 1.0 - th * th;
    (jet.a * th + jet.d, Point2::new(0.0, jet.a * jet.b * sech2))
}

/// Jet plus bump; the bump uses the nearest periodic image in `x1`.
pub fn perturbed_height(p: Point2, jet: &JetParams, bump: &BumpParams, domain: &Domain) -> HeightSample {
    let (h, g) = jet_height(p, jet);
    let dx = domain.wrap_delta(p.x1 - bump.mu1);
    let dy = p.x2 - bump.mu2;
    let s2 = bump.sigma0 * bump.sigma0;
    let amp = bump.alpha / (2.0 * std::f64::consts::PI * s2);
    let e = amp * (-(dx * dx + dy * dy) / (2.0 * s2)).exp();
    (h + e, g + Point2::new(-dx / s2 * e, -dy / s2 * e))
}

/// `a b^2 < 3 sqrt(3) f / (4 g)`.
pub fn csp_check(jet: &JetParams, params: &PhysicalParams) -> bool {
    jet.a * jet.b * jet.b < 3.0 * 3f64.sqrt() * params.f / (4.0 * params.g)
}

/// A named initial height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Scenario {
    Jet { jet: JetParams },
    ShallowJet { jet: JetParams },
    PerturbedJet { jet: JetParams, bump: BumpParams },
}

impl Scenario {
    pub fn jet() -> Self {
        Scenario::Jet { jet: JetParams::STEEP }
    }

    pub fn shallow_jet() -> Self {
        Scenario::ShallowJet { jet: JetParams::SHALLOW }
    }

    pub fn perturbed_jet() -> Self {
        Scenario::PerturbedJet {
            jet: JetParams::STEEP,
            bump: BumpParams::default(),
        }
    }

    /// Default scenario by name: `jet`, `shallow_jet` or `perturbed_jet`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "jet" => Ok(Self::jet()),
            "shallow_jet" => Ok(Self::shallow_jet()),
            "perturbed_jet" => Ok(Self::perturbed_jet()),
            other => Err(Error::invalid("scenario", format!("unknown scenario {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Jet { .. } => "jet",
            Scenario::ShallowJet { .. } => "shallow_jet",
            Scenario::PerturbedJet { .. } => "perturbed_jet",
        }
    }

    pub fn jet_params(&self) -> &JetParams {
        match self {
            Scenario::Jet { jet } | Scenario::ShallowJet { jet } | Scenario::PerturbedJet { jet, .. } => jet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.jet_params().validate()?;
        if let Scenario::PerturbedJet { bump, .. } = self {
            bump.validate()?;
        }
        Ok(())
    }

    pub fn height(&self, p: Point2, domain: &Domain) -> HeightSample {
        match self {
            Scenario::Jet { jet } | Scenario::ShallowJet { jet } => jet_height(p, jet),
            Scenario::PerturbedJet { jet, bump } => perturbed_height(p, jet, bump, domain),
        }
    }

    /// Whether the height depends on `x2` only.
    pub fn is_zonal(&self) -> bool {
        !matches!(self, Scenario::PerturbedJet { .. })
    }
}

/// Hoskins image `X + (g/f^2) grad h0(X)`.
pub fn hoskins(x: Point2, grad: Point2, params: &PhysicalParams) -> Point2 {
    x + grad * params.gamma()
}

/// Particles at the Hoskins images of the grid nodes, weights `h0(X_i)/N`.
///
/// Emits a warning when the jet violates the stability bound.
pub fn initial_sigma(
    grid: &Grid,
    height: impl Fn(Point2) -> HeightSample,
    params: &PhysicalParams,
) -> Result<DiscreteMeasure> {
    let n = grid.len() as f64;
    let area = grid.domain.x1_period * grid.domain.width();
    let mut pts = Vec::with_capacity(grid.len());
    let mut w = Vec::with_capacity(grid.len());
    for x in grid.nodes() {
        let (h, g) = height(x);
        if !(h > 0.0) {
            return Err(Error::invalid("initial height", format!("nonpositive height {h} at {x}")));
        }
        pts.push(hoskins(x, g, params));
        w.push(h * area / n);
    }
    Ok(DiscreteMeasure::new(pts, w)?.remapped(&grid.domain))
}

/// [`initial_sigma`] for a named scenario.
pub fn scenario_sigma(scenario: &Scenario, grid: &Grid, params: &PhysicalParams) -> Result<DiscreteMeasure> {
    scenario.validate()?;
    if !csp_check(scenario.jet_params(), params) {
        log::warn!("jet violates the stability bound a b^2 < 3 sqrt(3) f / (4 g)");
    }
    let d = grid.domain;
    initial_sigma(grid, |p| scenario.height(p, &d), params)
}

/// Heights of a scenario on the grid nodes.
pub fn scenario_heights(scenario: &Scenario, grid: &Grid) -> Vec<f64> {
    grid.nodes().iter().map(|p| scenario.height(*p, &grid.domain).0).collect()
}

/// Inverse of `x2 -> x2 + gamma dh/dx2` for a zonal jet, by bisection.
///
/// The map is increasing when the stability bound holds; the bracket is
/// widened until it contains `y2`.
pub fn inverse_hoskins_x2(y2: f64, jet: &JetParams, params: &PhysicalParams) -> f64 {
    let gamma = params.gamma();
    let fwd = |x2: f64| x2 + gamma * jet_height(Point2::new(0.0, x2), jet).1.x2;
    let span = gamma * jet.a.abs() * jet.b.abs() + 1.0;
    let (mut lo, mut hi) = (y2 - span, y2 + span);
    while fwd(lo) > y2 {
        lo -= span;
    }
    while fwd(hi) < y2 {
        hi += span;
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if fwd(mid) < y2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn jet_examples() {
        let (h, g) = jet_height(Point2::new(0.3, 0.5), &JetParams::STEEP);
        assert_abs_diff_eq!(h, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.x2, 1.0, epsilon = 1e-15);
        assert_eq!(g.x1, 0.0);
        let (h, _) = jet_height(Point2::new(0.0, 1e3), &JetParams::STEEP);
        assert_abs_diff_eq!(h, 1.1, epsilon = 1e-15);
        let (_, g) = jet_height(Point2::new(0.0, 0.5), &JetParams::SHALLOW);
        assert_abs_diff_eq!(g.x2, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bump_examples() {
        let d = Domain::default();
        let b = BumpParams::default();
        let j = JetParams::STEEP;
        let c = Point2::new(0.5, 0.3);
        let bump = perturbed_height(c, &j, &b, &d).0 - jet_height(c, &j).0;
        assert_abs_diff_eq!(bump, 0.001 / (2.0 * std::f64::consts::PI * 0.01), epsilon = 1e-15);
        assert_abs_diff_eq!(bump, 0.015915494309189534, epsilon = 1e-15);
        let far = Point2::new(0.0, 0.95);
        assert_abs_diff_eq!(perturbed_height(far, &j, &b, &d).0, jet_height(far, &j).0, epsilon = 1e-12);
    }

    #[test]
    fn csp_examples() {
        let p = PhysicalParams::default();
        assert!(csp_check(&JetParams::STEEP, &p));
        assert!(csp_check(&JetParams::SHALLOW, &p));
        assert!(!csp_check(&JetParams { b: 12.0, ..JetParams::STEEP }, &p));
    }

    #[test]
    fn sigma_examples() {
        let p = PhysicalParams::default();
        let grid = Grid::new(4, 2, Domain::default()).unwrap();
        let s = scenario_sigma(&Scenario::jet(), &grid, &p).unwrap();
        // rows sit at x2 = 0.25 and 0.75; check the Hoskins shift on one of them
        let (_, g) = jet_height(Point2::new(0.0, 0.25), &JetParams::STEEP);
        assert_abs_diff_eq!(s.points()[0].x2, 0.25 + 0.1 * g.x2, epsilon = 1e-15);
        let y = hoskins(Point2::new(0.1, 0.5), jet_height(Point2::new(0.1, 0.5), &JetParams::STEEP).1, &p);
        assert_abs_diff_eq!(y.x2, 0.6, epsilon = 1e-15);
        let flat = initial_sigma(&grid, |_| (1.3, Point2::ZERO), &p).unwrap();
        assert_eq!(flat.points(), grid.nodes().as_slice());
        assert!(flat.weights().iter().all(|w| (w - 1.3 / 8.0).abs() < 1e-15));
        let mean: f64 = scenario_heights(&Scenario::jet(), &grid).iter().sum::<f64>() / 8.0;
        assert_abs_diff_eq!(s.total_mass(), mean, epsilon = 1e-14);
    }

    #[test]
    fn zonal_rows_share_y2() {
        let grid = Grid::unit_square(8).unwrap();
        let s = scenario_sigma(&Scenario::jet(), &grid, &PhysicalParams::default()).unwrap();
        for row in s.points().chunks(8) {
            assert!(row.iter().all(|p| p.x2 == row[0].x2));
        }
        assert!(s.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn perturbation_vanishes_linearly() {
        let grid = Grid::unit_square(10).unwrap();
        let p = PhysicalParams::default();
        let jet = scenario_sigma(&Scenario::jet(), &grid, &p).unwrap();
        let diff = |alpha: f64| {
            let sc = Scenario::PerturbedJet {
                jet: JetParams::STEEP,
                bump: BumpParams { alpha, ..Default::default() },
            };
            let s = scenario_sigma(&sc, &grid, &p).unwrap();
            s.points()
                .iter()
                .zip(jet.points())
                .map(|(a, b)| Domain::default().displacement(*b, *a).norm())
                .fold(0.0, f64::max)
        };
        let (d3, d4) = (diff(1e-3), diff(1e-4));
        assert!(d3 > 0.0);
        assert!((d3 / d4 - 10.0).abs() < 1e-6);
    }

    #[test]
    fn hoskins_inverse_round_trips() {
        let p = PhysicalParams::default();
        for jet in [JetParams::STEEP, JetParams::SHALLOW] {
            for k in 0..20 {
                let x2 = k as f64 / 19.0;
                let y2 = hoskins(Point2::new(0.0, x2), jet_height(Point2::new(0.0, x2), &jet).1, &p).x2;
                assert_abs_diff_eq!(inverse_hoskins_x2(y2, &jet, &p), x2, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn unknown_scenario_is_rejected() {
        assert!(Scenario::by_name("vortex").is_err());
        assert_eq!(Scenario::by_name("shallow_jet").unwrap(), Scenario::shallow_jet());
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(x1 in 0.0..1.0f64, x2 in 0.0..1.0f64) {
            let d = Domain::default();
            let j = JetParams::STEEP;
            let b = BumpParams { alpha: 0.01, ..Default::default() };
            let p = Point2::new(x1, x2);
            let (_, g) = perturbed_height(p, &j, &b, &d);
            let s = 1e-6;
            let fd1 = (perturbed_height(Point2::new(x1 + s, x2), &j, &b, &d).0 - perturbed_height(Point2::new(x1 - s, x2), &j, &b, &d).0) / (2.0 * s);
            let fd2 = (perturbed_height(Point2::new(x1, x2 + s), &j, &b, &d).0 - perturbed_height(Point2::new(x1, x2 - s), &j, &b, &d).0) / (2.0 * s);
            prop_assert!((fd1 - g.x1).abs() <= 1e-6 * g.x1.abs().max(1e-2));
            prop_assert!((fd2 - g.x2).abs() <= 1e-6 * g.x2.abs().max(1e-2));
        }
    }
}
