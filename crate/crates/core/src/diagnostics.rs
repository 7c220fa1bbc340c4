//! Energies, ageostrophic ratio, transport losses and convergence studies.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::dynamics::{BiasMode, GeostrophicField, SimulationState};
use crate::error::{Error, Result};
use crate::geometry::{periodic_cost, remap_periodic, transport_cost, DiscreteMeasure, Domain, Grid, Point2};
pub use crate::geometry::GridField;
use crate::ot::balanced::{ot_eps_generic, ot_eps_self_generic, OtOptions};
use crate::ot::kernel::GibbsKernel;
use crate::ot::saddle::SaddleProblem;
use crate::ot::{PhysicalParams, SolverConfig, SwsgSolver};
use crate::scenarios::{hoskins, scenario_heights, scenario_sigma, Scenario};

/// Energy split of one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub t: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
    /// Energy of the state at rest with the same mass: particles on the grid
    /// nodes carrying the mean height.
    pub floor: f64,
    /// `(E_t - E_0) / (E_0 - E_U)`.
    pub normalized_error: f64,
    /// `eps sum mu s (exp((phi + psi - c)/eps) - 1)` at the state's potentials.
    pub entropy: f64,
    /// Mean height over the grid nodes.
    pub mean_height: f64,
}

/// Self-transport value `2 sum w p - eps (sum_jk w_j w_k exp((p_j + p_k - c_jk)/eps) - m^2)`.
fn self_ot_value(kernel: &mut GibbsKernel, w: &[f64], p: &[f64]) -> f64 {
    let eps = kernel.eps();
    let mut l = vec![0.0; w.len()];
    kernel.reduce_over_rows(p, w, &mut l);
    let coupling: f64 = l.iter().zip(p).zip(w).map(|((l, p), w)| w * (p / eps + l).exp()).sum();
    let m: f64 = w.iter().sum();
    2.0 * w.iter().zip(p).map(|(w, p)| w * p).sum::<f64>() - eps * (coupling - m * m)
}

/// Heights on the grid implied by a state: `-(f^2/g) phi`, or `u (K mu u)` for the saddle mode.
pub fn state_heights(
    state: &SimulationState,
    grid: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    mode: BiasMode,
    domain: &Domain,
) -> Result<Vec<f64>> {
    match mode {
        BiasMode::Saddle => {
            let u = state
                .pots
                .u
                .as_ref()
                .ok_or_else(|| Error::InvalidState("saddle state without u".into()))?;
            let mut prob = SaddleProblem::new(grid, &state.particles.remapped(domain), *params, eps, domain)?;
            Ok(prob.height_from_u(u))
        }
        _ => {
            let s = -1.0 / params.gamma();
            Ok(state.pots.phi.iter().map(|p| s * p).collect())
        }
    }
}

struct EnergyTerms {
    kinetic: f64,
    potential: f64,
    entropy: f64,
}

/// The kinetic energy is the transport functional that the chosen velocity
/// conserves: `f^2 OT(h mu, sigma)` for the biased mode, minus `f^2/2 OT(sigma, sigma)`
/// for the debiased mode, and additionally minus `f^2/2 OT(h mu, h mu)` for the
/// saddle mode.
fn energy_terms(
    state: &SimulationState,
    grid: &DiscreteMeasure,
    params: &PhysicalParams,
    eps: f64,
    mode: BiasMode,
    domain: &Domain,
) -> Result<EnergyTerms> {
    let sigma = state.particles.remapped(domain);
    let h = state_heights(state, grid, params, eps, mode, domain)?;
    let mut s = SwsgSolver::new(grid, &sigma, domain, *params, eps)?;
    let f2 = params.f * params.f;
    let mut kinetic = f2 * s.transport_value(&state.pots, &h);
    let entropy = s.entropy_term(&state.pots.phi, &state.pots.psi);
    if mode != BiasMode::Biased {
        let sym = state
            .pots
            .psi_sym
            .as_ref()
            .ok_or_else(|| Error::InvalidState("debiased state without psi_sym".into()))?;
        let mut k = GibbsKernel::between(sigma.points(), sigma.points(), domain, eps);
        kinetic -= 0.5 * f2 * self_ot_value(&mut k, sigma.weights(), sym);
    }
    let mu = grid.weights();
    if mode == BiasMode::Saddle {
        let u = state.pots.u.as_ref().expect("checked by state_heights");
        let mut k = GibbsKernel::between(grid.points(), grid.points(), domain, eps);
        let mut ku = vec![0.0; u.len()];
        let pot: Vec<f64> = u.iter().map(|u| eps * u.ln()).collect();
        k.reduce_over_cols(&pot, mu, &mut ku);
        let quad: f64 = (0..u.len()).map(|i| mu[i] * u[i] * ku[i].exp()).sum();
        let lin: f64 = (0..u.len()).map(|i| mu[i] * h[i] * pot[i]).sum();
        let m: f64 = mu.iter().sum();
        kinetic -= 0.5 * f2 * (2.0 * lin - eps * (quad - m * m));
    }
    let potential = 0.5 * params.g * mu.iter().zip(&h).map(|(m, h)| m * h * h).sum::<f64>();
    Ok(EnergyTerms {
        kinetic,
        potential,
        entropy,
    })
}

/// Energy of the rest state of mean height `hbar`: particles on the grid
/// nodes with weights `hbar mu`, evaluated by the same functional.
pub fn rest_energy(
    grid: &DiscreteMeasure,
    hbar: f64,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    mode: BiasMode,
    domain: &Domain,
) -> Result<f64> {
    let w: Vec<f64> = grid.weights().iter().map(|m| hbar * m).collect();
    let rest = DiscreteMeasure::new(grid.points().to_vec(), w.clone())?;
    let mut field = GeostrophicField::new(grid.clone(), w, *params, *cfg, mode, *domain)?;
    let state = SimulationState::initial(rest, &mut field)?;
    let e = energy_terms(&state, grid, params, cfg.eps, mode, domain)?;
    Ok(e.kinetic + e.potential)
}

/// Energy of `state`, normalised against `baseline` when given.
///
/// Without a baseline the rest-state floor is solved for (once per run);
/// with one it is reused.
pub fn energy_report(
    state: &SimulationState,
    grid: &DiscreteMeasure,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    mode: BiasMode,
    domain: &Domain,
    baseline: Option<&EnergyReport>,
) -> Result<EnergyReport> {
    let e = energy_terms(state, grid, params, cfg.eps, mode, domain)?;
    let mass: f64 = grid.weights().iter().sum();
    let mean_height = state.particles.total_mass() / mass;
    let total = e.kinetic + e.potential;
    let (floor, normalized_error) = match baseline {
        Some(b) => (b.floor, (total - b.total) / (b.total - b.floor)),
        None => (rest_energy(grid, mean_height, params, cfg, mode, domain)?, 0.0),
    };
    Ok(EnergyReport {
        t: state.t,
        kinetic: e.kinetic,
        potential: e.potential,
        total,
        floor,
        normalized_error,
        entropy: e.entropy,
        mean_height,
    })
}

/// `||U_t - U_g|| / ||U_g||` in the weighted L2 norm.
///
/// `U_t` is the central difference `(X_next - X_prev) / (2 dt)` of the
/// reconstructed physical positions, taken through the nearest periodic
/// image; `u_g` is the particle velocity at the middle time.
pub fn ageostrophic_ratio(
    prev: &DiscreteMeasure,
    next: &DiscreteMeasure,
    u_g: &[Point2],
    dt: f64,
    domain: &Domain,
) -> Result<f64> {
    if prev.len() != next.len() || prev.len() != u_g.len() {
        return Err(Error::invalid("snapshot triple", "particle counts differ"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let w = prev.weights();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..prev.len() {
        let ut = domain.displacement(prev.points()[i], next.points()[i]) * (0.5 / dt);
        num += w[i] * (ut - u_g[i]).norm_sq();
        den += w[i] * u_g[i].norm_sq();
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// Point of the four-dimensional phase space `(position, velocity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub pos: Point2,
    pub vel: Point2,
}

/// Cost for loss clouds: half the squared periodic distance in position plus
/// half the squared velocity difference.
pub trait LossPoint: Copy {
    fn cost(&self, other: &Self, domain: &Domain) -> f64;
}

impl LossPoint for Point2 {
    fn cost(&self, other: &Self, domain: &Domain) -> f64 {
        transport_cost(*self, *other, domain)
    }
}

impl LossPoint for PhasePoint {
    fn cost(&self, other: &Self, domain: &Domain) -> f64 {
        0.5 * (periodic_cost(self.pos, other.pos, domain) + (self.vel - other.vel).norm_sq())
    }
}

/// Loss settings; the loss is a measurement, so its tolerance is looser than the dynamics'.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub eps: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            eps: 0.01,
            tol: 1e-9,
            max_iters: 200_000,
        }
    }
}

impl LossOptions {
    fn ot(&self) -> OtOptions {
        OtOptions {
            eps: self.eps,
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    let mut clamped = false;
    let w: Vec<f64> = weights
        .iter()
        .map(|w| {
            if *w < 0.0 {
                clamped = true;
                0.0
            } else {
                *w
            }
        })
        .collect();
    if clamped {
        log::warn!("negative loss weights clamped to zero");
    }
    let m: f64 = w.iter().sum();
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::invalid("loss weights", "total mass must be positive"));
    }
    Ok(w.into_iter().map(|x| x / m).collect())
}

/// Reference cloud of a Sinkhorn-divergence loss, with its self-transport value cached.
#[derive(Debug, Clone)]
pub struct TransportLoss<P> {
    points: Vec<P>,
    weights: Vec<f64>,
    self_value: f64,
    opts: LossOptions,
    domain: Domain,
}

impl<P: LossPoint> TransportLoss<P> {
    /// Weights are clamped at zero and normalised to unit mass.
    pub fn new(points: Vec<P>, weights: &[f64], opts: LossOptions, domain: Domain) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::invalid("loss reference", "points and weights must match and be nonempty"));
        }
        let weights = normalized(weights)?;
        let self_value = ot_eps_self_generic(&weights, |i, j| points[i].cost(&points[j], &domain), &opts.ot())?.value;
        Ok(Self {
            points,
            weights,
            self_value,
            opts,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `S_eps(cloud, reference)` after normalising the cloud to unit mass.
    pub fn divergence(&self, points: &[P], weights: &[f64]) -> Result<f64> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::invalid("loss cloud", "points and weights must match and be nonempty"));
        }
        let w = normalized(weights)?;
        let d = &self.domain;
        let o = self.opts.ot();
        let cross = ot_eps_generic(&w, &self.weights, |i, j| points[i].cost(&self.points[j], d), &o)?.value;
        let own = ot_eps_self_generic(&w, |i, j| points[i].cost(&points[j], d), &o)?.value;
        Ok(cross - 0.5 * own - 0.5 * self.self_value)
    }

    /// `sqrt(max(S_eps, 0))`.
    pub fn error(&self, points: &[P], weights: &[f64]) -> Result<f64> {
        Ok(self.divergence(points, weights)?.max(0.0).sqrt())
    }
}

/// Height-measure loss reference: fine grid nodes weighted by the exact heights.
pub fn height_reference(scenario: &Scenario, fine: &Grid, opts: LossOptions) -> Result<TransportLoss<Point2>> {
    TransportLoss::new(fine.nodes(), &scenario_heights(scenario, fine), opts, fine.domain)
}

/// `E^h`: transport loss between the grid height measure and the reference.
pub fn height_error(h: &GridField, grid: &Grid, reference: &TransportLoss<Point2>) -> Result<f64> {
    if h.len() != grid.len() {
        return Err(Error::invalid("height field", "does not match the grid"));
    }
    reference.error(&grid.nodes(), h.values())
}

/// Phase-space loss reference: Hoskins images of a fine grid with the
/// analytic geostrophic velocity `-(g/f) J grad h0`.
pub fn phase_reference(
    scenario: &Scenario,
    fine: &Grid,
    params: &PhysicalParams,
    opts: LossOptions,
) -> Result<TransportLoss<PhasePoint>> {
    let d = fine.domain;
    let mut pts = Vec::with_capacity(fine.len());
    let mut w = Vec::with_capacity(fine.len());
    for x in fine.nodes() {
        let (h, g) = scenario.height(x, &d);
        let y = hoskins(x, g, params);
        pts.push(PhasePoint {
            pos: Point2::new(d.wrap_x1(y.x1), y.x2),
            vel: g.rotate_j() * (-params.g / params.f),
        });
        w.push(h);
    }
    TransportLoss::new(pts, &w, opts, d)
}

/// `E^U` for particles embedded as `(Y, -f J grad)` with the mode's gradient.
pub fn phase_space_error(
    particles: &DiscreteMeasure,
    grad: &[Point2],
    params: &PhysicalParams,
    reference: &TransportLoss<PhasePoint>,
) -> Result<f64> {
    let pts: Vec<PhasePoint> = particles
        .points()
        .iter()
        .zip(grad)
        .map(|(y, g)| PhasePoint {
            pos: *y,
            vel: g.rotate_j() * (-params.f),
        })
        .collect();
    reference.error(&pts, particles.weights())
}

/// Bilinear interpolation of a cell-centred grid field, periodic in `x1`
/// and clamped to the outermost node rows in `x2`.
pub fn bilinear_sample(values: &[f64], grid: &Grid, p: Point2) -> f64 {
    let (dx1, dx2) = grid.spacing();
    let d = &grid.domain;
    let s = d.wrap_x1(p.x1) / dx1 - 0.5;
    let i0 = s.floor();
    let a = s - i0;
    let i0 = i0 as i64;
    let n1 = grid.n1 as i64;
    let ia = i0.rem_euclid(n1) as usize;
    let ib = (i0 + 1).rem_euclid(n1) as usize;
    let r = ((p.x2 - d.x2_min) / dx2 - 0.5).clamp(0.0, (grid.n2 - 1) as f64);
    let j0 = (r.floor() as usize).min(grid.n2.saturating_sub(2));
    let b = if grid.n2 == 1 { 0.0 } else { r - j0 as f64 };
    let j1 = (j0 + 1).min(grid.n2 - 1);
    let at = |i: usize, j: usize| values[j * grid.n1 + i];
    (1.0 - b) * ((1.0 - a) * at(ia, j0) + a * at(ib, j0)) + b * ((1.0 - a) * at(ia, j1) + a * at(ib, j1))
}

/// Root-mean-square difference between `h` and the bilinear restriction of `h_ref` to `grid`.
pub fn l2_height_error(h: &GridField, grid: &Grid, h_ref: &GridField, ref_grid: &Grid) -> Result<f64> {
    if h.len() != grid.len() || h_ref.len() != ref_grid.len() {
        return Err(Error::invalid("height field", "does not match its grid"));
    }
    let nodes = grid.nodes();
    let s: f64 = nodes
        .iter()
        .zip(h.values())
        .map(|(p, v)| (v - bilinear_sample(h_ref.values(), ref_grid, *p)).powi(2))
        .sum();
    Ok((s / grid.len() as f64).sqrt())
}

/// Least-squares fit of `log y = slope log x + intercept`; `None` with fewer than two usable points.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Grid side for `N = 1/eps^2`.
pub fn grid_side_for_eps(eps: f64) -> usize {
    ((1.0 / eps).round() as usize).max(1)
}

/// One measured value of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub eps: f64,
    pub n: usize,
    pub t: f64,
    pub mode: String,
    pub metric: String,
    pub value: f64,
    /// `ok` or the failure message.
    pub status: String,
}

/// Log-log slope of one `(mode, metric)` series against `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub mode: String,
    pub metric: String,
    pub t: f64,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyTable {
    pub kind: String,
    pub header: Vec<(String, String)>,
    pub rows: Vec<StudyRow>,
    pub fits: Vec<SlopeFit>,
}

impl StudyTable {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, eps: f64, n: usize, t: f64, mode: &str, metric: &str, value: f64) {
        self.rows.push(StudyRow {
            eps,
            n,
            t,
            mode: mode.into(),
            metric: metric.into(),
            value,
            status: "ok".into(),
        });
    }

    pub fn push_failure(&mut self, eps: f64, n: usize, t: f64, mode: &str, metric: &str, err: &Error) {
        self.rows.push(StudyRow {
            eps,
            n,
            t,
            mode: mode.into(),
            metric: metric.into(),
            value: f64::NAN,
            status: format!("failed: {err}"),
        });
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.status != "ok")
    }

    /// Values of one series ordered as inserted.
    pub fn series(&self, mode: &str, metric: &str, t: f64) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.mode == mode && r.metric == metric && r.t == t && r.status == "ok")
            .map(|r| (r.eps, r.value))
            .collect()
    }

    /// Fits a slope for every `(mode, metric, t)` series with at least two points.
    pub fn fit_slopes(&mut self) {
        let mut keys: Vec<(String, String, f64)> = Vec::new();
        for r in &self.rows {
            let k = (r.mode.clone(), r.metric.clone(), r.t);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        self.fits.clear();
        for (mode, metric, t) in keys {
            let s = self.series(&mode, &metric, t);
            let (xs, ys): (Vec<f64>, Vec<f64>) = s.iter().copied().unzip();
            if let Some((slope, intercept)) = fit_loglog(&xs, &ys) {
                self.fits.push(SlopeFit {
                    mode,
                    metric,
                    t,
                    slope,
                    intercept,
                    points: xs.len(),
                });
            }
        }
    }

    pub fn fit(&self, mode: &str, metric: &str, t: f64) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.mode == mode && f.metric == metric && f.t == t)
    }

    /// Tab-separated table with a `#` header block and a trailing slope block.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# study: {}", self.kind)?;
        for (k, v) in &self.header {
            writeln!(out, "# {k}: {v}")?;
        }
        writeln!(out, "eps\tN\tt\tmode\tmetric\tvalue\tstatus")?;
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:e}\t{}",
                r.eps, r.n, r.t, r.mode, r.metric, r.value, r.status
            )?;
        }
        writeln!(out, "# slopes")?;
        writeln!(out, "# mode\tmetric\tt\tslope\tintercept\tpoints")?;
        for f in &self.fits {
            writeln!(
                out,
                "# {}\t{}\t{}\t{:.6}\t{:.6}\t{}",
                f.mode, f.metric, f.t, f.slope, f.intercept, f.points
            )?;
        }
        Ok(())
    }
}

/// Settings shared by the convergence studies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub params: PhysicalParams,
    /// Solver tolerance and iteration cap; `eps` is overridden per row.
    pub solver: SolverConfig,
    pub loss: LossOptions,
    /// Side of the fine reference grid.
    pub reference_n: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            params: PhysicalParams::default(),
            solver: SolverConfig {
                max_iters: 200_000,
                ..SolverConfig::default()
            },
            loss: LossOptions::default(),
            reference_n: 64,
        }
    }
}

/// Time-zero errors of one `eps` (with `N = 1/eps^2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsErrors {
    pub eps: f64,
    pub n: usize,
    pub height_biased: f64,
    pub height_debiased: f64,
    pub height_l2_biased: f64,
    pub height_l2_debiased: f64,
    pub phase_biased: f64,
    pub phase_debiased: f64,
}

/// Errors at `t = 0` for one `eps`: biased heights `-(f^2/g) phi`, debiased
/// heights from the saddle problem, biased velocities `grad psi` and
/// debiased velocities `grad(psi - psi^S)`.
pub fn eps_errors(
    scenario: &Scenario,
    eps: f64,
    opts: &StudyOptions,
    h_ref: &TransportLoss<Point2>,
    u_ref: &TransportLoss<PhasePoint>,
    fine: &Grid,
) -> Result<EpsErrors> {
    let n = grid_side_for_eps(eps);
    let grid = Grid::unit_square(n)?;
    let sigma = scenario_sigma(scenario, &grid, &opts.params)?;
    let cfg = SolverConfig { eps, ..opts.solver };
    let gm = grid.measure();
    let d = grid.domain;
    let h_fine = GridField::new(scenario_heights(scenario, fine));

    let mut biased = GeostrophicField::new(gm.clone(), sigma.weights().to_vec(), opts.params, cfg, BiasMode::Biased, d)?;
    let eb = biased.evaluate_from(sigma.points(), None)?;
    let mut debiased = GeostrophicField::new(gm.clone(), sigma.weights().to_vec(), opts.params, cfg, BiasMode::Debiased, d)?;
    let ed = debiased.evaluate_from(sigma.points(), Some(&eb.pots))?;
    let mut saddle = GeostrophicField::new(gm.clone(), sigma.weights().to_vec(), opts.params, cfg, BiasMode::Saddle, d)?;
    let es = saddle.evaluate_from(sigma.points(), None)?;

    let gamma = opts.params.gamma();
    let hb = GridField::new(eb.pots.phi.iter().map(|p| -p / gamma).collect());
    let mut prob = SaddleProblem::new(&gm, &sigma, opts.params, eps, &d)?;
    let hs = GridField::new(prob.height_from_u(es.pots.u.as_ref().expect("saddle sets u")));

    Ok(EpsErrors {
        eps,
        n: grid.len(),
        height_biased: height_error(&hb, &grid, h_ref)?,
        height_debiased: height_error(&hs, &grid, h_ref)?,
        height_l2_biased: l2_height_error(&hb, &grid, &h_fine, fine)?,
        height_l2_debiased: l2_height_error(&hs, &grid, &h_fine, fine)?,
        phase_biased: phase_space_error(&sigma, &eb.grad, &opts.params, u_ref)?,
        phase_debiased: phase_space_error(&sigma, &ed.grad, &opts.params, u_ref)?,
    })
}

/// `E^h` (transport and L2) and `E^U` at `t = 0` over `eps_list`, with slope fits.
pub fn eps_convergence_study(scenario: &Scenario, eps_list: &[f64], opts: &StudyOptions) -> Result<StudyTable> {
    let fine = Grid::unit_square(opts.reference_n)?;
    let h_ref = height_reference(scenario, &fine, opts.loss)?;
    let u_ref = phase_reference(scenario, &fine, &opts.params, opts.loss)?;
    let mut table = eps_convergence_table(scenario, opts);
    for &eps in eps_list {
        push_eps_errors(&mut table, eps, eps_errors(scenario, eps, opts, &h_ref, &u_ref, &fine));
    }
    table.fit_slopes();
    Ok(table)
}

/// Header of an `eps_convergence` table.
pub fn eps_convergence_table(scenario: &Scenario, opts: &StudyOptions) -> StudyTable {
    let mut table = StudyTable::new("eps_convergence");
    table.header.push(("scenario".into(), scenario.name().into()));
    table.header.push(("reference_grid".into(), format!("{0}x{0}", opts.reference_n)));
    table.header.push(("loss_eps".into(), opts.loss.eps.to_string()));
    table
}

/// Appends the rows of one `eps`, or a failure row.
pub fn push_eps_errors(table: &mut StudyTable, eps: f64, res: Result<EpsErrors>) {
    let n = grid_side_for_eps(eps).pow(2);
    match res {
        Ok(e) => {
            table.push(eps, n, 0.0, "biased", "E_h", e.height_biased);
            table.push(eps, n, 0.0, "debiased", "E_h", e.height_debiased);
            table.push(eps, n, 0.0, "biased", "E_h_l2", e.height_l2_biased);
            table.push(eps, n, 0.0, "debiased", "E_h_l2", e.height_l2_debiased);
            table.push(eps, n, 0.0, "biased", "E_U", e.phase_biased);
            table.push(eps, n, 0.0, "debiased", "E_U", e.phase_debiased);
        }
        Err(err) => {
            log::error!("eps {eps}: {err}");
            table.push_failure(eps, n, 0.0, "all", "all", &err);
        }
    }
}

/// Simulated state of one `(eps, N)` run at the requested times.
fn run_to_times(
    scenario: &Scenario,
    eps: f64,
    mode: BiasMode,
    times: &[f64],
    stepper: &crate::dynamics::Stepper,
    opts: &StudyOptions,
) -> Result<(Grid, Vec<SimulationState>)> {
    let grid = Grid::unit_square(grid_side_for_eps(eps))?;
    let sigma = scenario_sigma(scenario, &grid, &opts.params)?;
    let cfg = SolverConfig { eps, ..opts.solver };
    let mut field = GeostrophicField::new(grid.measure(), sigma.weights().to_vec(), opts.params, cfg, mode, grid.domain)?;
    let mut state = SimulationState::initial(sigma, &mut field)?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let steps = ((t - state.t) / stepper.dt).round().max(0.0) as usize;
        for _ in 0..steps {
            state = crate::dynamics::step(&state, stepper, &mut field)?;
        }
        out.push(state.clone());
    }
    Ok((grid, out))
}

/// Errors against a fine run: `E^sigma` on the particle clouds, and `E^h`
/// with both the transport and the interpolated L2 loss, for every time.
///
/// `eps_list` must be descending and the reference run uses `reference_eps`
/// (its grid has `1/reference_eps^2` nodes). A failed run marks its rows and
/// the study continues.
pub fn pseudoconvergence_study(
    scenario: &Scenario,
    eps_list: &[f64],
    reference_eps: f64,
    times: &[f64],
    stepper: &crate::dynamics::Stepper,
    mode: BiasMode,
    opts: &StudyOptions,
) -> Result<StudyTable> {
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("eps_list", "must be strictly descending"));
    }
    if eps_list.iter().any(|e| grid_side_for_eps(*e) > grid_side_for_eps(reference_eps)) {
        return Err(Error::invalid("reference_eps", "reference grid must be the finest"));
    }
    let (ref_grid, ref_states) = run_to_times(scenario, reference_eps, mode, times, stepper, opts)?;
    let mut table = StudyTable::new("pseudoconvergence");
    table.header.push(("scenario".into(), scenario.name().into()));
    table.header.push(("mode".into(), mode.name().into()));
    table.header.push(("reference_eps".into(), reference_eps.to_string()));
    table.header.push(("reference_N".into(), ref_grid.len().to_string()));
    table.header.push(("stepper".into(), format!("{:?} dt={}", stepper.kind, stepper.dt)));
    let m = mode.name();
    let d = ref_grid.domain;
    let mut refs = Vec::with_capacity(times.len());
    for st in &ref_states {
        let h = GridField::new(state_heights(st, &ref_grid.measure(), &opts.params, reference_eps, mode, &d)?);
        let sig = TransportLoss::new(remap_periodic(st.particles.points(), &d), st.particles.weights(), opts.loss, d)?;
        let hl = TransportLoss::new(ref_grid.nodes(), h.values(), opts.loss, d)?;
        refs.push((sig, hl, h));
    }
    for &eps in eps_list {
        let n = grid_side_for_eps(eps).pow(2);
        let run = run_to_times(scenario, eps, mode, times, stepper, opts);
        let (grid, states) = match run {
            Ok(r) => r,
            Err(e) => {
                for &t in times {
                    table.push_failure(eps, n, t, m, "all", &e);
                }
                continue;
            }
        };
        for ((st, (sig, hl, h_ref)), &t) in states.iter().zip(&refs).zip(times) {
            let res = (|| -> Result<(f64, f64, f64)> {
                let h = GridField::new(state_heights(st, &grid.measure(), &opts.params, eps, mode, &d)?);
                Ok((
                    sig.error(st.particles.points(), st.particles.weights())?,
                    height_error(&h, &grid, hl)?,
                    l2_height_error(&h, &grid, h_ref, &ref_grid)?,
                ))
            })();
            match res {
                Ok((es, eh, el)) => {
                    table.push(eps, n, t, m, "E_sigma", es);
                    table.push(eps, n, t, m, "E_h", eh);
                    table.push(eps, n, t, m, "E_h_l2", el);
                }
                Err(e) => table.push_failure(eps, n, t, m, "all", &e),
            }
        }
    }
    table.fit_slopes();
    Ok(table)
}

/// Energy and ageostrophic samples along one run.
#[derive(Debug, Default)]
pub struct DiagnosticTrace {
    pub energy: Vec<EnergyReport>,
    /// `(t, ratio)` at interior sampled steps.
    pub ratio: Vec<(f64, f64)>,
    pub steps_taken: usize,
    /// First failure; the samples before it are kept.
    pub error: Option<Error>,
}

/// What [`trace_run`] measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub stepper: crate::dynamics::Stepper,
    pub horizon: f64,
    /// Sample every this many steps (the initial state is always sampled for energy).
    pub sample_every: usize,
    pub energy: bool,
    pub ageostrophic: bool,
}

/// Runs `field` from `initial`, sampling energies and the ageostrophic ratio.
///
/// The ratio at step `k` uses the physical positions of steps `k - 1` and
/// `k + 1`, so it is available from the first step to the one before last.
pub fn trace_run(
    initial: SimulationState,
    field: &mut GeostrophicField,
    opts: &TraceOptions,
) -> Result<(SimulationState, DiagnosticTrace)> {
    if opts.sample_every == 0 {
        return Err(Error::invalid("sample_every", "must be at least 1"));
    }
    let grid = field.grid().clone();
    let (params, cfg, mode, d) = (field.params(), field.config(), field.mode(), *field.domain());
    let dt = opts.stepper.dt;
    let steps = (opts.horizon / dt).round() as usize;
    let mut trace = DiagnosticTrace::default();
    if opts.energy {
        trace.energy.push(energy_report(&initial, &grid, &params, &cfg, mode, &d, None)?);
    }
    let mut prev_x: Option<DiscreteMeasure> = None;
    let mut state = initial;
    for k in 1..=steps {
        let next = match crate::dynamics::step(&state, &opts.stepper, field) {
            Ok(n) => n,
            Err(e) => {
                trace.error = Some(e);
                return Ok((state, trace));
            }
        };
        let cur = k - 1;
        if opts.ageostrophic && cur >= 1 && cur % opts.sample_every == 0 {
            if let Some(px) = &prev_x {
                let r = ageostrophic_ratio(px, &next.physical_positions(&d), &state.velocity, dt, &d)?;
                trace.ratio.push((state.t, r));
            }
        }
        if opts.ageostrophic {
            prev_x = Some(state.physical_positions(&d));
        }
        state = next;
        trace.steps_taken = k;
        if opts.energy && (k % opts.sample_every == 0 || k == steps) {
            let base = trace.energy[0];
            trace.energy.push(energy_report(&state, &grid, &params, &cfg, mode, &d, Some(&base))?);
        }
    }
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step, Stepper, StepperKind};
    use crate::scenarios::JetParams;
    use approx::assert_abs_diff_eq;

    #[test]
    fn flat_state_energy() {
        let d = Domain::default();
        let grid = Grid::unit_square(6).unwrap();
        let gm = grid.measure();
        let params = PhysicalParams::default();
        let cfg = SolverConfig::new(0.05, 1e-11, 100_000).unwrap();
        let mut f = GeostrophicField::new(gm.clone(), gm.weights().to_vec(), params, cfg, BiasMode::Saddle, d).unwrap();
        let s = SimulationState::initial(gm.clone(), &mut f).unwrap();
        let e = energy_report(&s, &gm, &params, &cfg, BiasMode::Saddle, &d, None).unwrap();
        assert_abs_diff_eq!(e.potential, 0.05, epsilon = 1e-9);
        assert!(e.kinetic.abs() < 1e-9, "{}", e.kinetic);
        assert_eq!(e.normalized_error, 0.0);
        assert_abs_diff_eq!(e.total, e.floor, epsilon = 1e-12);
        let again = energy_report(&s, &gm, &params, &cfg, BiasMode::Saddle, &d, Some(&e)).unwrap();
        assert!(again.normalized_error.is_nan() || again.normalized_error == 0.0);
    }

    #[test]
    fn energy_is_nearly_conserved_over_a_few_steps() {
        let grid = Grid::unit_square(25).unwrap();
        let params = PhysicalParams::default();
        let sigma = scenario_sigma(&Scenario::perturbed_jet(), &grid, &params).unwrap();
        let cfg = SolverConfig::new(0.04, 1e-11, 100_000).unwrap();
        for (mode, bound) in [(BiasMode::Biased, 1e-3), (BiasMode::Debiased, 1e-4), (BiasMode::Saddle, 1e-4)] {
            let gm = grid.measure();
            let mut f = GeostrophicField::new(gm.clone(), sigma.weights().to_vec(), params, cfg, mode, grid.domain).unwrap();
            let mut s = SimulationState::initial(sigma.clone(), &mut f).unwrap();
            let e0 = energy_report(&s, &gm, &params, &cfg, mode, &grid.domain, None).unwrap();
            let st = Stepper::new(StepperKind::Heun, 0.1).unwrap();
            for _ in 0..3 {
                s = step(&s, &st, &mut f).unwrap();
            }
            let e = energy_report(&s, &gm, &params, &cfg, mode, &grid.domain, Some(&e0)).unwrap();
            assert!(e.normalized_error.abs() < bound, "{mode:?}: {}", e.normalized_error);
            assert!(e.entropy.abs() < 1e-9);
        }
    }

    #[test]
    fn trace_samples_energy_and_ratio() {
        let grid = Grid::unit_square(9).unwrap();
        let params = PhysicalParams::default();
        let sigma = scenario_sigma(&Scenario::jet(), &grid, &params).unwrap();
        let cfg = SolverConfig::new(0.08, 1e-11, 100_000).unwrap();
        let mut f = GeostrophicField::new(grid.measure(), sigma.weights().to_vec(), params, cfg, BiasMode::Debiased, grid.domain).unwrap();
        let s0 = SimulationState::initial(sigma, &mut f).unwrap();
        let opts = TraceOptions {
            stepper: Stepper::new(StepperKind::Heun, 0.1).unwrap(),
            horizon: 0.5,
            sample_every: 2,
            energy: true,
            ageostrophic: true,
        };
        let (end, tr) = trace_run(s0, &mut f, &opts).unwrap();
        assert_eq!(tr.steps_taken, 5);
        assert_abs_diff_eq!(end.t, 0.5, epsilon = 1e-12);
        let times: Vec<f64> = tr.energy.iter().map(|e| e.t).collect();
        assert_eq!(times.len(), 4);
        assert_abs_diff_eq!(times[3], 0.5, epsilon = 1e-12);
        assert_eq!(tr.energy[0].normalized_error, 0.0);
        let rt: Vec<f64> = tr.ratio.iter().map(|r| r.0).collect();
        assert_eq!(rt.len(), 2);
        assert_abs_diff_eq!(rt[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(rt[1], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn ageostrophic_ratio_of_rigid_translation_vanishes() {
        let d = Domain::default();
        let v = Point2::new(0.2, 0.0);
        let pts = vec![Point2::new(0.95, 0.3), Point2::new(0.5, 0.5)];
        let dt = 0.1;
        let prev = DiscreteMeasure::uniform(pts.iter().map(|p| *p - v * dt).collect(), 1.0).unwrap();
        let next = DiscreteMeasure::uniform(remap_periodic(&pts.iter().map(|p| *p + v * dt).collect::<Vec<_>>(), &d), 1.0).unwrap();
        let r = ageostrophic_ratio(&prev, &next, &[v, v], dt, &d).unwrap();
        assert!(r < 1e-13, "{r}");
        assert!(ageostrophic_ratio(&prev, &next, &[v], dt, &d).is_err());
    }

    #[test]
    fn losses_vanish_on_identical_inputs() {
        let d = Domain::default();
        let grid = Grid::unit_square(8).unwrap();
        let opts = LossOptions::default();
        let r = height_reference(&Scenario::jet(), &grid, opts).unwrap();
        let h = GridField::new(scenario_heights(&Scenario::jet(), &grid));
        assert!(height_error(&h, &grid, &r).unwrap() < 1e-4);
        assert!(r.divergence(&grid.nodes(), h.values()).unwrap().abs() < 1e-8);
        let other = GridField::new(scenario_heights(&Scenario::shallow_jet(), &grid));
        assert!(height_error(&other, &grid, &r).unwrap() > 1e-3);
        let params = PhysicalParams::default();
        let u = phase_reference(&Scenario::jet(), &grid, &params, opts).unwrap();
        let cloud: Vec<PhasePoint> = u.points.clone();
        assert!(u.divergence(&cloud, &u.weights.clone()).unwrap().abs() < 1e-8);
        let _ = d;
    }

    #[test]
    fn bilinear_reproduces_linear_fields() {
        let g = Grid::unit_square(8).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|p| 2.0 * p.x2 + 1.0).collect();
        for p in [Point2::new(0.3, 0.4), Point2::new(0.99, 0.5), Point2::new(0.01, 0.2)] {
            assert_abs_diff_eq!(bilinear_sample(&vals, &g, p), 2.0 * p.x2 + 1.0, epsilon = 1e-12);
        }
        let h = GridField::new(vals.clone());
        assert_eq!(l2_height_error(&h, &g, &h, &g).unwrap(), 0.0);
    }

    #[test]
    fn loglog_fit_recovers_power_laws() {
        let xs = [0.08, 0.04, 0.02, 0.01];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        let (s, c) = fit_loglog(&xs, &ys).unwrap();
        assert_abs_diff_eq!(s, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 3f64.ln(), epsilon = 1e-12);
        assert!(fit_loglog(&[0.1], &[1.0]).is_none());
    }

    #[test]
    fn study_table_writes_rows_and_slopes() {
        let mut t = StudyTable::new("eps_convergence");
        for (e, v) in [(0.08, 0.08f64.powf(1.5)), (0.04, 0.04f64.powf(1.5)), (0.02, 0.02f64.powf(1.5))] {
            t.push(e, grid_side_for_eps(e).pow(2), 0.0, "biased", "E_h", v);
        }
        t.fit_slopes();
        assert_eq!(t.rows.len(), 3);
        assert_abs_diff_eq!(t.fit("biased", "E_h", 0.0).unwrap().slope, 1.5, epsilon = 1e-12);
        let mut buf = Vec::new();
        t.write_tsv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# study: eps_convergence"));
        assert_eq!(s.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }

    #[test]
    fn grid_sides_follow_inverse_eps() {
        assert_eq!(grid_side_for_eps(0.08), 13);
        assert_eq!(grid_side_for_eps(0.04), 25);
        assert_eq!(grid_side_for_eps(0.02), 50);
    }

    #[test]
    fn hoskins_reconstruction_approximates_the_grid() {
        let p = PhysicalParams::default();
        let grid = Grid::unit_square(16).unwrap();
        let sc = Scenario::Jet { jet: JetParams::SHALLOW };
        let sigma = scenario_sigma(&sc, &grid, &p).unwrap();
        let cfg = SolverConfig::new(0.02, 1e-11, 200_000).unwrap();
        let x = crate::dynamics::reconstruct_physical_positions(&sigma, &grid.measure(), &p, &cfg, BiasMode::Debiased, &grid.domain).unwrap();
        let mut worst: f64 = 0.0;
        for (xr, y) in x.points().iter().zip(sigma.points()) {
            let exact = crate::scenarios::inverse_hoskins_x2(y.x2, sc.jet_params(), &p);
            worst = worst.max((xr.x2 - exact).abs());
        }
        assert!(worst < 0.02, "{worst}");
    }
}
