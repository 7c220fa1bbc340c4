//! Lagrangian particle integration.
//!
//! Particles sit in geostrophic space and move with `f J grad(psi - psi^S)`,
//! `J(a, b) = (b, -a)`, where the potentials solve the transport problem
//! between the fixed grid and the current particle cloud. Any
//! [`VelocityField`] can be integrated with the explicit steppers here; the
//! transport-driven field is [`GeostrophicField`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{remap_periodic, DiscreteMeasure, Domain, Point2};
use crate::ot::barycentric::column_barycenters;
use crate::ot::kernel::GibbsKernel;
use crate::ot::saddle::{saddle_sinkhorn_on, SaddlePoint, SaddleProblem};
use crate::ot::symmetric::symmetric_on_kernel;
use crate::ot::{DualPotentials, PhysicalParams, SolveStats, SolverConfig, SwsgSolver};

/// Which potential gradient drives the particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// `grad psi` of the height-coupled problem.
    Biased,
    /// `grad(psi - psi^S)` with `psi` from the height-coupled problem.
    #[default]
    Debiased,
    /// `grad(psi - psi^S)` with `psi` from the saddle problem.
    Saddle,
}

impl BiasMode {
    pub fn name(self) -> &'static str {
        match self {
            BiasMode::Biased => "biased",
            BiasMode::Debiased => "debiased",
            BiasMode::Saddle => "saddle",
        }
    }
}

impl std::str::FromStr for BiasMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biased" => Ok(BiasMode::Biased),
            "debiased" => Ok(BiasMode::Debiased),
            "saddle" => Ok(BiasMode::Saddle),
            other => Err(Error::invalid("bias_mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepperKind {
    Euler,
    Heun,
    Rk4,
}

impl StepperKind {
    /// Classical order of accuracy.
    pub fn order(self) -> usize {
        match self {
            StepperKind::Euler => 1,
            StepperKind::Heun => 2,
            StepperKind::Rk4 => 4,
        }
    }

    pub fn stages(self) -> usize {
        self.order()
    }
}

impl std::str::FromStr for StepperKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(StepperKind::Euler),
            "heun" | "rk2" => Ok(StepperKind::Heun),
            "rk4" => Ok(StepperKind::Rk4),
            other => Err(Error::invalid("stepper", format!("unknown stepper {other:?}"))),
        }
    }
}

/// Explicit Runge-Kutta rule with a fixed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stepper {
    pub kind: StepperKind,
    pub dt: f64,
}

impl Stepper {
    pub fn new(kind: StepperKind, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        Ok(Self { kind, dt })
    }
}

/// `J(a, b) = (b, -a)`.
pub fn rotate(v: Point2) -> Point2 {
    v.rotate_j()
}

/// A velocity field sampled at particle positions.
pub trait VelocityField {
    fn velocity(&mut self, points: &[Point2], t: f64) -> Result<Vec<Point2>>;

    /// Applied to the positions after each completed step.
    fn remap(&self, points: Vec<Point2>) -> Vec<Point2> {
        points
    }
}

/// The same velocity everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub Point2);

impl VelocityField for ConstantField {
    fn velocity(&mut self, points: &[Point2], _t: f64) -> Result<Vec<Point2>> {
        Ok(vec![self.0; points.len()])
    }
}

/// Rigid rotation `dY/dt = J Y`, period `2 pi`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RotationField;

impl VelocityField for RotationField {
    fn velocity(&mut self, points: &[Point2], _t: f64) -> Result<Vec<Point2>> {
        Ok(points.iter().map(|p| p.rotate_j()).collect())
    }
}

fn axpy(y: &[Point2], a: f64, k: &[Point2]) -> Vec<Point2> {
    y.iter().zip(k).map(|(y, k)| *y + *k * a).collect()
}

/// Positions after one step from `y` at time `t`, given the velocity `k1` at `y`.
///
/// Stage positions are not remapped; the field's remap is applied once to the result.
pub fn advance<F: VelocityField + ?Sized>(
    field: &mut F,
    y: &[Point2],
    k1: &[Point2],
    t: f64,
    stepper: &Stepper,
) -> Result<Vec<Point2>> {
    let dt = stepper.dt;
    let out = match stepper.kind {
        StepperKind::Euler => axpy(y, dt, k1),
        StepperKind::Heun => {
            let k2 = field.velocity(&axpy(y, dt, k1), t + dt)?;
            y.iter()
                .zip(k1)
                .zip(&k2)
                .map(|((y, a), b)| *y + (*a + *b) * (0.5 * dt))
                .collect()
        }
        StepperKind::Rk4 => {
            let k2 = field.velocity(&axpy(y, 0.5 * dt, k1), t + 0.5 * dt)?;
            let k3 = field.velocity(&axpy(y, 0.5 * dt, &k2), t + 0.5 * dt)?;
            let k4 = field.velocity(&axpy(y, dt, &k3), t + dt)?;
            (0..y.len())
                .map(|i| y[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
                .collect()
        }
    };
    Ok(field.remap(out))
}

/// Integrates `n` steps of a field from `y0` at `t = 0`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &mut F,
    y0: &[Point2],
    stepper: &Stepper,
    n: usize,
) -> Result<Vec<Point2>> {
    let mut y = y0.to_vec();
    for s in 0..n {
        let t = s as f64 * stepper.dt;
        let k1 = field.velocity(&y, t)?;
        y = advance(field, &y, &k1, t, stepper)?;
    }
    Ok(y)
}

/// One transport solve performed by [`GeostrophicField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub t: f64,
    pub step_index: usize,
    /// 0 for the evaluation at the start of a step, then one per internal stage.
    pub stage: usize,
    pub stats: SolveStats,
    pub sym_stats: Option<SolveStats>,
}

/// Converged transport data at one particle configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub pots: DualPotentials,
    /// `grad psi` (biased) or `grad(psi - psi^S)`, per particle.
    pub grad: Vec<Point2>,
    pub velocity: Vec<Point2>,
    pub stats: SolveStats,
    pub sym_stats: Option<SolveStats>,
}

/// Velocity field defined by the entropic transport between the grid and the particles.
#[derive(Debug, Clone)]
pub struct GeostrophicField {
    grid: DiscreteMeasure,
    weights: Vec<f64>,
    params: PhysicalParams,
    cfg: SolverConfig,
    mode: BiasMode,
    domain: Domain,
    warm: Option<DualPotentials>,
    last: Option<Evaluation>,
    /// Step index and stage stamped on the next solve record.
    cursor: (usize, usize),
    /// Every solve, in order.
    pub records: Vec<SolveRecord>,
}

impl GeostrophicField {
    /// `weights` are the fixed particle weights.
    pub fn new(
        grid: DiscreteMeasure,
        weights: Vec<f64>,
        params: PhysicalParams,
        cfg: SolverConfig,
        mode: BiasMode,
        domain: Domain,
    ) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        domain.validate()?;
        if grid.is_empty() || weights.is_empty() {
            return Err(Error::invalid("measures", "grid and particles must be nonempty"));
        }
        Ok(Self {
            grid,
            weights,
            params,
            cfg,
            mode,
            domain,
            warm: None,
            last: None,
            cursor: (0, 0),
            records: Vec::new(),
        })
    }

    pub fn mode(&self) -> BiasMode {
        self.mode
    }

    pub fn params(&self) -> PhysicalParams {
        self.params
    }

    pub fn config(&self) -> SolverConfig {
        self.cfg
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn grid(&self) -> &DiscreteMeasure {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Result of the most recent evaluation.
    pub fn last(&self) -> Option<&Evaluation> {
        self.last.as_ref()
    }

    /// Potentials the next solve starts from.
    pub fn warm_start(&self) -> Option<&DualPotentials> {
        self.warm.as_ref()
    }

    pub fn set_warm_start(&mut self, pots: Option<DualPotentials>) {
        self.warm = pots;
    }

    /// Full solve at `points`, warm-started when enabled.
    pub fn evaluate(&mut self, points: &[Point2]) -> Result<Evaluation> {
        let init = if self.cfg.warm_start { self.warm.clone() } else { None };
        self.evaluate_from(points, init.as_ref())
    }

    /// Full solve at `points` from an explicit starting point.
    pub fn evaluate_from(&mut self, points: &[Point2], init: Option<&DualPotentials>) -> Result<Evaluation> {
        let pts = remap_periodic(points, &self.domain);
        let sigma = DiscreteMeasure::new(pts.clone(), self.weights.clone())?;
        let eps = self.cfg.eps;
        let gpts = self.grid.points().to_vec();
        let gw = self.grid.weights().to_vec();
        let init = init.filter(|p| p.phi.len() == gw.len() && p.psi.len() == pts.len());

        let (mut pots, stats, b) = match self.mode {
            BiasMode::Biased | BiasMode::Debiased => {
                let mut s = SwsgSolver::new(&self.grid, &sigma, &self.domain, self.params, eps)?;
                if let Some(p) = init {
                    s.absorb(p);
                }
                let (pots, stats) = s.solve(&self.cfg, init)?;
                stats.require_converged("swsg")?;
                let b = column_barycenters(s.kernel_mut(), &pots.phi, &gw, &gpts, &pts, &self.domain)?;
                (pots, stats, b)
            }
            BiasMode::Saddle => {
                let mut prob = SaddleProblem::new(&self.grid, &sigma, self.params, eps, &self.domain)?;
                let start = init.and_then(|p| {
                    p.u.as_ref().map(|u| SaddlePoint {
                        phi: p.phi.clone(),
                        psi: p.psi.clone(),
                        h: vec![0.0; u.len()],
                        u: u.clone(),
                    })
                });
                if let Some(p) = init {
                    prob.swsg_mut().absorb(p);
                }
                let sol = saddle_sinkhorn_on(&mut prob, self.cfg.tol, self.cfg.max_iters, start.as_ref())?;
                sol.stats.require_converged("saddle")?;
                let b = column_barycenters(
                    prob.swsg_mut().kernel_mut(),
                    &sol.phi,
                    &gw,
                    &gpts,
                    &pts,
                    &self.domain,
                )?;
                let pots = DualPotentials {
                    phi: sol.phi,
                    psi: sol.psi,
                    psi_sym: None,
                    u: Some(sol.u),
                };
                (pots, sol.stats, b)
            }
        };

        let (grad, sym_stats) = if self.mode == BiasMode::Biased {
            let g: Vec<Point2> = pts.iter().zip(&b).map(|(y, b)| *y - *b).collect();
            (g, None)
        } else {
            let mut k = GibbsKernel::between(&pts, &pts, &self.domain, eps);
            let sym_init = init.and_then(|p| p.psi_sym.clone());
            if let Some(s) = &sym_init {
                k.absorb(s, s);
            }
            let (sym, st) = symmetric_on_kernel(&mut k, &self.weights, self.cfg.tol, self.cfg.max_iters, sym_init.as_deref())?;
            st.require_converged("symmetric")?;
            let bs = column_barycenters(&mut k, &sym, &self.weights, &pts, &pts, &self.domain)?;
            pots.psi_sym = Some(sym);
            (bs.into_iter().zip(b).map(|(s, b)| s - b).collect(), Some(st))
        };
        let f = self.params.f;
        let velocity = grad.iter().map(|g: &Point2| g.rotate_j() * f).collect();
        let ev = Evaluation {
            pots,
            grad,
            velocity,
            stats,
            sym_stats,
        };
        self.warm = Some(ev.pots.clone());
        self.last = Some(ev.clone());
        Ok(ev)
    }
}

impl VelocityField for GeostrophicField {
    fn velocity(&mut self, points: &[Point2], t: f64) -> Result<Vec<Point2>> {
        let (step_index, stage) = self.cursor;
        let ev = self
            .evaluate(points)
            .map_err(|e| e.with_context(format!("t = {t}, step {step_index}, stage {stage}")))?;
        self.records.push(SolveRecord {
            t,
            step_index,
            stage,
            stats: ev.stats.clone(),
            sym_stats: ev.sym_stats.clone(),
        });
        self.cursor.1 += 1;
        Ok(ev.velocity)
    }

    fn remap(&self, points: Vec<Point2>) -> Vec<Point2> {
        remap_periodic(&points, &self.domain)
    }
}

/// Particle cloud, its converged potentials and the velocity they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub t: f64,
    pub step_index: usize,
    pub particles: DiscreteMeasure,
    pub pots: DualPotentials,
    /// `grad psi` or `grad(psi - psi^S)` at the current positions.
    pub grad: Vec<Point2>,
    pub velocity: Vec<Point2>,
}

impl SimulationState {
    /// Solves at the initial cloud and caches the velocity.
    pub fn initial(sigma0: DiscreteMeasure, field: &mut GeostrophicField) -> Result<Self> {
        if sigma0.weights() != field.weights() {
            return Err(Error::invalid("sigma0", "weights differ from the field's particle weights"));
        }
        let sigma0 = sigma0.remapped(field.domain());
        field.cursor = (0, 0);
        field.velocity(sigma0.points(), 0.0)?;
        let ev = field.last().cloned().expect("evaluation just ran");
        Ok(Self {
            t: 0.0,
            step_index: 0,
            particles: sigma0,
            pots: ev.pots,
            grad: ev.grad,
            velocity: ev.velocity,
        })
    }

    /// Diagnostic physical positions `Y - grad(psi - psi^S)` (or `Y - grad psi`).
    pub fn physical_positions(&self, domain: &Domain) -> DiscreteMeasure {
        let pts: Vec<Point2> = self
            .particles
            .points()
            .iter()
            .zip(&self.grad)
            .map(|(y, g)| *y - *g)
            .collect();
        DiscreteMeasure::new(remap_periodic(&pts, domain), self.particles.weights().to_vec())
            .expect("finite positions")
    }
}

/// Advances the state by one step. On failure the field's warm start is
/// restored and the input state remains the last good state.
pub fn step(state: &SimulationState, stepper: &Stepper, field: &mut GeostrophicField) -> Result<SimulationState> {
    let saved = (field.warm.clone(), field.last.clone());
    let run = |field: &mut GeostrophicField| -> Result<SimulationState> {
        field.cursor = (state.step_index + 1, 1);
        let y = advance(field, state.particles.points(), &state.velocity, state.t, stepper)?;
        let t = state.t + stepper.dt;
        field.cursor = (state.step_index + 1, 0);
        field.velocity(&y, t)?;
        let ev = field.last().cloned().expect("evaluation just ran");
        Ok(SimulationState {
            t,
            step_index: state.step_index + 1,
            particles: state.particles.with_points(y)?,
            pots: ev.pots,
            grad: ev.grad,
            velocity: ev.velocity,
        })
    };
    run(field).inspect_err(|_| {
        field.warm = saved.0;
        field.last = saved.1;
    })
}

/// Horizon, stepper and snapshot cadence of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub stepper: Stepper,
    pub horizon: f64,
    /// Snapshot every this many steps (the initial and final states are always kept).
    pub snapshot_every: usize,
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        Stepper::new(self.stepper.kind, self.stepper.dt)?;
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::invalid("horizon", "must be nonnegative"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps, `round(T / dt)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.stepper.dt).round() as usize
    }
}

/// What a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub final_state: SimulationState,
    pub snapshots_written: usize,
    pub steps_taken: usize,
    /// First failure; the snapshots before it are intact.
    pub error: Option<Error>,
}

/// Runs from `initial`, handing every snapshot to `sink` in time order.
pub fn run(
    initial: SimulationState,
    field: &mut GeostrophicField,
    opts: &RunOptions,
    mut sink: impl FnMut(&SimulationState) -> Result<()>,
) -> Result<RunOutcome> {
    opts.validate()?;
    let n = opts.steps();
    sink(&initial)?;
    let mut written = 1;
    let mut state = initial;
    for s in 0..n {
        match step(&state, &opts.stepper, field) {
            Ok(next) => state = next,
            Err(e) => {
                log::error!("step {} failed: {e}", s + 1);
                return Ok(RunOutcome {
                    final_state: state,
                    snapshots_written: written,
                    steps_taken: s,
                    error: Some(e),
                });
            }
        }
        if (s + 1) % opts.snapshot_every == 0 || s + 1 == n {
            sink(&state)?;
            written += 1;
        }
    }
    Ok(RunOutcome {
        final_state: state,
        snapshots_written: written,
        steps_taken: n,
        error: None,
    })
}

/// Velocities at the particle positions of `state`, solved from scratch.
pub fn velocity_field(
    state: &SimulationState,
    grid: &DiscreteMeasure,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    mode: BiasMode,
    domain: &Domain,
) -> Result<Vec<Point2>> {
    let mut f = GeostrophicField::new(
        grid.clone(),
        state.particles.weights().to_vec(),
        *params,
        *cfg,
        mode,
        *domain,
    )?;
    Ok(f.evaluate_from(state.particles.points(), None)?.velocity)
}

/// Diagnostic physical-space cloud `Y - grad(psi - psi^S)`, solved from scratch.
pub fn reconstruct_physical_positions(
    sigma: &DiscreteMeasure,
    grid: &DiscreteMeasure,
    params: &PhysicalParams,
    cfg: &SolverConfig,
    mode: BiasMode,
    domain: &Domain,
) -> Result<DiscreteMeasure> {
    let mut f = GeostrophicField::new(grid.clone(), sigma.weights().to_vec(), *params, *cfg, mode, *domain)?;
    let ev = f.evaluate_from(sigma.points(), None)?;
    let pts: Vec<Point2> = sigma
        .points()
        .iter()
        .zip(&ev.grad)
        .map(|(y, g)| *y - *g)
        .collect();
    DiscreteMeasure::new(remap_periodic(&pts, domain), sigma.weights().to_vec())
}
