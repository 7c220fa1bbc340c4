//! Run configuration: TOML file, flag overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swsg_core::dynamics::{BiasMode, RunOptions, Stepper, StepperKind};
use swsg_core::scenarios::{BumpParams, JetParams, Scenario};
use swsg_core::{Error, Grid, PhysicalParams, SolverConfig};

use crate::error::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub jet: Option<JetParams>,
    /// Only meaningful for `perturbed_jet`.
    pub bump: Option<BumpParams>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: "jet".into(),
            jet: None,
            bump: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub f: f64,
    pub g: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        let p = PhysicalParams::default();
        Self { f: p.f, g: p.g }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n1: 32, n2: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub eps: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub warm_start: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::default();
        Self {
            eps: c.eps,
            tol: c.tol,
            max_iters: 100_000,
            warm_start: c.warm_start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub stepper: StepperKind,
    pub dt: f64,
    pub horizon: f64,
    /// Steps between snapshots.
    pub snapshot_every: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self {
            stepper: StepperKind::Heun,
            dt: 0.1,
            horizon: 10.0,
            snapshot_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Also write the binary twin of every snapshot.
    pub binary: bool,
    /// Write `energy.tsv` at every snapshot.
    pub energy: bool,
    /// Write `ratio.tsv` at every snapshot with both neighbours.
    pub ratio: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            binary: false,
            energy: true,
            ratio: true,
        }
    }
}

/// Parameters read only by `study`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// `eps` values of the convergence studies; `N = round(1/eps)^2`.
    pub eps_list: Vec<f64>,
    pub reference_eps: f64,
    /// Side of the fine grid of the `t = 0` loss references.
    pub reference_n: usize,
    pub loss_eps: f64,
    pub times: Vec<f64>,
    /// Stepper and step cells of the energy study.
    pub steppers: Vec<StepperKind>,
    pub dts: Vec<f64>,
    /// Scenarios of the ageostrophic study; empty means the run scenario.
    pub scenarios: Vec<String>,
    /// Steps between samples of the energy and ageostrophic studies.
    pub sample_every: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            eps_list: vec![0.08, 0.04, 0.02],
            reference_eps: 0.02,
            reference_n: 64,
            loss_eps: 0.01,
            times: vec![0.0, 1.0],
            steppers: vec![StepperKind::Heun],
            dts: vec![0.1],
            scenarios: Vec::new(),
            sample_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: BiasMode,
    /// Seed of the randomized verification fixtures.
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub physics: PhysicsSection,
    pub grid: GridSection,
    pub solver: SolverSection,
    pub time: TimeSection,
    pub output: OutputSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: BiasMode::Debiased,
            seed: 0,
            scenario: ScenarioSection::default(),
            physics: PhysicsSection::default(),
            grid: GridSection::default(),
            solver: SolverSection::default(),
            time: TimeSection::default(),
            output: OutputSection::default(),
            study: StudySection::default(),
        }
    }
}

/// Everything a run needs, checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub params: PhysicalParams,
    pub grid: Grid,
    pub solver: SolverConfig,
    pub run: RunOptions,
    pub mode: BiasMode,
}

fn validation(e: Error) -> Failure {
    Failure::Validation(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| Failure::Validation(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Scenario with the section's overrides applied.
    pub fn scenario(&self) -> CliResult<Scenario> {
        Self::scenario_named(&self.scenario.name, &self.scenario)
    }

    pub fn scenario_named(name: &str, section: &ScenarioSection) -> CliResult<Scenario> {
        let mut s = Scenario::by_name(name).map_err(validation)?;
        match &mut s {
            Scenario::Jet { jet } | Scenario::ShallowJet { jet } => {
                if let Some(j) = section.jet {
                    *jet = j;
                }
                if section.bump.is_some() {
                    return Err(Failure::Validation(format!(
                        "invalid scenario.bump: only perturbed_jet takes a bump, not {name}"
                    )));
                }
            }
            Scenario::PerturbedJet { jet, bump } => {
                if let Some(j) = section.jet {
                    *jet = j;
                }
                if let Some(b) = section.bump {
                    *bump = b;
                }
            }
        }
        s.validate().map_err(validation)?;
        Ok(s)
    }

    pub fn params(&self) -> CliResult<PhysicalParams> {
        PhysicalParams::new(self.physics.f, self.physics.g).map_err(validation)
    }

    pub fn solver_config(&self) -> CliResult<SolverConfig> {
        let c = SolverConfig {
            eps: self.solver.eps,
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
            warm_start: self.solver.warm_start,
        };
        c.validate().map_err(validation)?;
        Ok(c)
    }

    /// Checks every field used by `simulate` before any compute.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let scenario = self.scenario()?;
        let params = self.params()?;
        if self.grid.n1 == 0 || self.grid.n2 == 0 {
            return Err(Failure::Validation("invalid grid.n1/grid.n2: must be at least 1".into()));
        }
        let grid = Grid::new(self.grid.n1, self.grid.n2, Default::default()).map_err(validation)?;
        let solver = self.solver_config()?;
        let stepper = Stepper::new(self.time.stepper, self.time.dt).map_err(validation)?;
        let run = RunOptions {
            stepper,
            horizon: self.time.horizon,
            snapshot_every: self.time.snapshot_every,
        };
        run.validate().map_err(validation)?;
        if self.output.dir.as_os_str().is_empty() {
            return Err(Failure::Validation("invalid output.dir: empty path".into()));
        }
        Ok(Resolved {
            scenario,
            params,
            grid,
            solver,
            run,
            mode: self.mode,
        })
    }

    /// Checks the study section on top of the run fields.
    pub fn validate_study(&self) -> CliResult<()> {
        let s = &self.study;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Failure::Validation(format!("invalid study.{name}: must be positive, got {v}")))
            }
        };
        for &e in &s.eps_list {
            positive("eps_list", e)?;
        }
        positive("reference_eps", s.reference_eps)?;
        positive("loss_eps", s.loss_eps)?;
        for &dt in &s.dts {
            positive("dts", dt)?;
        }
        if s.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || s.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Failure::Validation("invalid study.times: must be nonnegative and ascending".into()));
        }
        if s.reference_n == 0 {
            return Err(Failure::Validation("invalid study.reference_n: must be at least 1".into()));
        }
        if s.sample_every == 0 {
            return Err(Failure::Validation("invalid study.sample_every: must be at least 1".into()));
        }
        for name in &s.scenarios {
            Self::scenario_named(name, &self.scenario)?;
        }
        Ok(())
    }
}

/// Flag values that override the file; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub f: Option<f64>,
    pub g: Option<f64>,
    pub n: Option<usize>,
    pub eps: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub cold_start: bool,
    pub stepper: Option<StepperKind>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub snapshot_every: Option<usize>,
    pub mode: Option<BiasMode>,
    pub out: Option<PathBuf>,
    pub binary: bool,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.scenario {
            cfg.scenario.name = v.clone();
        }
        if let Some(v) = self.f {
            cfg.physics.f = v;
        }
        if let Some(v) = self.g {
            cfg.physics.g = v;
        }
        if let Some(v) = self.n {
            cfg.grid.n1 = v;
            cfg.grid.n2 = v;
        }
        if let Some(v) = self.eps {
            cfg.solver.eps = v;
        }
        if let Some(v) = self.tol {
            cfg.solver.tol = v;
        }
        if let Some(v) = self.max_iters {
            cfg.solver.max_iters = v;
        }
        if self.cold_start {
            cfg.solver.warm_start = false;
        }
        if let Some(v) = self.stepper {
            cfg.time.stepper = v;
        }
        if let Some(v) = self.dt {
            cfg.time.dt = v;
        }
        if let Some(v) = self.horizon {
            cfg.time.horizon = v;
        }
        if let Some(v) = self.snapshot_every {
            cfg.time.snapshot_every = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = v.clone();
        }
        if self.binary {
            cfg.output.binary = true;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_scale() {
        let c = RunConfig::default();
        let r = c.resolve().unwrap();
        assert_eq!(r.grid.len(), 1024);
        assert_eq!(r.solver.eps, 0.03);
        assert_eq!(r.run.horizon, 10.0);
        assert_eq!(r.run.stepper.kind, StepperKind::Heun);
        assert_eq!(r.mode, BiasMode::Debiased);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("mode = \"saddle\"\n[time]\ndt = 0.05\n").unwrap();
        assert_eq!(c.mode, BiasMode::Saddle);
        assert_eq!(c.time.dt, 0.05);
        assert_eq!(c.time.horizon, 10.0);
        assert_eq!(c.grid, GridSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[time]\nstep = 1\n"), Err(Failure::Validation(_))));
    }

    #[test]
    fn zero_dt_names_the_field() {
        let mut c = RunConfig::default();
        c.time.dt = 0.0;
        let err = c.resolve().unwrap_err();
        assert!(matches!(err, Failure::Validation(_)));
        assert!(err.to_string().contains("dt"), "{err}");
    }

    #[test]
    fn bump_on_a_plain_jet_is_rejected() {
        let mut c = RunConfig::default();
        c.scenario.bump = Some(BumpParams::default());
        assert!(c.resolve().unwrap_err().to_string().contains("bump"));
    }

    #[test]
    fn overrides_win_over_the_file() {
        let mut c = RunConfig::default();
        Overrides {
            n: Some(8),
            dt: Some(0.2),
            cold_start: true,
            ..Default::default()
        }
        .apply(&mut c);
        assert_eq!((c.grid.n1, c.grid.n2), (8, 8));
        assert_eq!(c.time.dt, 0.2);
        assert!(!c.solver.warm_start);
    }
}
