//! `simulate`: one run from a configuration into a run directory.

use std::path::PathBuf;

use swsg_core::diagnostics::{ageostrophic_ratio, energy_report, state_heights, EnergyReport};
use swsg_core::dynamics::{step, GeostrophicField, SimulationState};
use swsg_core::scenarios::scenario_sigma;
use swsg_core::DiscreteMeasure;

use crate::artifact::{
    binary_name, energy_tsv, potentials_name, ratio_tsv, residual_history_tsv, residuals_tsv, snapshot_name,
    unix_seconds, ConvergenceSummary, PotentialTable, RunManifest, RunStatus, RunWriter, SnapshotEntry,
    SnapshotTable, RUN_FORMAT,
};
use crate::config::{Resolved, RunConfig};
use crate::error::{CliResult, Failure};

#[derive(Debug)]
pub struct SimulateOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    r: &'a Resolved,
    writer: RunWriter,
    snapshots: Vec<SnapshotEntry>,
    energy: Vec<EnergyReport>,
    ratio: Vec<(f64, f64)>,
}

impl Recorder<'_> {
    fn snapshot(&mut self, state: &SimulationState, field: &GeostrophicField) -> CliResult<()> {
        let d = self.r.grid.domain;
        let phys = state.physical_positions(&d);
        let snap = SnapshotTable::from_state(state, phys.points());
        let k = state.step_index;
        let file = snapshot_name(k);
        self.writer.write(&file, snap.to_text().as_bytes())?;
        let binary = if self.cfg.output.binary {
            let b = binary_name(k);
            self.writer.write(&b, &snap.to_binary())?;
            Some(b)
        } else {
            None
        };
        let h = state_heights(state, field.grid(), &self.r.params, self.r.solver.eps, self.r.mode, &d)?;
        let pot = potentials_name(k);
        self.writer
            .write(&pot, PotentialTable::from_state(state, &self.r.grid, h).to_text().as_bytes())?;
        self.snapshots.push(SnapshotEntry {
            step_index: k,
            t: state.t,
            file,
            binary,
            potentials: pot,
        });
        if self.cfg.output.energy {
            let base = self.energy.first().copied();
            let e = energy_report(state, field.grid(), &self.r.params, &self.r.solver, self.r.mode, &d, base.as_ref())?;
            self.energy.push(e);
        }
        Ok(())
    }
}

/// Runs the configured simulation. A failed step truncates the run: the
/// directory and manifest are still written and a solver failure is returned.
pub fn simulate(cfg: &RunConfig) -> CliResult<SimulateOutcome> {
    let r = cfg.resolve()?;
    let started = unix_seconds();
    let writer = RunWriter::create(&cfg.output.dir)?;
    let mut rec = Recorder {
        cfg,
        r: &r,
        writer,
        snapshots: Vec::new(),
        energy: Vec::new(),
        ratio: Vec::new(),
    };
    rec.writer.write("config.toml", cfg.to_toml().as_bytes())?;

    let d = r.grid.domain;
    let sigma = scenario_sigma(&r.scenario, &r.grid, &r.params)?;
    let mut field = GeostrophicField::new(r.grid.measure(), sigma.weights().to_vec(), r.params, r.solver, r.mode, d)?;
    let steps = r.run.steps();
    let every = r.run.snapshot_every;

    let mut failure: Option<(RunStatus, String)> = None;
    let mut steps_taken = 0;
    match SimulationState::initial(sigma, &mut field) {
        Err(e) => failure = Some((RunStatus::Failed, e.to_string())),
        Ok(initial) => {
            let res = (|| -> CliResult<()> {
                rec.snapshot(&initial, &field)?;
                let mut prev_x: Option<DiscreteMeasure> = None;
                let mut state = initial;
                for k in 1..=steps {
                    let next = match step(&state, &r.run.stepper, &mut field) {
                        Ok(n) => n,
                        Err(e) => {
                            log::error!("step {k} failed: {e}");
                            failure = Some((RunStatus::Truncated, e.to_string()));
                            return Ok(());
                        }
                    };
                    let cur = k - 1;
                    if cfg.output.ratio && cur >= 1 && cur % every == 0 {
                        if let Some(px) = &prev_x {
                            let x_next = next.physical_positions(&d);
                            rec.ratio
                                .push((state.t, ageostrophic_ratio(px, &x_next, &state.velocity, r.run.stepper.dt, &d)?));
                        }
                    }
                    if cfg.output.ratio {
                        prev_x = Some(state.physical_positions(&d));
                    }
                    state = next;
                    steps_taken = k;
                    if k % every == 0 || k == steps {
                        rec.snapshot(&state, &field)?;
                    }
                    log::info!("t = {:.4} step {k}/{steps}", state.t);
                }
                Ok(())
            })();
            if let Err(e) = res {
                failure = Some((RunStatus::Truncated, e.to_string()));
            }
        }
    }

    rec.writer.write("residuals.tsv", residuals_tsv(&field.records).as_bytes())?;
    rec.writer
        .write("residual_history.tsv", residual_history_tsv(&field.records).as_bytes())?;
    if cfg.output.energy {
        rec.writer.write("energy.tsv", energy_tsv(&rec.energy).as_bytes())?;
    }
    if cfg.output.ratio {
        rec.writer.write("ratio.tsv", ratio_tsv(&rec.ratio).as_bytes())?;
    }
    let (status, error) = match &failure {
        Some((s, e)) => (*s, Some(e.clone())),
        None => (RunStatus::Completed, None),
    };
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        started,
        finished: unix_seconds(),
        status,
        error,
        steps_taken,
        snapshots: rec.snapshots,
        convergence: ConvergenceSummary::from_records(&field.records),
        files: Vec::new(),
    };
    let dir = rec.writer.root().to_path_buf();
    let manifest = rec.writer.finish(manifest)?;
    if let Some((_, e)) = failure {
        return Err(Failure::Solver(format!("run in {} stopped: {e}", dir.display())));
    }
    Ok(SimulateOutcome { dir, manifest })
}
