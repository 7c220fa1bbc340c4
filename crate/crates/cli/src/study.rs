//! `study`: convergence, energy and ageostrophic tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use swsg_core::diagnostics::{
    eps_convergence_table, eps_errors, height_reference, phase_reference, pseudoconvergence_study, push_eps_errors,
    trace_run, DiagnosticTrace, LossOptions, StudyOptions, StudyTable, TraceOptions,
};
use swsg_core::dynamics::{GeostrophicField, SimulationState, Stepper, StepperKind};
use swsg_core::scenarios::{scenario_sigma, Scenario};
use swsg_core::{Grid, Result};

use crate::artifact::{energy_tsv, ratio_tsv};
use crate::config::{Resolved, RunConfig};
use crate::error::{CliResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    EpsConvergence,
    Pseudoconvergence,
    Energy,
    Ageostrophic,
}

impl StudyKind {
    pub const ALL: [StudyKind; 4] = [
        StudyKind::EpsConvergence,
        StudyKind::Pseudoconvergence,
        StudyKind::Energy,
        StudyKind::Ageostrophic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::EpsConvergence => "eps_convergence",
            StudyKind::Pseudoconvergence => "pseudoconvergence",
            StudyKind::Energy => "energy",
            StudyKind::Ageostrophic => "ageostrophic",
        }
    }
}

impl FromStr for StudyKind {
    type Err = Failure;
    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Failure::Validation(format!("unknown study kind {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Worker count from `SWSG_THREADS`, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("SWSG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on at most `threads` workers, keeping input order.
pub fn pool_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                *slots[k].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect()
}

#[derive(Debug)]
pub struct StudyOutcome {
    pub table: StudyTable,
    pub files: Vec<PathBuf>,
}

fn study_options(cfg: &RunConfig) -> CliResult<StudyOptions> {
    let solver = cfg.solver_config()?;
    Ok(StudyOptions {
        params: cfg.params()?,
        solver,
        loss: LossOptions {
            eps: cfg.study.loss_eps,
            ..LossOptions::default()
        },
        reference_n: cfg.study.reference_n,
    })
}

/// One traced run of the configured grid and solver.
fn traced(r: &Resolved, scenario: &Scenario, stepper: Stepper, opts: TraceOptions) -> Result<DiagnosticTrace> {
    let sigma = scenario_sigma(scenario, &r.grid, &r.params)?;
    let mut field = GeostrophicField::new(
        r.grid.measure(),
        sigma.weights().to_vec(),
        r.params,
        r.solver,
        r.mode,
        r.grid.domain,
    )?;
    let init = SimulationState::initial(sigma, &mut field)?;
    let (_, trace) = trace_run(init, &mut field, &TraceOptions { stepper, ..opts })?;
    Ok(trace)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<PathBuf>) -> CliResult<()> {
    let p = dir.join(name);
    fs::write(&p, bytes)?;
    files.push(p);
    Ok(())
}

/// Runs one study and writes `study_<kind>.tsv` and `.json` (plus per-cell
/// traces) into the output directory. Failed cells are flagged in the table
/// and turn the result into [`Failure::Partial`] after everything is written.
pub fn study(cfg: &RunConfig, kind: StudyKind) -> CliResult<StudyOutcome> {
    let r = cfg.resolve()?;
    cfg.validate_study()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    let threads = thread_count();
    let mut files = Vec::new();
    let m = r.mode.name();
    let eps = r.solver.eps;
    let n = r.grid.len();

    let table = match kind {
        StudyKind::EpsConvergence => {
            let opts = study_options(cfg)?;
            let fine = Grid::unit_square(opts.reference_n)?;
            let h_ref = height_reference(&r.scenario, &fine, opts.loss)?;
            let u_ref = phase_reference(&r.scenario, &fine, &opts.params, opts.loss)?;
            let cells = pool_map(&cfg.study.eps_list, threads, |&e| {
                eps_errors(&r.scenario, e, &opts, &h_ref, &u_ref, &fine)
            });
            let mut t = eps_convergence_table(&r.scenario, &opts);
            for (&e, res) in cfg.study.eps_list.iter().zip(cells) {
                push_eps_errors(&mut t, e, res);
            }
            t.fit_slopes();
            t
        }
        StudyKind::Pseudoconvergence => {
            let opts = study_options(cfg)?;
            pseudoconvergence_study(
                &r.scenario,
                &cfg.study.eps_list,
                cfg.study.reference_eps,
                &cfg.study.times,
                &r.run.stepper,
                r.mode,
                &opts,
            )?
        }
        StudyKind::Energy => {
            let cells: Vec<Stepper> = cfg
                .study
                .steppers
                .iter()
                .flat_map(|&k| cfg.study.dts.iter().map(move |&dt| Stepper { kind: k, dt }))
                .collect();
            let opts = TraceOptions {
                stepper: r.run.stepper,
                horizon: r.run.horizon,
                sample_every: cfg.study.sample_every,
                energy: true,
                ageostrophic: false,
            };
            let traces = pool_map(&cells, threads, |s| traced(&r, &r.scenario, *s, opts));
            let mut t = StudyTable::new("energy");
            t.header.push(("scenario".into(), r.scenario.name().into()));
            t.header.push(("horizon".into(), r.run.horizon.to_string()));
            for (s, res) in cells.iter().zip(traces) {
                let label = format!("{m}/{}/dt={}", stepper_name(s.kind), s.dt);
                match res {
                    Ok(tr) => {
                        for e in &tr.energy {
                            t.push(eps, n, e.t, &label, "normalized_error", e.normalized_error);
                        }
                        if let Some(err) = &tr.error {
                            t.push_failure(eps, n, (tr.steps_taken + 1) as f64 * s.dt, &label, "normalized_error", err);
                        }
                        let name = format!("energy_{}_dt{}.tsv", stepper_name(s.kind), s.dt);
                        write_file(&dir, &name, energy_tsv(&tr.energy).as_bytes(), &mut files)?;
                    }
                    Err(err) => t.push_failure(eps, n, 0.0, &label, "normalized_error", &err),
                }
            }
            t
        }
        StudyKind::Ageostrophic => {
            let names = if cfg.study.scenarios.is_empty() {
                vec![cfg.scenario.name.clone()]
            } else {
                cfg.study.scenarios.clone()
            };
            let scenarios = names
                .iter()
                .map(|s| RunConfig::scenario_named(s, &cfg.scenario))
                .collect::<CliResult<Vec<_>>>()?;
            let opts = TraceOptions {
                stepper: r.run.stepper,
                horizon: r.run.horizon,
                sample_every: cfg.study.sample_every,
                energy: false,
                ageostrophic: true,
            };
            let traces = pool_map(&scenarios, threads, |s| traced(&r, s, r.run.stepper, opts));
            let mut t = StudyTable::new("ageostrophic");
            t.header.push((
                "stepper".into(),
                format!("{} dt={}", stepper_name(r.run.stepper.kind), r.run.stepper.dt),
            ));
            for (s, res) in scenarios.iter().zip(traces) {
                let label = format!("{}/{m}", s.name());
                match res {
                    Ok(tr) => {
                        for &(time, ratio) in &tr.ratio {
                            t.push(eps, n, time, &label, "ratio", ratio);
                        }
                        if let Some(err) = &tr.error {
                            t.push_failure(eps, n, (tr.steps_taken + 1) as f64 * r.run.stepper.dt, &label, "ratio", err);
                        }
                        let name = format!("ratio_{}.tsv", s.name());
                        write_file(&dir, &name, ratio_tsv(&tr.ratio).as_bytes(), &mut files)?;
                    }
                    Err(err) => t.push_failure(eps, n, 0.0, &label, "ratio", &err),
                }
            }
            t
        }
    };

    let mut tsv = Vec::new();
    table.write_tsv(&mut tsv)?;
    write_file(&dir, &format!("study_{}.tsv", kind.name()), &tsv, &mut files)?;
    let json = serde_json::to_vec_pretty(&table).map_err(|e| Failure::Solver(e.to_string()))?;
    write_file(&dir, &format!("study_{}.json", kind.name()), &json, &mut files)?;
    if table.has_failures() {
        let bad = table.rows.iter().filter(|r| r.status != "ok").count();
        return Err(Failure::Partial(format!("{bad} failed rows in {}", dir.display())));
    }
    Ok(StudyOutcome { table, files })
}

fn stepper_name(k: StepperKind) -> &'static str {
    match k {
        StepperKind::Euler => "euler",
        StepperKind::Heun => "heun",
        StepperKind::Rk4 => "rk4",
    }
}
