use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swsg_cli::study::{study, StudyKind};
use swsg_cli::verify::{verify, Fault};
use swsg_cli::{render, simulate, CliResult, Failure, Overrides, RunConfig};
use swsg_core::dynamics::{BiasMode, StepperKind};

#[derive(Parser)]
#[command(name = "swsg", version, about = "Entropic transport solver for the shallow-water semi-geostrophic equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation into a run directory.
    Simulate(RunArgs),
    /// Run a study: eps_convergence, pseudoconvergence, energy or ageostrophic.
    Study {
        kind: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the small-instance oracle checks and print a JSON report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Export a run directory as plot-ready tables.
    RenderData {
        run: PathBuf,
        /// Defaults to `<run>/render`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    f: Option<f64>,
    #[arg(long)]
    g: Option<f64>,
    /// Grid side (n x n nodes).
    #[arg(long, short)]
    n: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Disable warm starts.
    #[arg(long)]
    cold_start: bool,
    #[arg(long)]
    stepper: Option<StepperKind>,
    #[arg(long)]
    dt: Option<f64>,
    /// Final time.
    #[arg(long, short = 'T')]
    horizon: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    mode: Option<BiasMode>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write binary snapshots.
    #[arg(long)]
    binary: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Overrides {
            scenario: self.scenario.clone(),
            f: self.f,
            g: self.g,
            n: self.n,
            eps: self.eps,
            tol: self.tol,
            max_iters: self.max_iters,
            cold_start: self.cold_start,
            stepper: self.stepper,
            dt: self.dt,
            horizon: self.horizon,
            snapshot_every: self.snapshot_every,
            mode: self.mode,
            out: self.out.clone(),
            binary: self.binary,
            seed: self.seed,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(args) => {
            let out = simulate::simulate(&args.config()?)?;
            println!(
                "{}: {} snapshots, {} steps",
                out.dir.display(),
                out.manifest.snapshots.len(),
                out.manifest.steps_taken
            );
        }
        Command::Study { kind, run } => {
            let kind: StudyKind = kind.parse()?;
            let out = study(&run.config()?, kind)?;
            for f in &out.table.fits {
                println!("slope {} {} t={}: {:.4}", f.mode, f.metric, f.t, f.slope);
            }
            for p in &out.files {
                println!("wrote {}", p.display());
            }
        }
        Command::Verify {
            seed,
            report,
            inject_fault,
        } => {
            let r = verify(seed, inject_fault);
            let json = serde_json::to_string_pretty(&r).map_err(|e| Failure::Solver(e.to_string()))?;
            println!("{json}");
            if let Some(p) = report {
                std::fs::write(p, &json)?;
            }
            if !r.passed {
                let bad: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(Failure::Solver(format!("failed checks: {}", bad.join(", "))));
            }
        }
        Command::RenderData { run, out } => {
            let out = out.unwrap_or_else(|| Path::new(&run).join("render"));
            let idx = render::render_data(&run, &out)?;
            println!("{}: {} times, {} files", out.display(), idx.times.len(), idx.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
