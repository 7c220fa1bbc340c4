//! `render-data`: flattens a run directory into plot-ready tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::artifact::{read_manifest, read_potentials, read_snapshot, RunStatus};
use crate::error::{CliResult, Failure};

/// Tables copied verbatim when the run has them.
const PASSTHROUGH: [&str; 4] = ["residuals.tsv", "residual_history.tsv", "energy.tsv", "ratio.tsv"];

#[derive(Debug, Clone, Serialize)]
pub struct BundleIndex {
    pub source: PathBuf,
    pub status: RunStatus,
    pub scenario: String,
    pub mode: String,
    pub times: Vec<f64>,
    pub steps: Vec<usize>,
    pub files: Vec<String>,
}

/// Writes `clouds.tsv`, `heights.tsv`, the solver and diagnostic traces and
/// `index.json` into `out`. The run directory is only read.
pub fn render_data(run: &Path, out: &Path) -> CliResult<BundleIndex> {
    let manifest = read_manifest(run)?;
    if manifest.snapshots.is_empty() {
        return Err(Failure::Validation(format!("{} has no snapshots", run.display())));
    }
    fs::create_dir_all(out)?;
    let mut files = Vec::new();

    let mut clouds = String::from("t\tstep_index\tid\ty1\ty2\tx1\tx2\tvx\tvy\tweight\ty1_initial\n");
    let mut heights = String::from("t\tstep_index\tx1\tx2\th\n");
    let mut initial_y1: Vec<f64> = Vec::new();
    for s in &manifest.snapshots {
        let snap = read_snapshot(&run.join(&s.file))?;
        if initial_y1.is_empty() {
            initial_y1 = snap.rows.iter().map(|r| r.y.x1).collect();
        }
        for r in &snap.rows {
            let y0 = initial_y1.get(r.id).copied().unwrap_or(f64::NAN);
            clouds.push_str(&format!(
                "{:e}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\n",
                snap.t, snap.step_index, r.id, r.y.x1, r.y.x2, r.x.x1, r.x.x2, r.velocity.x1, r.velocity.x2, r.weight, y0
            ));
        }
        let pot = read_potentials(&run.join(&s.potentials))?;
        for (p, h) in pot.nodes.iter().zip(&pot.h) {
            heights.push_str(&format!("{:e}\t{}\t{:e}\t{:e}\t{h:e}\n", pot.t, pot.step_index, p.x1, p.x2));
        }
    }
    fs::write(out.join("clouds.tsv"), clouds)?;
    files.push("clouds.tsv".to_string());
    fs::write(out.join("heights.tsv"), heights)?;
    files.push("heights.tsv".to_string());
    for name in PASSTHROUGH {
        if manifest.files.iter().any(|f| f == name) {
            fs::copy(run.join(name), out.join(name))?;
            files.push(name.to_string());
        }
    }

    let index = BundleIndex {
        source: run.to_path_buf(),
        status: manifest.status,
        scenario: manifest.config.scenario.name.clone(),
        mode: manifest.config.mode.name().to_string(),
        times: manifest.snapshots.iter().map(|s| s.t).collect(),
        steps: manifest.snapshots.iter().map(|s| s.step_index).collect(),
        files,
    };
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Failure::Solver(e.to_string()))?;
    fs::write(out.join("index.json"), json)?;
    Ok(index)
}
