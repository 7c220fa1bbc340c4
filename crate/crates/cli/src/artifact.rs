//! Run-directory layout: snapshots, potentials, solver traces and the manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/config.toml
//! <dir>/snapshots/snap_NNNNNN.txt   (+ .bin twin when enabled)
//! <dir>/potentials/pot_NNNNNN.txt
//! <dir>/residuals.tsv
//! <dir>/residual_history.tsv
//! <dir>/energy.tsv, <dir>/ratio.tsv (when enabled)
//! ```
//!
//! Text tables carry `# key value` header lines, then a tab-separated column
//! line, then rows. Floats use the shortest round-trip representation.

use std::fs;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swsg_core::diagnostics::EnergyReport;
use swsg_core::dynamics::{SimulationState, SolveRecord};
use swsg_core::{DualPotentials, Error, Grid, Point2};

use crate::config::RunConfig;
use crate::error::{CliResult, Failure};

pub const MANIFEST: &str = "manifest.json";
pub const RUN_FORMAT: &str = "swsg-run/1";
pub const SNAPSHOT_COLUMNS: [&str; 10] = ["id", "x1", "x2", "weight", "psi", "psi_sym", "vx", "vy", "px1", "px2"];
pub const POTENTIAL_COLUMNS: [&str; 5] = ["x1", "x2", "phi", "h", "u"];
const BINARY_MAGIC: &[u8; 8] = b"SWSGSNP1";

/// Single writer of one run directory; records every file it writes.
#[derive(Debug)]
pub struct RunWriter {
    root: PathBuf,
    files: Vec<String>,
}

impl RunWriter {
    /// Creates `root`. A previous run there (a directory holding a manifest)
    /// is replaced; any other nonempty directory is refused.
    pub fn create(root: &Path) -> CliResult<Self> {
        if root.exists() {
            let nonempty = fs::read_dir(root)?.next().is_some();
            if nonempty {
                if !root.join(MANIFEST).exists() {
                    return Err(Failure::Validation(format!(
                        "invalid output.dir: {} is not empty and holds no run",
                        root.display()
                    )));
                }
                fs::remove_dir_all(root)?;
            }
        }
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Writes `rel` (slash-separated, relative to the root).
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    /// Writes the manifest last; it lists every other file.
    pub fn finish(self, mut manifest: RunManifest) -> io::Result<RunManifest> {
        manifest.files = self.files.clone();
        let json = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
        fs::write(self.root.join(MANIFEST), json)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub step_index: usize,
    pub t: f64,
    pub file: String,
    pub binary: Option<String>,
    pub potentials: String,
}

/// Iteration statistics over every solve of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub solves: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
    pub mean_iterations: f64,
    pub max_final_residual: f64,
    pub all_converged: bool,
}

impl ConvergenceSummary {
    pub fn from_records(records: &[SolveRecord]) -> Self {
        let mut s = Self {
            all_converged: true,
            ..Self::default()
        };
        for r in records {
            s.solves += 1;
            s.total_iterations += r.stats.iterations;
            s.max_iterations = s.max_iterations.max(r.stats.iterations);
            s.max_final_residual = s.max_final_residual.max(r.stats.final_residual);
            s.all_converged &= r.stats.converged;
        }
        if s.solves > 0 {
            s.mean_iterations = s.total_iterations as f64 / s.solves as f64;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// A step failed; the snapshots before it are intact.
    Truncated,
    /// The initial solve failed.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub config: RunConfig,
    /// Unix seconds.
    pub started: f64,
    pub finished: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub steps_taken: usize,
    pub snapshots: Vec<SnapshotEntry>,
    pub convergence: ConvergenceSummary,
    /// Every file of the directory except the manifest itself.
    pub files: Vec<String>,
}

pub fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

pub fn snapshot_name(step: usize) -> String {
    format!("snapshots/snap_{step:06}.txt")
}

pub fn binary_name(step: usize) -> String {
    format!("snapshots/snap_{step:06}.bin")
}

pub fn potentials_name(step: usize) -> String {
    format!("potentials/pot_{step:06}.txt")
}

/// One particle row of a snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotRow {
    pub id: usize,
    /// Geostrophic position.
    pub y: Point2,
    pub weight: f64,
    pub psi: f64,
    /// NaN when the mode has no symmetric potential.
    pub psi_sym: f64,
    pub velocity: Point2,
    /// Diagnostic physical position.
    pub x: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTable {
    pub t: f64,
    pub step_index: usize,
    pub rows: Vec<SnapshotRow>,
}

impl SnapshotTable {
    pub fn from_state(state: &SimulationState, physical: &[Point2]) -> Self {
        let sym = state.pots.psi_sym.as_deref();
        let rows = (0..state.particles.len())
            .map(|i| SnapshotRow {
                id: i,
                y: state.particles.points()[i],
                weight: state.particles.weights()[i],
                psi: state.pots.psi[i],
                psi_sym: sym.map_or(f64::NAN, |s| s[i]),
                velocity: state.velocity[i],
                x: physical[i],
            })
            .collect();
        Self {
            t: state.t,
            step_index: state.step_index,
            rows,
        }
    }

    fn row_values(r: &SnapshotRow) -> [f64; 10] {
        [
            r.id as f64,
            r.y.x1,
            r.y.x2,
            r.weight,
            r.psi,
            r.psi_sym,
            r.velocity.x1,
            r.velocity.x2,
            r.x.x1,
            r.x.x2,
        ]
    }

    fn from_values(v: &[f64]) -> SnapshotRow {
        SnapshotRow {
            id: v[0] as usize,
            y: Point2::new(v[1], v[2]),
            weight: v[3],
            psi: v[4],
            psi_sym: v[5],
            velocity: Point2::new(v[6], v[7]),
            x: Point2::new(v[8], v[9]),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        header(&mut out, self.t, self.step_index, &SNAPSHOT_COLUMNS);
        for r in &self.rows {
            row(&mut out, &Self::row_values(r));
        }
        out
    }

    pub fn read_text<R: BufRead>(input: R) -> CliResult<Self> {
        let t = Table::parse(input, &SNAPSHOT_COLUMNS)?;
        Ok(Self {
            t: t.t,
            step_index: t.step_index,
            rows: t.rows.iter().map(|v| Self::from_values(v)).collect(),
        })
    }

    /// Little-endian twin: magic, column line, `t`, step, row count, rows.
    pub fn to_binary(&self) -> Vec<u8> {
        let names = SNAPSHOT_COLUMNS.join("\t");
        let mut out = Vec::with_capacity(64 + self.rows.len() * 80);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(names.len() as u32).to_le_bytes());
        out.extend_from_slice(names.as_bytes());
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.step_index as u64).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for r in &self.rows {
            for v in Self::row_values(r) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn read_binary<R: Read>(mut input: R) -> CliResult<Self> {
        let bad = |m: &str| Failure::Validation(format!("binary snapshot: {m}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let mut names = vec![0u8; u32::from_le_bytes(b4) as usize];
        input.read_exact(&mut names)?;
        if names != SNAPSHOT_COLUMNS.join("\t").as_bytes() {
            return Err(bad("unexpected columns"));
        }
        let mut b8 = [0u8; 8];
        let mut next = |input: &mut R| -> io::Result<[u8; 8]> {
            input.read_exact(&mut b8)?;
            Ok(b8)
        };
        let t = f64::from_le_bytes(next(&mut input)?);
        let step_index = u64::from_le_bytes(next(&mut input)?) as usize;
        let n = u64::from_le_bytes(next(&mut input)?) as usize;
        let mut rows = Vec::with_capacity(n);
        let mut v = [0.0; 10];
        for _ in 0..n {
            for x in v.iter_mut() {
                *x = f64::from_le_bytes(next(&mut input)?);
            }
            rows.push(Self::from_values(&v));
        }
        Ok(Self { t, step_index, rows })
    }
}

/// Grid potentials and heights of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTable {
    pub t: f64,
    pub step_index: usize,
    pub nodes: Vec<Point2>,
    pub phi: Vec<f64>,
    pub h: Vec<f64>,
    /// NaN outside the saddle mode.
    pub u: Vec<f64>,
}

impl PotentialTable {
    pub fn from_state(state: &SimulationState, grid: &Grid, h: Vec<f64>) -> Self {
        let n = grid.len();
        Self {
            t: state.t,
            step_index: state.step_index,
            nodes: grid.nodes(),
            phi: state.pots.phi.clone(),
            h,
            u: state.pots.u.clone().unwrap_or_else(|| vec![f64::NAN; n]),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        header(&mut out, self.t, self.step_index, &POTENTIAL_COLUMNS);
        for k in 0..self.nodes.len() {
            row(&mut out, &[self.nodes[k].x1, self.nodes[k].x2, self.phi[k], self.h[k], self.u[k]]);
        }
        out
    }

    pub fn read_text<R: BufRead>(input: R) -> CliResult<Self> {
        let t = Table::parse(input, &POTENTIAL_COLUMNS)?;
        let col = |c: usize| t.rows.iter().map(|r| r[c]).collect::<Vec<f64>>();
        Ok(Self {
            t: t.t,
            step_index: t.step_index,
            nodes: t.rows.iter().map(|r| Point2::new(r[0], r[1])).collect(),
            phi: col(2),
            h: col(3),
            u: col(4),
        })
    }
}

/// Potentials of a snapshot pair, for warm-starting a later solve.
pub fn potentials_from(snap: &SnapshotTable, pot: &PotentialTable) -> DualPotentials {
    let psi_sym: Vec<f64> = snap.rows.iter().map(|r| r.psi_sym).collect();
    DualPotentials {
        phi: pot.phi.clone(),
        psi: snap.rows.iter().map(|r| r.psi).collect(),
        psi_sym: psi_sym.iter().all(|v| v.is_finite()).then_some(psi_sym),
        u: pot.u.iter().all(|v| v.is_finite()).then(|| pot.u.clone()),
    }
}

fn header(out: &mut String, t: f64, step: usize, cols: &[&str]) {
    out.push_str(&format!("# t {t:e}\n# step_index {step}\n"));
    out.push_str(&cols.join("\t"));
    out.push('\n');
}

fn row(out: &mut String, vals: &[f64]) {
    let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
    out.push_str(&line.join("\t"));
    out.push('\n');
}

struct Table {
    t: f64,
    step_index: usize,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn parse<R: BufRead>(input: R, cols: &[&str]) -> CliResult<Self> {
        let parse_err = |line: usize, m: String| Failure::Validation(format!("line {line}: {m}"));
        let (mut t, mut step, mut seen_cols) = (None, None, false);
        let mut rows = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let mut it = h.split_whitespace();
                match (it.next(), it.next()) {
                    (Some("t"), Some(v)) => t = Some(v.parse::<f64>().map_err(|e| parse_err(k + 1, e.to_string()))?),
                    (Some("step_index"), Some(v)) => {
                        step = Some(v.parse::<usize>().map_err(|e| parse_err(k + 1, e.to_string()))?)
                    }
                    _ => {}
                }
                continue;
            }
            if !seen_cols {
                let got: Vec<&str> = line.split_whitespace().collect();
                if got != cols {
                    return Err(parse_err(k + 1, format!("expected columns {cols:?}, found {got:?}")));
                }
                seen_cols = true;
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| parse_err(k + 1, e.to_string()))?;
            if vals.len() != cols.len() {
                return Err(parse_err(k + 1, format!("expected {} values, found {}", cols.len(), vals.len())));
            }
            rows.push(vals);
        }
        match (t, step) {
            (Some(t), Some(step_index)) => Ok(Self { t, step_index, rows }),
            _ => Err(Failure::Validation("table header lacks t or step_index".into())),
        }
    }
}

pub fn read_snapshot(path: &Path) -> CliResult<SnapshotTable> {
    if path.extension().is_some_and(|e| e == "bin") {
        SnapshotTable::read_binary(BufReader::new(fs::File::open(path)?))
    } else {
        SnapshotTable::read_text(BufReader::new(fs::File::open(path)?))
    }
}

pub fn read_potentials(path: &Path) -> CliResult<PotentialTable> {
    PotentialTable::read_text(BufReader::new(fs::File::open(path)?))
}

pub const RESIDUAL_COLUMNS: [&str; 7] = ["step_index", "stage", "t", "solver", "iterations", "final_residual", "converged"];

/// One line per solve (and per symmetric solve).
pub fn residuals_tsv(records: &[SolveRecord]) -> String {
    let mut out = RESIDUAL_COLUMNS.join("\t") + "\n";
    let mut line = |r: &SolveRecord, solver: &str, s: &swsg_core::SolveStats| {
        out.push_str(&format!(
            "{}\t{}\t{:e}\t{solver}\t{}\t{:e}\t{}\n",
            r.step_index, r.stage, r.t, s.iterations, s.final_residual, s.converged
        ));
    };
    for r in records {
        line(r, "main", &r.stats);
        if let Some(s) = &r.sym_stats {
            line(r, "symmetric", s);
        }
    }
    out
}

/// Long format: one line per iteration of the main solves.
pub fn residual_history_tsv(records: &[SolveRecord]) -> String {
    let mut out = String::from("step_index\tstage\tt\titeration\tresidual\n");
    for r in records {
        for (k, v) in r.stats.residual_history.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{:e}\t{}\t{v:e}\n", r.step_index, r.stage, r.t, k + 1));
        }
    }
    out
}

pub const ENERGY_COLUMNS: [&str; 8] = [
    "t",
    "kinetic",
    "potential",
    "total",
    "floor",
    "normalized_error",
    "entropy",
    "mean_height",
];

pub fn energy_tsv(reports: &[EnergyReport]) -> String {
    let mut out = ENERGY_COLUMNS.join("\t") + "\n";
    for e in reports {
        out.push_str(&format!(
            "{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\n",
            e.t, e.kinetic, e.potential, e.total, e.floor, e.normalized_error, e.entropy, e.mean_height
        ));
    }
    out
}

pub fn ratio_tsv(ratio: &[(f64, f64)]) -> String {
    let mut out = String::from("t\tratio\n");
    for (t, r) in ratio {
        out.push_str(&format!("{t:e}\t{r:e}\n"));
    }
    out
}

/// Reads a headed tab-separated numeric table (the energy and ratio files).
pub fn read_numeric_tsv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let cols: Vec<String> = lines
        .next()
        .ok_or_else(|| Failure::Validation(format!("{}: empty table", path.display())))?
        .split('\t')
        .map(String::from)
        .collect();
    let rows = lines
        .map(|l| {
            l.split('\t')
                .map(|v| v.parse::<f64>().map_err(|e| Failure::from(Error::Parse(e.to_string()))))
                .collect::<CliResult<Vec<f64>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((cols, rows))
}

pub fn unix_seconds() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> SnapshotTable {
        SnapshotTable {
            t: 0.30000000000000004,
            step_index: 3,
            rows: vec![
                SnapshotRow {
                    id: 0,
                    y: Point2::new(0.1, 0.9),
                    weight: 1.0 / 3.0,
                    psi: -1e-300,
                    psi_sym: f64::NAN,
                    velocity: Point2::new(1.5e-17, -2.0),
                    x: Point2::new(0.11, 0.89),
                },
                SnapshotRow {
                    id: 1,
                    y: Point2::new(0.7, 0.2),
                    weight: 2.0 / 3.0,
                    psi: 0.25,
                    psi_sym: 0.125,
                    velocity: Point2::new(0.0, 1.0),
                    x: Point2::new(0.69, 0.21),
                },
            ],
        }
    }

    fn same(a: &SnapshotTable, b: &SnapshotTable) {
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        assert_eq!(a.step_index, b.step_index);
        for (r, s) in a.rows.iter().zip(&b.rows) {
            for (x, y) in SnapshotTable::row_values(r).iter().zip(SnapshotTable::row_values(s)) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
    }

    #[test]
    fn text_snapshot_round_trips_bitwise() {
        let t = table();
        let back = SnapshotTable::read_text(t.to_text().as_bytes()).unwrap();
        same(&t, &back);
    }

    #[test]
    fn binary_snapshot_round_trips_bitwise() {
        let t = table();
        let back = SnapshotTable::read_binary(&t.to_binary()[..]).unwrap();
        same(&t, &back);
    }

    #[test]
    fn wrong_columns_are_rejected() {
        let text = "# t 0\n# step_index 0\nx1\tx2\n1\t2\n";
        assert!(SnapshotTable::read_text(text.as_bytes()).is_err());
    }

    #[test]
    fn potentials_round_trip() {
        let p = PotentialTable {
            t: 1.0,
            step_index: 10,
            nodes: vec![Point2::new(0.25, 0.75)],
            phi: vec![-0.1],
            h: vec![1.0],
            u: vec![f64::NAN],
        };
        let back = PotentialTable::read_text(p.to_text().as_bytes()).unwrap();
        assert_eq!(back.phi, p.phi);
        assert!(back.u[0].is_nan());
        let snap = table();
        let pots = potentials_from(&snap, &back);
        assert!(pots.psi_sym.is_none() && pots.u.is_none());
        assert_eq!(pots.psi, vec![-1e-300, 0.25]);
    }

    #[test]
    fn refuses_foreign_directories() {
        let dir = std::env::temp_dir().join(format!("swsg-artifact-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("keep.txt"), "x").unwrap();
        assert!(matches!(RunWriter::create(&dir), Err(Failure::Validation(_))));
        fs::remove_dir_all(&dir).unwrap();
    }
}
