//! Run directories: CSV tables, snapshots, the JSON report and the config echo.
//!
//! Numbers are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dynbc_core::estimates::{BoundConstants, CheckRecord, EstimateReport, FluxLedger};
use dynbc_core::stepper::StepRecord;
use dynbc_core::{Geometry, History, Operators};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const FORCING_FILE: &str = "forcing.csv";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "DYNBC_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Inconsistent { path: PathBuf, message: String },
}

pub type Result<T, E = OutputError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, text).map_err(io(path))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

/// Shortest round-trip text of `x`; exponent form outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// `dir` unless it is relative and the output root variable is set.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckJson {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub status: String,
    pub structural: bool,
}

impl From<&CheckRecord<f64>> for CheckJson {
    fn from(c: &CheckRecord<f64>) -> Self {
        Self {
            name: c.name.clone(),
            measured: c.measured,
            bound: c.bound,
            margin: c.margin,
            status: c.status.label().to_string(),
            structural: c.structural,
        }
    }
}

/// Serialized [`EstimateReport`] with the constants and run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m3_measured: f64,
    pub m4: f64,
    pub m5: f64,
    pub lambda_bar: f64,
    pub c_p: f64,
    pub c_emb: f64,
    pub mass_drift_max: f64,
    pub checks: Vec<CheckJson>,
    pub all_structural_pass: bool,
    pub lambda: f64,
    pub tau: f64,
    pub horizon: f64,
    pub steps: usize,
    pub mu1: f64,
    pub c_star: f64,
    pub c0: f64,
    pub c0_prime: f64,
    pub m0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub phi0: f64,
    pub forcing_h2: f64,
    pub initial_mean: f64,
    pub mean_shift: f64,
    pub discarded_forcing_mean: f64,
    pub newton_iters_max: usize,
    pub residual_max: f64,
    pub initial_seed: Option<u64>,
    pub forcing_seed: Option<u64>,
}

impl RunReport {
    pub fn new(
        report: &EstimateReport<f64>,
        ledger: &FluxLedger<f64>,
        traj: &History,
        mu1: f64,
        config: &RunConfig,
    ) -> Self {
        let c: &BoundConstants<f64> = &report.constants;
        Self {
            m1: c.m1,
            m2: c.m2,
            m3: c.m3,
            m3_measured: ledger.m3_measured,
            m4: c.m4,
            m5: c.m5,
            lambda_bar: c.lambda_bar,
            c_p: c.c_p,
            c_emb: c.c_emb,
            mass_drift_max: report.mass_drift_max,
            checks: report.checks.iter().map(CheckJson::from).collect(),
            all_structural_pass: report.all_structural_pass(),
            lambda: traj.lambda,
            tau: traj.tau,
            horizon: c.horizon,
            steps: traj.steps(),
            mu1,
            c_star: c.c_star,
            c0: c.c0,
            c0_prime: c.c0_prime,
            m0: c.m0,
            c1: c.c1,
            c2: c.c2,
            c3: c.c3,
            c4: c.c4,
            phi0: c.phi0,
            forcing_h2: c.forcing_h2,
            initial_mean: c.initial_mean,
            mean_shift: traj.mean_shift,
            discarded_forcing_mean: traj.discarded_forcing_mean,
            newton_iters_max: traj.records.iter().map(|r| r.newton_iters).max().unwrap_or(0),
            residual_max: traj.records.iter().map(|r| r.residual).fold(0.0, f64::max),
            initial_seed: config.initial.seed,
            forcing_seed: config.forcing.seed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn structural_failures(&self) -> Vec<&CheckJson> {
        self.checks
            .iter()
            .filter(|c| c.structural && c.status == "FAIL")
            .collect()
    }
}

/// Human-readable check table.
pub fn check_table(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:<15} {:>14} {:>14} {:>14}", "check", "status", "measured", "bound", "margin");
    for c in &report.checks {
        let status = if c.structural { c.status.clone() } else { format!("{} (info)", c.status) };
        let _ = writeln!(
            out,
            "{:<24} {:<15} {:>14.6e} {:>14.6e} {:>14.6e}",
            c.name, status, c.measured, c.bound, c.margin
        );
    }
    out
}

pub fn diagnostics_csv(records: &[StepRecord<f64>]) -> String {
    let mut out = String::from("step,t,mass,phi_lambda,newton_iters,residual,du_dualnorm,xi_mean\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            num(r.t),
            num(r.mass),
            num(r.phi_lambda),
            r.newton_iters,
            num(r.residual),
            num(r.du_dualnorm),
            num(r.xi_mean)
        );
    }
    out
}

pub fn trajectory_csv(traj: &History) -> String {
    let n = traj.fields.first().map_or(0, Vec::len);
    let mut out = String::with_capacity(64 * n * traj.fields.len());
    let _ = writeln!(out, "# dynbc trajectory");
    let _ = writeln!(
        out,
        "# lambda={} tau={} newton_tol={} mean_shift={} discarded_forcing_mean={} nodes={} steps={}",
        num(traj.lambda),
        num(traj.tau),
        num(traj.newton_tol),
        num(traj.mean_shift),
        num(traj.discarded_forcing_mean),
        n,
        traj.steps()
    );
    out.push_str("step,t,node,u,xi\n");
    for (s, (u, xi)) in traj.fields.iter().zip(&traj.fluxes).enumerate() {
        let t = num(traj.times[s]);
        for i in 0..u.len() {
            let _ = writeln!(out, "{s},{t},{i},{},{}", num(u[i]), num(xi[i]));
        }
    }
    out
}

pub fn forcing_csv(traj: &History) -> String {
    let n = traj.fields.first().map_or(0, Vec::len);
    let mut out = String::new();
    let _ = writeln!(out, "# dynbc forcing nodes={} steps={}", n, traj.steps());
    out.push_str("step,t,node,f\n");
    for (k, f) in traj.forcing.iter().enumerate() {
        let t = num(traj.times[k + 1]);
        for (i, v) in f.iter().enumerate() {
            let _ = writeln!(out, "{},{t},{i},{}", k + 1, num(*v));
        }
    }
    out
}

fn geometry_line(g: Geometry<f64>) -> String {
    match g {
        Geometry::Strip { lx, nx, ny } => format!("# geometry strip lx={} nx={nx} ny={ny}", num(lx)),
        Geometry::Interval { n } => format!("# geometry interval n={n}"),
    }
}

/// Nodal indices in the order of the bulk and surface vectors of a field.
pub fn node_order(ops: &Operators) -> (Vec<usize>, Vec<usize>) {
    let index = ops.from_nodal(&(0..ops.n_nodes()).map(|i| i as f64).collect::<Vec<_>>());
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as usize).collect();
    (cast(index.bulk), cast(index.surface))
}

/// Bulk block `x,y,u` then boundary block `x,row,u_gamma`, separated by a blank line.
pub fn snapshot_csv(ops: &Operators, step: usize, t: f64, u: &[f64]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# dynbc snapshot step={step} t={}", num(t));
    let _ = writeln!(out, "{}", geometry_line(ops.geometry()));
    let (bulk, surface) = node_order(ops);
    out.push_str("x,y,u\n");
    for &i in &bulk {
        let p = ops.node_position(i);
        let _ = writeln!(out, "{},{},{}", num(p.x), num(p.y), num(u[i]));
    }
    out.push_str("\nx,row,u_gamma\n");
    for &i in &surface {
        let p = ops.node_position(i);
        let _ = writeln!(out, "{},{},{}", num(p.x), p.row, num(u[i]));
    }
    out
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> OutputError {
    OutputError::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| format_err(path, line, format!("cannot parse {field:?}")))
}

/// `key=value` pairs of a `#` comment line.
fn comment_pairs(line: &str) -> Vec<(&str, &str)> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|w| w.split_once('='))
        .collect()
}

/// Data rows of a CSV file with the expected header; comments are returned separately.
fn csv_rows<'t>(path: &Path, text: &'t str, header: &str) -> Result<(Vec<&'t str>, Vec<(usize, Vec<&'t str>)>)> {
    let mut comments = Vec::new();
    let mut rows = Vec::new();
    let mut seen_header = false;
    let width = header.split(',').count();
    for (k, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            comments.push(line);
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line.trim() != header {
                return Err(format_err(path, k + 1, format!("expected header {header:?}")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(format_err(path, k + 1, format!("expected {width} columns, found {}", fields.len())));
        }
        rows.push((k + 1, fields));
    }
    if !seen_header {
        return Err(format_err(path, 1, format!("missing header {header:?}")));
    }
    Ok((comments, rows))
}

/// Stored run: everything needed to rebuild the trajectory records.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRun {
    pub lambda: f64,
    pub tau: f64,
    pub newton_tol: f64,
    pub mean_shift: f64,
    pub discarded_forcing_mean: f64,
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
    pub fluxes: Vec<Vec<f64>>,
    pub forcing: Vec<Vec<f64>>,
    pub newton_iters: Vec<usize>,
    pub residuals: Vec<f64>,
}

pub fn parse_trajectory(path: &Path, text: &str) -> Result<StoredRun> {
    let (comments, rows) = csv_rows(path, text, "step,t,node,u,xi")?;
    let meta: Vec<(&str, &str)> = comments.iter().flat_map(|c| comment_pairs(c)).collect();
    let get = |key: &str| -> Result<&str> {
        meta.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| format_err(path, 1, format!("metadata {key} missing")))
    };
    let nodes: usize = parse_num(path, 2, get("nodes")?)?;
    let steps: usize = parse_num(path, 2, get("steps")?)?;
    if rows.len() != nodes * (steps + 1) {
        return Err(format_err(
            path,
            0,
            format!("expected {} rows for {nodes} nodes and {steps} steps, found {}", nodes * (steps + 1), rows.len()),
        ));
    }
    let mut run = StoredRun {
        lambda: parse_num(path, 2, get("lambda")?)?,
        tau: parse_num(path, 2, get("tau")?)?,
        newton_tol: parse_num(path, 2, get("newton_tol")?)?,
        mean_shift: parse_num(path, 2, get("mean_shift")?)?,
        discarded_forcing_mean: parse_num(path, 2, get("discarded_forcing_mean")?)?,
        times: Vec::with_capacity(steps + 1),
        fields: Vec::with_capacity(steps + 1),
        fluxes: Vec::with_capacity(steps + 1),
        forcing: Vec::new(),
        newton_iters: Vec::new(),
        residuals: Vec::new(),
    };
    for (k, chunk) in rows.chunks(nodes).enumerate() {
        let mut u = Vec::with_capacity(nodes);
        let mut xi = Vec::with_capacity(nodes);
        for (i, (line, f)) in chunk.iter().enumerate() {
            let step: usize = parse_num(path, *line, f[0])?;
            let node: usize = parse_num(path, *line, f[2])?;
            if step != k || node != i {
                return Err(format_err(path, *line, format!("expected step {k}, node {i}")));
            }
            if i == 0 {
                run.times.push(parse_num(path, *line, f[1])?);
            }
            u.push(parse_num(path, *line, f[3])?);
            xi.push(parse_num(path, *line, f[4])?);
        }
        run.fields.push(u);
        run.fluxes.push(xi);
    }
    Ok(run)
}

/// Per-step forcing samples and their times `t_1 ..= t_N`.
pub fn parse_forcing(path: &Path, text: &str) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (comments, rows) = csv_rows(path, text, "step,t,node,f")?;
    let meta: Vec<(&str, &str)> = comments.iter().flat_map(|c| comment_pairs(c)).collect();
    let nodes: usize = meta
        .iter()
        .find(|(k, _)| *k == "nodes")
        .map(|(_, v)| parse_num(path, 1, v))
        .transpose()?
        .ok_or_else(|| format_err(path, 1, "metadata nodes missing"))?;
    if nodes == 0 || rows.len() % nodes != 0 {
        return Err(format_err(path, 0, format!("{} rows do not fill steps of {nodes} nodes", rows.len())));
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (k, chunk) in rows.chunks(nodes).enumerate() {
        let mut f = Vec::with_capacity(nodes);
        for (i, (line, cols)) in chunk.iter().enumerate() {
            let step: usize = parse_num(path, *line, cols[0])?;
            let node: usize = parse_num(path, *line, cols[2])?;
            if step != k + 1 || node != i {
                return Err(format_err(path, *line, format!("expected step {}, node {i}", k + 1)));
            }
            if i == 0 {
                times.push(parse_num(path, *line, cols[1])?);
            }
            f.push(parse_num(path, *line, cols[3])?);
        }
        samples.push(f);
    }
    Ok((times, samples))
}

/// Newton iteration counts and residuals per stored field.
pub fn parse_diagnostics(path: &Path, text: &str) -> Result<Vec<(usize, f64)>> {
    let (_, rows) = csv_rows(path, text, "step,t,mass,phi_lambda,newton_iters,residual,du_dualnorm,xi_mean")?;
    rows.iter()
        .enumerate()
        .map(|(k, (line, f))| {
            let step: usize = parse_num(path, *line, f[0])?;
            if step != k {
                return Err(format_err(path, *line, format!("expected step {k}")));
            }
            Ok((parse_num(path, *line, f[4])?, parse_num(path, *line, f[5])?))
        })
        .collect()
}

/// Nodal field from a snapshot written for the same geometry.
pub fn parse_snapshot(path: &Path, text: &str, ops: &Operators) -> Result<Vec<f64>> {
    let expect = geometry_line(ops.geometry());
    if !text.lines().any(|l| l.trim() == expect) {
        return Err(OutputError::Inconsistent {
            path: path.to_path_buf(),
            message: format!("snapshot geometry differs from the configured one ({})", expect.trim_start_matches("# ")),
        });
    }
    let (bulk, surface) = node_order(ops);
    let mut u = vec![0.0; ops.n_nodes()];
    let mut block: Option<(&[usize], usize)> = None;
    let mut filled = [0usize; 2];
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        match line {
            "x,y,u" => {
                block = Some((&bulk, 0));
                continue;
            }
            "x,row,u_gamma" => {
                block = Some((&surface, 1));
                continue;
            }
            _ => {}
        }
        let Some((nodes, which)) = block else {
            return Err(format_err(path, k + 1, "data before a block header"));
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(format_err(path, k + 1, "expected 3 columns"));
        }
        let slot = filled[which];
        let Some(&node) = nodes.get(slot) else {
            return Err(format_err(path, k + 1, "more rows than nodes"));
        };
        let x: f64 = parse_num(path, k + 1, cols[0])?;
        if (x - ops.node_position(node).x).abs() > 1e-12 {
            return Err(format_err(path, k + 1, format!("x = {x} does not match node {node}")));
        }
        u[node] = parse_num(path, k + 1, cols[2])?;
        filled[which] += 1;
    }
    if filled != [bulk.len(), surface.len()] {
        return Err(OutputError::Inconsistent {
            path: path.to_path_buf(),
            message: format!(
                "found {} bulk and {} boundary values, expected {} and {}",
                filled[0],
                filled[1],
                bulk.len(),
                surface.len()
            ),
        });
    }
    Ok(u)
}

/// Writes every artifact of one run into `dir`.
pub fn write_run(
    dir: &Path,
    config: &RunConfig,
    traj: &History,
    report: &RunReport,
    ops: &Operators,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_file(&dir.join(CONFIG_FILE), &config.to_toml())?;
    if config.output.json() {
        write_file(&dir.join(REPORT_FILE), &report.to_json())?;
    }
    if config.output.csv() {
        write_file(&dir.join(DIAGNOSTICS_FILE), &diagnostics_csv(&traj.records))?;
        write_file(&dir.join(TRAJECTORY_FILE), &trajectory_csv(traj))?;
        write_file(&dir.join(FORCING_FILE), &forcing_csv(traj))?;
        let stride = config.output.snapshot_stride;
        if stride > 0 {
            let snaps = dir.join(SNAPSHOT_DIR);
            for (n, u) in traj.fields.iter().enumerate() {
                if n % stride == 0 || n == traj.steps() {
                    let name = format!("step_{n:06}.csv");
                    write_file(&snaps.join(name), &snapshot_csv(ops, n, traj.times[n], u))?;
                }
            }
        }
    }
    Ok(())
}

/// Reads the config echo and the stored trajectory of a run directory.
pub fn read_run(dir: &Path) -> Result<(String, StoredRun)> {
    let config_text = read_file(&dir.join(CONFIG_FILE))?;
    let traj_path = dir.join(TRAJECTORY_FILE);
    let mut run = parse_trajectory(&traj_path, &read_file(&traj_path)?)?;
    let forcing_path = dir.join(FORCING_FILE);
    let (times, forcing) = parse_forcing(&forcing_path, &read_file(&forcing_path)?)?;
    if times.as_slice() != &run.times[1..] || forcing.iter().any(|f| f.len() != run.fields[0].len()) {
        return Err(OutputError::Inconsistent {
            path: forcing_path,
            message: "forcing steps do not match the trajectory".into(),
        });
    }
    run.forcing = forcing;
    let diag_path = dir.join(DIAGNOSTICS_FILE);
    let diag = parse_diagnostics(&diag_path, &read_file(&diag_path)?)?;
    if diag.len() != run.fields.len() {
        return Err(OutputError::Inconsistent {
            path: diag_path,
            message: format!("{} diagnostics rows for {} fields", diag.len(), run.fields.len()),
        });
    }
    run.newton_iters = diag.iter().map(|d| d.0).collect();
    run.residuals = diag.iter().map(|d| d.1).collect();
    Ok((config_text, run))
}
