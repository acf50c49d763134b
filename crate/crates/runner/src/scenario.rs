//! Scenarios: single runs, stored-run verification, lambda sweeps,
//! contraction pairs, convergence studies and graph tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::thread;

use dynbc_core::dual::{mean_zero_tolerance, DualError};
use dynbc_core::estimates::{
    check_contraction, compute_constants, flux_ledger, lambda_cauchy_study, verify_trajectory, CheckRecord,
    EstimateError, LambdaTable,
};
use dynbc_core::stepper::{phi_lambda_nodal, run, run_mean_shifted, time_grid, Forcing, StepError, StepRecord};
use dynbc_core::{
    build_operators, DiscreteOperators, DualSolverContext, Field, Geometry, History, Operators, Pair,
    PoincareConstants, ProblemData, StepParams,
};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::manufactured::{ManufacturedCase, ManufacturedError};
use crate::output::{self, num, OutputError, RunReport, StoredRun};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("discretization: {0}")]
    Discretization(#[from] dynbc_core::discretization::DiscretizationError),
    #[error("dual solve: {0}")]
    Dual(#[from] DualError),
    #[error("time stepping: {0}")]
    Step(#[from] StepError),
    #[error("estimates: {0}")]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Manufactured(#[from] ManufacturedError),
    #[error("{0}")]
    Setup(String),
}

pub type Result<T, E = ScenarioError> = std::result::Result<T, E>;

/// Uniform values in `[-1, 1]` at every node, then projected to mean zero.
pub fn random_mean_zero(ops: &Operators, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..ops.n_nodes()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    ops.project_nodal(&mut v);
    v
}

/// Forcing of a configured problem.
#[derive(Debug, Clone, PartialEq)]
pub enum ForcingSource {
    Zero,
    /// `amplitude sin(2 pi frequency t) g(x)` with a fixed random mean-zero `g`.
    Random { field: Vec<f64>, amplitude: f64, frequency: f64 },
    Manufactured(ManufacturedCase),
    /// Samples at the step end times `t_1 ..= t_N`.
    File { times: Vec<f64>, samples: Vec<Vec<f64>> },
}

pub struct ConfiguredForcing<'a> {
    pub source: &'a ForcingSource,
    pub ops: &'a Operators,
}

impl Forcing<f64> for ConfiguredForcing<'_> {
    fn sample(&self, t: f64) -> Field {
        let ops = self.ops;
        match self.source {
            ForcingSource::Zero => ops.zeros(),
            ForcingSource::Random { field, amplitude, frequency } => {
                let s = amplitude * (2.0 * std::f64::consts::PI * frequency * t).sin();
                ops.from_nodal(&field.iter().map(|g| s * g).collect::<Vec<_>>())
            }
            ForcingSource::Manufactured(case) => case.forcing_at(ops, t),
            ForcingSource::File { times, samples } => {
                let k = times
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                    .map_or(0, |(k, _)| k);
                ops.from_nodal(&samples[k])
            }
        }
    }

    fn is_zero(&self) -> bool {
        match self.source {
            ForcingSource::Zero => true,
            ForcingSource::Manufactured(c) => c.is_free(),
            _ => false,
        }
    }
}

/// A validated config with its operators, graphs, initial datum and forcing.
pub struct Problem {
    pub config: RunConfig,
    pub ops: Operators,
    pub graphs: Pair,
    pub initial: Vec<f64>,
    pub forcing: ForcingSource,
}

impl Problem {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let ops = build_operators(config.geometry())?;
        let graphs = config.graphs().map_err(ScenarioError::Setup)?;
        let initial = initial_field(&config, &ops)?;
        let forcing = forcing_source(&config, &ops)?;
        Ok(Self {
            config,
            ops,
            graphs,
            initial,
            forcing,
        })
    }

    pub fn params(&self) -> StepParams<f64> {
        let c = &self.config;
        StepParams {
            newton_tol: c.solver.newton_tol,
            newton_max_iter: c.solver.max_iter,
            project_forcing: c.solver.project_forcing,
            ..StepParams::new(c.time.tau, c.time.lambda)
        }
    }

    pub fn context(&self) -> Result<DualSolverContext<'_, f64>> {
        context_for(&self.ops, &self.config)
    }

    /// Solves with the configured lambda; nonzero means go through the shifted problem if enabled.
    pub fn solve(&self, ctx: &DualSolverContext<'_, f64>, lambda: f64) -> Result<History> {
        let forcing = ConfiguredForcing {
            source: &self.forcing,
            ops: &self.ops,
        };
        let data = ProblemData {
            graphs: self.graphs.clone(),
            initial: self.ops.from_nodal(&self.initial),
            horizon: self.config.time.horizon,
            forcing: &forcing,
        };
        let params = StepParams {
            lambda,
            ..self.params()
        };
        let mean = self.ops.mean_nodal(&self.initial);
        let traj = if self.config.solver.mean_shift && mean.abs() > mean_zero_tolerance::<f64>() {
            run_mean_shifted(&data, &params, &self.ops, ctx)?
        } else {
            run(&data, &params, &self.ops, ctx)?
        };
        Ok(traj)
    }
}

/// Dual solver with the configured method and the default CG tolerance.
pub fn context_for<'a>(ops: &'a Operators, config: &RunConfig) -> Result<DualSolverContext<'a, f64>> {
    Ok(DualSolverContext::with_method(ops, config.dual_method(), DUAL_TOL)?)
}

const DUAL_TOL: f64 = 1e-12;

fn mode_profile(config: &RunConfig, ops: &Operators) -> Result<Vec<f64>> {
    let k = config.initial.k.unwrap_or(1);
    let amplitude = config.initial.amplitude.unwrap_or(1.0);
    let mut v = match config.geometry() {
        Geometry::Strip { .. } => {
            let case = ManufacturedCase::single_mode(config.geometry(), 1.0, 0.0, k, amplitude, None)?;
            ops.to_nodal(&case.exact(ops, 0.0))?
        }
        Geometry::Interval { .. } => {
            let kappa = std::f64::consts::PI * k as f64;
            ops.to_nodal(&ops.sample(|p, _| amplitude * (kappa * p.x).cos()))?
        }
    };
    ops.project_nodal(&mut v);
    Ok(v)
}

fn initial_field(config: &RunConfig, ops: &Operators) -> Result<Vec<f64>> {
    let i = &config.initial;
    let amplitude = i.amplitude.unwrap_or(1.0);
    Ok(match i.profile.as_str() {
        "single_mode" => mode_profile(config, ops)?,
        "constant_plus_mode" => {
            let m0 = i.m0.unwrap_or(0.0);
            mode_profile(config, ops)?.into_iter().map(|x| x + m0).collect()
        }
        "random_mean_zero" => random_mean_zero(ops, i.seed.unwrap_or(0))
            .into_iter()
            .map(|x| amplitude * x)
            .collect(),
        "file" => {
            let path = i.path.as_deref().unwrap_or(Path::new(""));
            output::parse_snapshot(path, &output::read_file(path)?, ops)?
        }
        _ => vec![0.0; ops.n_nodes()],
    })
}

fn forcing_source(config: &RunConfig, ops: &Operators) -> Result<ForcingSource> {
    let f = &config.forcing;
    Ok(match f.kind.as_str() {
        "random_mean_zero" => ForcingSource::Random {
            field: random_mean_zero(ops, f.seed.unwrap_or(0)),
            amplitude: f.amplitude.unwrap_or(1.0),
            frequency: f.frequency.unwrap_or(1.0),
        },
        "manufactured" => {
            let c0 = config.graph.c0.unwrap_or(1.0);
            let amplitude = config.initial.amplitude.unwrap_or(1.0);
            let k = config.initial.k.unwrap_or(1);
            ForcingSource::Manufactured(ManufacturedCase::single_mode(
                config.geometry(),
                c0,
                config.time.lambda,
                k,
                amplitude,
                f.rate,
            )?)
        }
        "file" => {
            let path = f.path.as_deref().unwrap_or(Path::new(""));
            let (times, samples) = output::parse_forcing(path, &output::read_file(path)?)?;
            let grid = time_grid(config.time.tau, config.time.horizon);
            if times.as_slice() != &grid[1..] {
                return Err(ScenarioError::Setup(format!(
                    "{}: forcing times do not match the time grid of tau = {} and horizon = {}",
                    path.display(),
                    config.time.tau,
                    config.time.horizon
                )));
            }
            if let Some(bad) = samples.iter().find(|s| s.len() != ops.n_nodes()) {
                return Err(ScenarioError::Setup(format!(
                    "{}: {} forcing values per step, geometry has {} nodes",
                    path.display(),
                    bad.len(),
                    ops.n_nodes()
                )));
            }
            ForcingSource::File { times, samples }
        }
        _ => ForcingSource::Zero,
    })
}

/// Stored data of a trajectory (records are recomputed on evaluation).
pub fn store(traj: &History) -> StoredRun {
    StoredRun {
        lambda: traj.lambda,
        tau: traj.tau,
        newton_tol: traj.newton_tol,
        mean_shift: traj.mean_shift,
        discarded_forcing_mean: traj.discarded_forcing_mean,
        times: traj.times.clone(),
        fields: traj.fields.clone(),
        fluxes: traj.fluxes.clone(),
        forcing: traj.forcing.clone(),
        newton_iters: traj.records.iter().map(|r| r.newton_iters).collect(),
        residuals: traj.records.iter().map(|r| r.residual).collect(),
    }
}

/// Trajectory with records recomputed from the stored fields under the original graphs.
pub fn rebuild(stored: &StoredRun, ops: &Operators, graphs: &Pair, ctx: &DualSolverContext<'_, f64>) -> Result<History> {
    let mut records = Vec::with_capacity(stored.fields.len());
    for (n, u) in stored.fields.iter().enumerate() {
        let du_dualnorm = if n == 0 {
            0.0
        } else {
            let du: Vec<f64> = u.iter().zip(&stored.fields[n - 1]).map(|(a, b)| a - b).collect();
            ctx.dual_norm_projected(&du)? / (stored.times[n] - stored.times[n - 1])
        };
        records.push(StepRecord {
            step: n,
            t: stored.times[n],
            mass: ops.mean_nodal(u),
            phi_lambda: phi_lambda_nodal(ops, graphs, stored.lambda, u),
            newton_iters: stored.newton_iters[n],
            residual: stored.residuals[n],
            du_dualnorm,
            xi_mean: ops.mean_nodal(&stored.fluxes[n]),
        });
    }
    Ok(History {
        lambda: stored.lambda,
        tau: stored.tau,
        newton_tol: stored.newton_tol,
        mean_shift: stored.mean_shift,
        times: stored.times.clone(),
        fields: stored.fields.clone(),
        fluxes: stored.fluxes.clone(),
        forcing: stored.forcing.clone(),
        records,
        discarded_forcing_mean: stored.discarded_forcing_mean,
    })
}

/// Constants and checks of a stored run.
pub fn evaluate(
    config: &RunConfig,
    stored: &StoredRun,
    ops: &Operators,
    graphs: &Pair,
    ctx: &DualSolverContext<'_, f64>,
    poincare: &PoincareConstants<f64>,
) -> Result<(History, RunReport)> {
    let traj = rebuild(stored, ops, graphs, ctx)?;
    let constants = compute_constants(ops, graphs, &traj.fields[0], &traj.times, &traj.forcing, poincare)?;
    let report = verify_trajectory(&traj, ops, graphs, ctx, &constants)?;
    let ledger = flux_ledger(&traj, ops, ctx)?;
    let json = RunReport::new(&report, &ledger, &traj, poincare.mu1, config);
    Ok((traj, json))
}

pub struct RunOutcome {
    pub trajectory: History,
    pub report: RunReport,
    pub directory: Option<PathBuf>,
}

/// Solves, evaluates and (if `out` is given) writes a run directory.
pub fn run_config(config: RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let problem = Problem::new(config)?;
    let ctx = problem.context()?;
    let poincare = ctx.poincare_constants()?;
    let traj = problem.solve(&ctx, problem.config.time.lambda)?;
    let (trajectory, report) = evaluate(&problem.config, &store(&traj), &problem.ops, &problem.graphs, &ctx, &poincare)?;
    if let Some(dir) = out {
        output::write_run(dir, &problem.config, &trajectory, &report, &problem.ops)?;
        info!("wrote {}", dir.display());
    }
    Ok(RunOutcome {
        trajectory,
        report,
        directory: out.map(Path::to_path_buf),
    })
}

pub struct VerifyOutcome {
    pub report: RunReport,
    /// The recomputed report serializes to exactly the stored `report.json`.
    pub identical: bool,
    pub stored_report: Option<String>,
}

/// Recomputes the report of a stored run directory.
pub fn verify_dir(dir: &Path) -> Result<VerifyOutcome> {
    let (config_text, stored) = output::read_run(dir)?;
    let config = RunConfig::parse(&config_text)?;
    let ops = build_operators(config.geometry())?;
    let graphs = config.graphs().map_err(ScenarioError::Setup)?;
    if stored.fields[0].len() != ops.n_nodes() {
        return Err(ScenarioError::Setup(format!(
            "stored fields have {} nodes, geometry has {}",
            stored.fields[0].len(),
            ops.n_nodes()
        )));
    }
    let ctx = context_for(&ops, &config)?;
    let poincare = ctx.poincare_constants()?;
    let (_, report) = evaluate(&config, &stored, &ops, &graphs, &ctx, &poincare)?;
    let path = dir.join(output::REPORT_FILE);
    let stored_report = path.exists().then(|| output::read_file(&path)).transpose()?;
    let identical = stored_report.as_deref() == Some(report.to_json().as_str());
    Ok(VerifyOutcome {
        report,
        identical,
        stored_report,
    })
}

pub struct SweepOutcome {
    pub table: LambdaTable<f64>,
    pub reports: Vec<RunReport>,
}

pub fn lambda_table_csv(table: &LambdaTable<f64>) -> String {
    let mut out = String::from("lambda,lambda_next,distance,ratio\n");
    for r in &table.rows {
        let ratio = r.ratio.map(num).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", num(r.lambda), num(r.lambda_next), num(r.distance), ratio);
    }
    out
}

/// Runs every lambda concurrently on the same data and tabulates the Cauchy distances.
pub fn sweep_lambda(config: RunConfig, lambdas: &[f64], out: Option<&Path>) -> Result<SweepOutcome> {
    let problem = Problem::new(config)?;
    let ctx = problem.context()?;
    let poincare = ctx.poincare_constants()?;
    let runs: Vec<Result<History>> = thread::scope(|s| {
        let handles: Vec<_> = lambdas
            .iter()
            .map(|&lambda| {
                let (problem, ctx) = (&problem, &ctx);
                s.spawn(move || problem.solve(ctx, lambda))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });
    let runs: Vec<History> = runs.into_iter().collect::<Result<_>>()?;
    let table = lambda_cauchy_study(&runs, &ctx)?;
    let mut reports = Vec::with_capacity(runs.len());
    for (i, traj) in runs.iter().enumerate() {
        let mut config = problem.config.clone();
        config.time.lambda = traj.lambda;
        let (rebuilt, report) = evaluate(&config, &store(traj), &problem.ops, &problem.graphs, &ctx, &poincare)?;
        if let Some(dir) = out {
            output::write_run(&dir.join(format!("lambda_{i}")), &config, &rebuilt, &report, &problem.ops)?;
        }
        reports.push(report);
    }
    if let Some(dir) = out {
        output::write_file(&dir.join("lambda_table.csv"), &lambda_table_csv(&table))?;
    }
    Ok(SweepOutcome { table, reports })
}

pub struct ContractionOutcome {
    pub record: CheckRecord<f64>,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Two runs from random mean-zero data with seeds `a` and `b` under the configured forcing.
pub fn contraction_pair(config: RunConfig, seeds: (u64, u64), out: Option<&Path>) -> Result<ContractionOutcome> {
    if seeds.0 == seeds.1 {
        return Err(ScenarioError::Setup(format!("contraction needs two distinct seeds, got {} twice", seeds.0)));
    }
    let with_seed = |seed: u64| {
        let mut c = config.clone();
        c.initial.profile = "random_mean_zero".into();
        c.initial.seed = Some(seed);
        c.initial.k = None;
        c.initial.m0 = None;
        c.initial.path = None;
        Problem::new(c)
    };
    let problems = [with_seed(seeds.0)?, with_seed(seeds.1)?];
    let ctx = problems[0].context()?;
    let runs: Vec<Result<History>> = thread::scope(|s| {
        let handles: Vec<_> = problems
            .iter()
            .map(|p| {
                let ctx = &ctx;
                s.spawn(move || p.solve(ctx, p.config.time.lambda))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("contraction thread panicked")).collect()
    });
    let runs: Vec<History> = runs.into_iter().collect::<Result<_>>()?;
    let (record, distances) = check_contraction(&runs[0], &runs[1], &ctx)?;
    if let Some(dir) = out {
        let mut csv = String::from("step,t,distance\n");
        for (n, d) in distances.iter().enumerate() {
            let _ = writeln!(csv, "{n},{},{}", num(runs[0].times[n]), num(*d));
        }
        output::write_file(&dir.join("contraction.csv"), &csv)?;
    }
    Ok(ContractionOutcome {
        record,
        times: runs[0].times.clone(),
        distances,
    })
}

/// One refinement level: strip resolution and time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub nx: usize,
    pub ny: usize,
    pub tau: f64,
}

impl std::str::FromStr for Level {
    type Err = String;

    /// `NXxNY:TAU`, e.g. `32x16:1e-3`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (grid, tau) = s.split_once(':').ok_or_else(|| format!("level {s:?} is not NXxNY:TAU"))?;
        let (nx, ny) = grid.split_once('x').ok_or_else(|| format!("grid {grid:?} is not NXxNY"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad grid size {v:?}"));
        let tau: f64 = tau.trim().parse().map_err(|_| format!("bad time step {tau:?}"))?;
        if !(tau > 0.0) {
            return Err(format!("time step must be positive in {s:?}"));
        }
        Ok(Self {
            nx: parse(nx)?,
            ny: parse(ny)?,
            tau,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// Fixed grid, refined time step: first order expected.
    Time,
    /// Grid refined (with the time step): second order expected.
    Space,
}

impl StudyKind {
    pub fn band(&self) -> (f64, f64) {
        match self {
            StudyKind::Time => (0.8, 1.2),
            StudyKind::Space => (1.6, 2.4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub level: Level,
    pub h: f64,
    pub steps: usize,
    /// `max_n |u^n - u(t_n)|_H`
    pub error_h: f64,
    /// `max_n max_i |u_i^n - u(t_n, x_i)|`
    pub error_max: f64,
    /// Max-nodal error against the spatially discrete solution (time error only).
    pub error_time: f64,
    /// Observed order against the previous level: H error for space studies,
    /// semi-discrete error for time studies.
    pub order: Option<f64>,
    pub order_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub kind: StudyKind,
    pub rows: Vec<ConvergenceRow>,
    pub pass: bool,
}

pub fn convergence_csv(table: &ConvergenceTable) -> String {
    let mut out = String::from("nx,ny,h,tau,steps,error_h,error_max,error_time,order,order_max\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.level.nx,
            r.level.ny,
            num(r.h),
            num(r.level.tau),
            r.steps,
            num(r.error_h),
            num(r.error_max),
            num(r.error_time),
            r.order.map(num).unwrap_or_default(),
            r.order_max.map(num).unwrap_or_default()
        );
    }
    out
}

/// Sup-in-time errors against the manufactured single-mode solution:
/// H norm and max-nodal against the exact solution, max-nodal against the semi-discrete one.
pub fn manufactured_errors(problem: &Problem, traj: &History) -> Result<(f64, f64, f64)> {
    let c = &problem.config;
    let case = match &problem.forcing {
        ForcingSource::Manufactured(case) => *case,
        _ => ManufacturedCase::single_mode(
            c.geometry(),
            c.graph.c0.unwrap_or(1.0),
            c.time.lambda,
            c.initial.k.unwrap_or(1),
            c.initial.amplitude.unwrap_or(1.0),
            None,
        )?,
    };
    let ops = &problem.ops;
    let max_abs = |e: &[f64]| e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (mut eh, mut emax, mut etime) = (0.0f64, 0.0f64, 0.0f64);
    for (u, &t) in traj.fields.iter().zip(&traj.times) {
        let exact = ops.to_nodal(&case.exact(ops, t))?;
        let e: Vec<f64> = u.iter().zip(&exact).map(|(a, b)| a - b).collect();
        eh = eh.max(ops.inner_nodal(&e, &e).sqrt());
        emax = emax.max(max_abs(&e));
        let semi = ops.to_nodal(&case.semi_discrete(ops, t))?;
        let e: Vec<f64> = u.iter().zip(&semi).map(|(a, b)| a - b).collect();
        etime = etime.max(max_abs(&e));
    }
    Ok((eh, emax, etime))
}

fn check_manufactured(config: &RunConfig) -> Result<()> {
    let ok = config.geometry.kind == "strip"
        && config.graph.preset == "linear"
        && config.surface_graph.as_ref().is_none_or(|g| g == &config.graph)
        && config.initial.profile == "single_mode"
        && (config.forcing.kind == "zero" || config.forcing.kind == "manufactured");
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Setup(
            "convergence studies need a strip, the linear graph, the single_mode profile and zero or manufactured forcing"
                .into(),
        ))
    }
}

/// Runs every level concurrently and reports observed orders between consecutive levels.
pub fn convergence_study(config: RunConfig, levels: &[Level], out: Option<&Path>) -> Result<ConvergenceTable> {
    check_manufactured(&config)?;
    if levels.len() < 2 {
        return Err(ScenarioError::Setup("a convergence study needs at least two levels".into()));
    }
    let same_grid = levels.windows(2).all(|w| (w[0].nx, w[0].ny) == (w[1].nx, w[1].ny));
    let kind = if same_grid { StudyKind::Time } else { StudyKind::Space };
    let lx = config.geometry.lx.unwrap_or(1.0);
    let results: Vec<Result<(usize, f64, f64, f64)>> = thread::scope(|s| {
        let handles: Vec<_> = levels
            .iter()
            .map(|level| {
                let mut c = config.clone();
                c.geometry.nx = Some(level.nx);
                c.geometry.ny = Some(level.ny);
                c.time.tau = level.tau;
                s.spawn(move || -> Result<(usize, f64, f64, f64)> {
                    let problem = Problem::new(c)?;
                    let ctx = problem.context()?;
                    let traj = problem.solve(&ctx, problem.config.time.lambda)?;
                    let (eh, emax, etime) = manufactured_errors(&problem, &traj)?;
                    Ok((traj.steps(), eh, emax, etime))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("level thread panicked")).collect()
    });
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(levels.len());
    for (level, r) in levels.iter().zip(results) {
        let (steps, error_h, error_max, error_time) = r?;
        let h = lx / level.nx as f64;
        let (order, order_max) = match (rows.last(), kind) {
            (Some(prev), StudyKind::Time) => {
                let p = (prev.error_time / error_time).ln() / (prev.level.tau / level.tau).ln();
                (Some(p), Some(p))
            }
            (Some(prev), StudyKind::Space) => {
                let ratio = (prev.h / h).ln();
                (
                    Some((prev.error_h / error_h).ln() / ratio),
                    Some((prev.error_max / error_max).ln() / ratio),
                )
            }
            (None, _) => (None, None),
        };
        rows.push(ConvergenceRow {
            level: *level,
            h,
            steps,
            error_h,
            error_max,
            error_time,
            order,
            order_max,
        });
    }
    let (lo, hi) = kind.band();
    let pass = rows.iter().filter_map(|r| r.order).all(|p| (lo..=hi).contains(&p));
    let table = ConvergenceTable { kind, rows, pass };
    if let Some(dir) = out {
        output::write_file(&dir.join("convergence.csv"), &convergence_csv(&table))?;
    }
    Ok(table)
}

/// Graph quantities on a uniform grid of `r` for each lambda.
pub fn graph_table(config: &RunConfig, lambdas: &[f64], range: (f64, f64, usize)) -> Result<String> {
    config.validate()?;
    let graphs = config.graphs().map_err(ScenarioError::Setup)?;
    let (lo, hi, count) = range;
    if !(hi > lo) || count < 2 {
        return Err(ScenarioError::Setup("graph table range needs lo < hi and at least 2 points".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0)) {
        return Err(ScenarioError::Setup(format!("lambda must be positive, got {bad}")));
    }
    let mut named = vec![("bulk", &graphs.bulk)];
    if graphs.surface != graphs.bulk {
        named.push(("surface", &graphs.surface));
    }
    let mut out = String::from("graph,lambda,r,beta_lo,beta_hi,beta_hat,resolvent,yosida,slope,envelope\n");
    for (name, g) in named {
        for &lambda in lambdas {
            for k in 0..count {
                let r = lo + (hi - lo) * k as f64 / (count - 1) as f64;
                let b = g.eval(r);
                let reg = g.regularize(lambda, r);
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{},{},{},{},{}",
                    num(lambda),
                    num(r),
                    num(b.lo),
                    num(b.hi),
                    num(g.antiderivative(r)),
                    num(reg.resolvent),
                    num(reg.yosida),
                    num(reg.slope),
                    num(g.envelope(lambda, r))
                );
            }
        }
    }
    Ok(out)
}

/// Discrete Poincare and embedding constants of the configured geometry.
pub fn poincare_report(config: &RunConfig) -> Result<PoincareConstants<f64>> {
    let ops: DiscreteOperators<f64> = build_operators(config.geometry())?;
    let ctx = context_for(&ops, config)?;
    Ok(ctx.poincare_constants()?)
}
