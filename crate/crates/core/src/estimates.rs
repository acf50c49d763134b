//! A-priori constants and a-posteriori checks of the uniform energy bounds.
//!
//! Each inequality is checked twice where that makes sense: once against the
//! chain of measured intermediate quantities, which the discrete scheme
//! satisfies exactly, and once against the closed-form constant built from the
//! data alone.

use std::thread;

use log::warn;
use thiserror::Error;

use crate::discretization::{DiscreteOperators, NodeKind};
use crate::dual::{DualError, DualSolverContext, PoincareConstants};
use crate::graph::{GraphError, GraphPair};
use crate::scalar::Scalar;
use crate::stepper::{phi_nodal, residual_floor, run, time_grid, Forcing, ProblemData, StepError, StepParams, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("graph pair failed far-field validation: {0}")]
    GraphNotValidated(#[from] GraphError),
    #[error("{0} graph has no quadratic growth certificate")]
    NoGrowthCertificate(&'static str),
    #[error("runs cannot be compared: {0}")]
    MismatchedRuns(String),
    #[error("a lambda study needs at least 3 strictly decreasing values, got {0:?}")]
    BadLambdaList(Vec<f64>),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Step(#[from] StepError),
}

pub type Result<T, E = EstimateError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants<T> {
    pub m1: T,
    pub m2: T,
    pub m3: T,
    pub m4: T,
    pub m5: T,
    pub lambda_bar: T,
    pub c_star: T,
    pub c0: T,
    pub m0: T,
    /// Largest far-field intercept magnitude over both graphs.
    pub c0_prime: T,
    pub c1: T,
    pub c2: T,
    pub c3: T,
    pub c4: T,
    pub c_p: T,
    pub c_emb: T,
    pub horizon: T,
    /// `sum_bulk w beta_hat(u0) + sum_surface w beta_hat_G(u0)`
    pub phi0: T,
    /// `sum_n dt_n |f_n|_H^2`
    pub forcing_h2: T,
    /// `m(u0)`; zero for mean-zero data.
    pub initial_mean: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotApplicable,
}

impl CheckStatus {
    pub fn label(&self) -> &'static str {
        match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NotApplicable => "NOT-APPLICABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord<T> {
    pub name: String,
    pub measured: T,
    pub bound: T,
    /// `bound - measured`
    pub margin: T,
    pub status: CheckStatus,
    /// Structural checks are theorems of the discrete scheme and decide the exit status.
    pub structural: bool,
}

impl<T: Scalar> CheckRecord<T> {
    /// Passes iff `measured <= bound * (1 + rel_tol) + abs_slack`.
    pub fn compare(name: &str, measured: T, bound: T, rel_tol: T, abs_slack: T, structural: bool) -> Self {
        let ok = measured <= bound * (T::one() + rel_tol) + abs_slack;
        Self {
            name: name.to_string(),
            measured,
            bound,
            margin: bound - measured,
            status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
            structural,
        }
    }

    pub fn not_applicable(name: &str, measured: T, bound: T, structural: bool) -> Self {
        Self {
            name: name.to_string(),
            measured,
            bound,
            margin: bound - measured,
            status: CheckStatus::NotApplicable,
            structural,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != CheckStatus::Fail
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub constants: BoundConstants<T>,
    pub lambda: T,
    pub mass_drift_max: T,
    pub checks: Vec<CheckRecord<T>>,
}

impl<T: Scalar> EstimateReport<T> {
    pub fn structural_failures(&self) -> Vec<&CheckRecord<T>> {
        self.checks
            .iter()
            .filter(|c| c.structural && c.status == CheckStatus::Fail)
            .collect()
    }

    pub fn all_structural_pass(&self) -> bool {
        self.structural_failures().is_empty()
    }

    pub fn check(&self, name: &str) -> Option<&CheckRecord<T>> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Forcing samples on the stepper's time grid (`f_n` at `t_{n+1}`).
pub fn sample_forcing<T: Scalar>(
    ops: &DiscreteOperators<T>,
    forcing: &dyn Forcing<T>,
    tau: T,
    horizon: T,
    project: bool,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let times = time_grid(tau, horizon);
    let mut samples = Vec::with_capacity(times.len().saturating_sub(1));
    for &t in &times[1..] {
        let mut f = ops
            .to_nodal(&forcing.sample(t))
            .map_err(|e| EstimateError::Step(StepError::Shape(e)))?;
        if project {
            ops.project_nodal(&mut f);
        }
        samples.push(f);
    }
    Ok((times, samples))
}

/// Closed-form constants from the graphs, the initial datum, the forcing samples and the discrete constants.
pub fn compute_constants<T: Scalar>(
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    initial: &[T],
    times: &[T],
    forcing: &[Vec<T>],
    poincare: &PoincareConstants<T>,
) -> Result<BoundConstants<T>> {
    let certs = graphs.validate()?;
    let bulk_growth = graphs.bulk.growth().ok_or(EstimateError::NoGrowthCertificate("bulk"))?;
    let surface_growth = graphs
        .surface
        .growth()
        .ok_or(EstimateError::NoGrowthCertificate("surface"))?;
    let (c1, c2) = (bulk_growth.c1, bulk_growth.c2);
    let (c3, c4) = (surface_growth.c1, surface_growth.c2);

    let phi0 = phi_nodal(ops, graphs, initial);
    let forcing_h2: T = forcing
        .iter()
        .enumerate()
        .map(|(n, f)| (times[n + 1] - times[n]) * ops.inner_nodal(f, f))
        .sum();
    let horizon = times[times.len() - 1] - times[0];
    // |f|_{V0*} <= c_emb |f|_H; the factor is 1 unless the embedding constant exceeds 1
    let emb = T::one().max(poincare.c_emb * poincare.c_emb);
    if emb > T::one() {
        warn!("embedding constant {} exceeds 1; forcing terms are scaled by its square", poincare.c_emb);
    }

    let two = T::two();
    let m1 = phi0 + T::half() * emb * forcing_h2;
    let lambda_bar = T::one().min(T::one() / (two * c1)).min(T::one() / (two * c3));
    let c_min = c1.min(c3);
    let m2 = (two / c_min) * (two * m1 + c2 * ops.vol_omega() + c4 * ops.vol_gamma());
    let m3 = two * emb * forcing_h2 + T::lit(4.0) * m1;

    let c0 = certs.bulk.c0;
    let m0 = certs.bulk.m0;
    let c_star = graphs.bulk.c_star().max(graphs.surface.c_star());
    let per_graph = |cert: crate::graph::LinearBoundCertificate<T>, star: T| star + c0 * m0 + cert.c0_prime.abs();
    let m4 = per_graph(certs.bulk, graphs.bulk.c_star()).max(per_graph(certs.surface, graphs.surface.c_star()));
    let m5 = poincare.c_p * (m3 + m4 * m4 * horizon);

    Ok(BoundConstants {
        m1,
        m2,
        m3,
        m4,
        m5,
        lambda_bar,
        c_star,
        c0,
        m0,
        c0_prime: certs.bulk.c0_prime.abs().max(certs.surface.c0_prime.abs()),
        c1,
        c2,
        c3,
        c4,
        c_p: poincare.c_p,
        c_emb: poincare.c_emb,
        horizon,
        phi0,
        forcing_h2,
        initial_mean: ops.mean_nodal(initial),
    })
}

fn structural_slack<T: Scalar>(traj: &Trajectory<T>) -> T {
    T::lit(10.0) * traj.newton_tol
}

pub fn check_mass<T: Scalar>(traj: &Trajectory<T>, ops: &DiscreteOperators<T>) -> CheckRecord<T> {
    let m0 = ops.mean_nodal(&traj.fields[0]);
    let drift = traj
        .fields
        .iter()
        .map(|u| (ops.mean_nodal(u) - m0).abs())
        .fold(T::zero(), T::max);
    let bound = T::lit(10.0) * traj.newton_tol / ops.total_measure();
    CheckRecord::compare("mass_conservation", drift, bound, T::zero(), T::zero(), true)
}

/// `max_n [ 1/2 sum_{k<=n} dt_k |du_k/dt_k|_{V0*}^2 + phi_lambda(u^n) ] <= M1`.
pub fn check_energy_bound<T: Scalar>(traj: &Trajectory<T>, constants: &BoundConstants<T>) -> CheckRecord<T> {
    let mut energy = T::zero();
    let mut worst = traj.records[0].phi_lambda;
    for n in 1..traj.records.len() {
        let r = &traj.records[n];
        energy = energy + traj.dt(n - 1) * r.du_dualnorm * r.du_dualnorm;
        worst = worst.max(T::half() * energy + r.phi_lambda);
    }
    CheckRecord::compare("energy_bound", worst, constants.m1, T::zero(), structural_slack(traj), true)
}

/// `sup_n |u^n|_H^2 <= M2`, applicable only for `lambda <= lambda_bar`.
pub fn check_h_bound<T: Scalar>(
    traj: &Trajectory<T>,
    ops: &DiscreteOperators<T>,
    constants: &BoundConstants<T>,
) -> CheckRecord<T> {
    let sup = traj
        .fields
        .iter()
        .map(|u| ops.inner_nodal(u, u))
        .fold(T::zero(), T::max);
    if traj.lambda > constants.lambda_bar {
        return CheckRecord::not_applicable("h_bound", sup, constants.m2, true);
    }
    CheckRecord::compare("h_bound", sup, constants.m2, T::zero(), structural_slack(traj), true)
}

/// Measured ingredients shared by the flux checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxLedger<T> {
    /// `sum_n dt |P xi^n|_{V0}^2`
    pub projected_flux: T,
    /// `2 sum dt |f|_{V0*}^2 + 2 sum dt |du/dt|_{V0*}^2`
    pub m3_measured: T,
    /// `sup_n |m(xi^n)|`
    pub sup_flux_mean: T,
    /// `sum_n dt |xi^n|_V^2`
    pub full_flux: T,
    /// `max_n |a(xi, xi) - a(P xi, P xi)|` relative to `1 + a(xi, xi)`
    pub identity_defect: T,
}

pub fn flux_ledger<T: Scalar>(
    traj: &Trajectory<T>,
    ops: &DiscreteOperators<T>,
    ctx: &DualSolverContext<'_, T>,
) -> Result<FluxLedger<T>> {
    let mut ledger = FluxLedger {
        projected_flux: T::zero(),
        m3_measured: T::zero(),
        sup_flux_mean: T::zero(),
        full_flux: T::zero(),
        identity_defect: T::zero(),
    };
    let mut forcing_dual = T::zero();
    let mut rate_dual = T::zero();
    for n in 1..traj.fields.len() {
        let dt = traj.dt(n - 1);
        let xi = &traj.fluxes[n];
        let a = ops.a_nodal(xi, xi);
        let mut pxi = xi.clone();
        ops.project_nodal(&mut pxi);
        let ap = ops.a_nodal(&pxi, &pxi);
        ledger.identity_defect = ledger.identity_defect.max((a - ap).abs() / (T::one() + a));
        ledger.projected_flux = ledger.projected_flux + dt * ap;
        ledger.full_flux = ledger.full_flux + dt * (ops.inner_nodal(xi, xi) + a);
        let f_dual = ctx.dual_norm_projected(&traj.forcing[n - 1])?;
        forcing_dual = forcing_dual + dt * f_dual * f_dual;
        let rate = traj.records[n].du_dualnorm;
        rate_dual = rate_dual + dt * rate * rate;
    }
    for xi in &traj.fluxes {
        ledger.sup_flux_mean = ledger.sup_flux_mean.max(ops.mean_nodal(xi).abs());
    }
    ledger.m3_measured = T::two() * forcing_dual + T::two() * rate_dual;
    Ok(ledger)
}

/// Flux bounds: measured chain, mean bound, and the a-priori `M3`.
pub fn check_projected_flux<T: Scalar>(
    traj: &Trajectory<T>,
    constants: &BoundConstants<T>,
    ledger: &FluxLedger<T>,
) -> Vec<CheckRecord<T>> {
    let zero = T::zero();
    // the mean of beta_lambda(u) exceeds the mean-zero bound by at most c0 |m(u)|
    let mean_bound = constants.m4 + constants.c0 * constants.initial_mean.abs();
    vec![
        CheckRecord::compare("projected_flux_chain", ledger.projected_flux, ledger.m3_measured, T::lit(1e-12), zero, true),
        CheckRecord::compare("flux_mean", ledger.sup_flux_mean, mean_bound, zero, structural_slack(traj), true),
        CheckRecord::compare("projected_flux_apriori", ledger.projected_flux, constants.m3, zero, zero, false),
    ]
}

/// `|xi|_V` bounds and the identity `a(xi, xi) = a(P xi, P xi)`.
pub fn check_full_flux<T: Scalar>(
    traj: &Trajectory<T>,
    constants: &BoundConstants<T>,
    ledger: &FluxLedger<T>,
) -> Vec<CheckRecord<T>> {
    let zero = T::zero();
    let horizon = traj.times[traj.times.len() - 1] - traj.times[0];
    let chain = constants.c_p * (ledger.m3_measured + ledger.sup_flux_mean * ledger.sup_flux_mean * horizon);
    vec![
        CheckRecord::compare("full_flux_chain", ledger.full_flux, chain, T::lit(1e-12), zero, true),
        CheckRecord::compare("flux_decomposition", ledger.identity_defect, T::lit(1e-10), zero, zero, true),
        CheckRecord::compare("full_flux_apriori", ledger.full_flux, constants.m5, zero, zero, false),
    ]
}

/// `phi_lambda(u^{n+1}) - phi_lambda(u^n) <= (xi^{n+1}, u^{n+1} - u^n)_H` for every step.
pub fn check_chain_rule<T: Scalar>(traj: &Trajectory<T>, ops: &DiscreteOperators<T>) -> CheckRecord<T> {
    let mut worst = T::neg_infinity();
    for n in 0..traj.steps() {
        let du: Vec<T> = traj.fields[n + 1]
            .iter()
            .zip(&traj.fields[n])
            .map(|(&a, &b)| a - b)
            .collect();
        let rhs = ops.inner_nodal(&traj.fluxes[n + 1], &du);
        let lhs = traj.records[n + 1].phi_lambda - traj.records[n].phi_lambda;
        worst = worst.max(lhs - rhs);
    }
    if traj.steps() == 0 {
        worst = T::zero();
    }
    CheckRecord::compare("chain_rule", worst, T::zero(), T::zero(), structural_slack(traj), true)
}

/// Residual of the discrete weak form against every nodal test function, per step.
pub fn weak_residual<T: Scalar>(traj: &Trajectory<T>, ops: &DiscreteOperators<T>) -> Vec<T> {
    let w = ops.weights();
    let mut res = vec![T::zero(); ops.n_nodes()];
    (0..traj.steps())
        .map(|n| {
            let dt = traj.dt(n);
            let (u, prev, f) = (&traj.fields[n + 1], &traj.fields[n], &traj.forcing[n]);
            ops.stiffness().mul_vec_into(&traj.fluxes[n + 1], &mut res);
            let mut acc = T::zero();
            for i in 0..res.len() {
                let r = res[i] + w[i] * ((u[i] - prev[i]) / dt - f[i]);
                acc = acc + r * r / w[i];
            }
            acc.sqrt()
        })
        .collect()
}

/// Worst step residual against `max(newton_tol, rounding floor)`; the floor only matters
/// where the working precision cannot reach `newton_tol` (small `lambda`, large fluxes).
pub fn check_weak_residual<T: Scalar>(
    traj: &Trajectory<T>,
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
) -> CheckRecord<T> {
    let residuals = weak_residual(traj, ops);
    let worst = residuals.iter().copied().fold(T::zero(), T::max);
    let mut tolerance = traj.newton_tol;
    for (n, &r) in residuals.iter().enumerate() {
        if r > traj.newton_tol {
            let (u, prev, f) = (&traj.fields[n + 1], &traj.fields[n], &traj.forcing[n]);
            let floor = residual_floor(ops, graphs, traj.lambda, u, prev, f, &traj.fluxes[n + 1], traj.dt(n));
            tolerance = tolerance.max(floor);
        }
    }
    CheckRecord::compare("weak_residual", worst, tolerance, T::zero(), T::lit(0.1) * traj.newton_tol, true)
}

/// Stored boundary fluxes equal the surface graph's Yosida map at the boundary values.
pub fn check_trace<T: Scalar>(traj: &Trajectory<T>, ops: &DiscreteOperators<T>, graphs: &GraphPair<T>) -> CheckRecord<T> {
    let mut worst = T::zero();
    for (u, xi) in traj.fields.iter().zip(&traj.fluxes) {
        for i in 0..u.len() {
            if ops.node_kind(i) == NodeKind::Surface {
                let expect = graphs.surface.yosida(traj.lambda, u[i]);
                worst = worst.max((xi[i] - expect).abs());
            }
        }
    }
    // fields of a mean-shifted run are reconstructed, so allow rounding of the shift
    let slack = traj.mean_shift.abs() * T::epsilon() * T::lit(64.0) / traj.lambda;
    CheckRecord::compare("trace_condition", worst, T::zero(), T::zero(), slack, true)
}

/// Every per-trajectory check.
pub fn verify_trajectory<T: Scalar>(
    traj: &Trajectory<T>,
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    ctx: &DualSolverContext<'_, T>,
    constants: &BoundConstants<T>,
) -> Result<EstimateReport<T>> {
    let mass = check_mass(traj, ops);
    let ledger = flux_ledger(traj, ops, ctx)?;
    let mut checks = vec![mass.clone(), check_energy_bound(traj, constants), check_h_bound(traj, ops, constants)];
    checks.extend(check_projected_flux(traj, constants, &ledger));
    checks.extend(check_full_flux(traj, constants, &ledger));
    checks.push(check_chain_rule(traj, ops));
    checks.push(check_weak_residual(traj, ops, graphs));
    checks.push(check_trace(traj, ops, graphs));
    Ok(EstimateReport {
        constants: *constants,
        lambda: traj.lambda,
        mass_drift_max: mass.measured,
        checks,
    })
}

/// `|u_1^n - u_2^n|_{V0*}` per step and the monotonicity check.
pub fn check_contraction<T: Scalar>(
    a: &Trajectory<T>,
    b: &Trajectory<T>,
    ctx: &DualSolverContext<'_, T>,
) -> Result<(CheckRecord<T>, Vec<T>)> {
    if a.times != b.times {
        return Err(EstimateError::MismatchedRuns("time grids differ".into()));
    }
    if a.lambda != b.lambda || a.tau != b.tau {
        return Err(EstimateError::MismatchedRuns("step parameters differ".into()));
    }
    if a.forcing != b.forcing {
        return Err(EstimateError::MismatchedRuns("forcing differs".into()));
    }
    let ops = ctx.ops();
    let tol = T::lit(10.0) * a.newton_tol.max(b.newton_tol);
    let mut distances = Vec::with_capacity(a.fields.len());
    for (u, v) in a.fields.iter().zip(&b.fields) {
        if u.len() != v.len() {
            return Err(EstimateError::MismatchedRuns("field sizes differ".into()));
        }
        let diff: Vec<T> = u.iter().zip(v).map(|(&x, &y)| x - y).collect();
        if ops.mean_nodal(&diff).abs() > tol.max(T::lit(1e-10)) {
            return Err(EstimateError::MismatchedRuns("initial data have different means".into()));
        }
        distances.push(ctx.dual_norm_projected(&diff)?);
    }
    let worst = distances
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(T::neg_infinity(), T::max);
    let worst = if distances.len() < 2 { T::zero() } else { worst };
    Ok((CheckRecord::compare("contraction", worst, T::zero(), T::zero(), tol, true), distances))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRow<T> {
    pub lambda: T,
    pub lambda_next: T,
    /// `sup_n |u_lambda^n - u_next^n|_{V0*}`
    pub distance: T,
    /// `distance / previous distance` (undefined for the first row)
    pub ratio: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTable<T> {
    pub rows: Vec<LambdaRow<T>>,
    pub strictly_decreasing: bool,
}

fn check_lambda_list<T: Scalar>(lambdas: &[T]) -> Result<()> {
    let ok = lambdas.len() >= 3
        && lambdas.iter().all(|&l| l > T::zero())
        && lambdas.windows(2).all(|w| w[1] < w[0]);
    if !ok {
        return Err(EstimateError::BadLambdaList(
            lambdas.iter().map(|l| l.to_f64().unwrap_or(f64::NAN)).collect(),
        ));
    }
    Ok(())
}

/// Cauchy table for trajectories ordered by strictly decreasing `lambda`.
pub fn lambda_cauchy_study<T: Scalar>(runs: &[Trajectory<T>], ctx: &DualSolverContext<'_, T>) -> Result<LambdaTable<T>> {
    let lambdas: Vec<T> = runs.iter().map(|r| r.lambda).collect();
    check_lambda_list(&lambdas)?;
    let mut rows: Vec<LambdaRow<T>> = Vec::with_capacity(runs.len() - 1);
    for pair in runs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.times != b.times {
            return Err(EstimateError::MismatchedRuns("time grids differ".into()));
        }
        let mut distance = T::zero();
        for (u, v) in a.fields.iter().zip(&b.fields) {
            let diff: Vec<T> = u.iter().zip(v).map(|(&x, &y)| x - y).collect();
            distance = distance.max(ctx.dual_norm_projected(&diff)?);
        }
        let ratio = rows.last().map(|prev| distance / prev.distance);
        rows.push(LambdaRow {
            lambda: a.lambda,
            lambda_next: b.lambda,
            distance,
            ratio,
        });
    }
    let strictly_decreasing = rows.windows(2).all(|w| w[1].distance < w[0].distance);
    Ok(LambdaTable {
        rows,
        strictly_decreasing,
    })
}

/// Runs the same data for each `lambda` concurrently; results keep the input order.
pub fn run_lambda_sweep<T: Scalar>(
    data: &ProblemData<'_, T>,
    params: &StepParams<T>,
    lambdas: &[T],
    ops: &DiscreteOperators<T>,
    ctx: &DualSolverContext<'_, T>,
) -> Result<Vec<Trajectory<T>>> {
    check_lambda_list(lambdas)?;
    thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .map(|&lambda| {
                let params = StepParams { lambda, ..*params };
                scope.spawn(move || run(data, &params, ops, ctx))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked").map_err(EstimateError::from))
            .collect()
    })
}
