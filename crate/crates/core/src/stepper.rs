//! Backward Euler for the regularized flow with a semismooth Newton inner solve.
//!
//! One step solves, in nodal form,
//!
//! ```text
//! M (u - u_prev) / dt + A beta_lambda(u) = M f
//! ```
//!
//! where `beta_lambda` acts with the bulk graph on interior nodes and with the
//! surface graph on boundary nodes. Writing `D = beta_lambda'(u)` (diagonal,
//! `0 <= D <= 1/lambda`), the Newton system `(M/dt + A D) du = -R` is
//! reduced to the SPD system
//!
//! ```text
//! (M / (dt D) + A)_SS dxi_S = -R_S,     S = { i : D_i > 0 }
//! ```
//!
//! and `du` is recovered node by node. Since `A 1 = 0` and `f` is mean-zero,
//! the residual stays orthogonal to constants along the iteration, which is
//! where exact mass conservation comes from.

use log::{debug, info};
use thiserror::Error;

use crate::discretization::{BulkSurfaceField, DiscreteOperators, DiscretizationError, NodeKind};
use crate::dual::{DualError, DualSolverContext};
use crate::graph::GraphPair;
use crate::linalg::{BandedCholesky, LinalgError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("invalid step parameters: {0}")]
    InvalidParams(String),
    #[error("forcing at step {step} is not mean-zero (mean {mean:e}); enable forcing projection to discard it")]
    ForcingNotMeanZero { step: usize, mean: f64 },
    #[error("Newton stalled at step {step} after {iterations} iterations (residual {residual:e})")]
    NewtonStalled {
        step: usize,
        iterations: usize,
        residual: f64,
        /// Best iterate found, nodal order.
        best: Vec<f64>,
    },
    #[error("linear solve failed at step {step}: {source}")]
    Linear { step: usize, source: LinalgError },
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    Shape(#[from] DiscretizationError),
}

pub type Result<T, E = StepError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams<T> {
    pub tau: T,
    pub lambda: T,
    /// Tolerance on `sqrt(sum_i R_i^2 / w_i)`.
    pub newton_tol: T,
    pub newton_max_iter: usize,
    pub backtrack: T,
    pub max_halvings: usize,
    /// Replace non-mean-zero forcing samples by their projection instead of failing.
    pub project_forcing: bool,
}

impl<T: Scalar> StepParams<T> {
    pub fn new(tau: T, lambda: T) -> Self {
        Self {
            tau,
            lambda,
            newton_tol: default_newton_tol(),
            newton_max_iter: 50,
            backtrack: T::half(),
            max_halvings: 20,
            project_forcing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: T| x > T::zero() && x.is_finite();
        if !positive(self.tau) {
            return Err(StepError::InvalidParams("tau must be positive".into()));
        }
        if !positive(self.lambda) {
            return Err(StepError::InvalidParams("lambda must be positive".into()));
        }
        if !positive(self.newton_tol) {
            return Err(StepError::InvalidParams("newton_tol must be positive".into()));
        }
        if self.newton_max_iter == 0 {
            return Err(StepError::InvalidParams("newton_max_iter must be at least 1".into()));
        }
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(StepError::InvalidParams("backtracking factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `1e-11` in double precision, loosened to the rounding floor for `f32`.
pub fn default_newton_tol<T: Scalar>() -> T {
    T::lit(1e-11).max(T::epsilon() * T::lit(1e4))
}

fn forcing_mean_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(1e2))
}

/// Time-dependent source `(f, f_Gamma)`.
pub trait Forcing<T>: Sync {
    fn sample(&self, t: T) -> BulkSurfaceField<T>;

    /// True if every sample is identically zero (lets callers skip work).
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroForcing {
    pub n_bulk: usize,
    pub n_surface: usize,
}

impl ZeroForcing {
    pub fn for_ops<T: Scalar>(ops: &DiscreteOperators<T>) -> Self {
        Self {
            n_bulk: ops.n_bulk(),
            n_surface: ops.n_surface(),
        }
    }
}

impl<T: Scalar> Forcing<T> for ZeroForcing {
    fn sample(&self, _t: T) -> BulkSurfaceField<T> {
        BulkSurfaceField::new(vec![T::zero(); self.n_bulk], vec![T::zero(); self.n_surface])
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// Forcing given by a closure of time.
pub struct FnForcing<F>(pub F);

impl<T: Scalar, F: Fn(T) -> BulkSurfaceField<T> + Sync> Forcing<T> for FnForcing<F> {
    fn sample(&self, t: T) -> BulkSurfaceField<T> {
        (self.0)(t)
    }
}

pub struct ProblemData<'f, T> {
    pub graphs: GraphPair<T>,
    pub initial: BulkSurfaceField<T>,
    pub horizon: T,
    pub forcing: &'f dyn Forcing<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub t: T,
    pub mass: T,
    pub phi_lambda: T,
    pub newton_iters: usize,
    pub residual: T,
    /// `|u^{n} - u^{n-1}|_{V0*} / dt`
    pub du_dualnorm: T,
    pub xi_mean: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub lambda: T,
    pub tau: T,
    pub newton_tol: T,
    /// Constant added back to every field after a mean-shifted solve (0 otherwise).
    pub mean_shift: T,
    /// `t_0 ..= t_N`
    pub times: Vec<T>,
    /// Nodal fields `u^0 ..= u^N`.
    pub fields: Vec<Vec<T>>,
    /// Nodal fluxes `beta_lambda(u^n)`, same indexing as `fields`.
    pub fluxes: Vec<Vec<T>>,
    /// Forcing used in step `n -> n+1`, sampled at `t_{n+1}`; length `N`.
    pub forcing: Vec<Vec<T>>,
    /// One record per stored field; record 0 describes the initial datum.
    pub records: Vec<StepRecord<T>>,
    /// Largest mean removed from a forcing sample by projection.
    pub discarded_forcing_mean: T,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, n: usize) -> T {
        self.times[n + 1] - self.times[n]
    }
}

/// `xi_i = beta_lambda(u_i)` with the bulk graph on interior nodes and the surface graph on boundary nodes.
pub fn apply_graph_pair<T: Scalar>(
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    lambda: T,
    u: &BulkSurfaceField<T>,
) -> Result<BulkSurfaceField<T>> {
    ops.check_shape(u)?;
    Ok(BulkSurfaceField::new(
        u.bulk.iter().map(|&r| graphs.bulk.yosida(lambda, r)).collect(),
        u.surface.iter().map(|&r| graphs.surface.yosida(lambda, r)).collect(),
    ))
}

/// `phi_lambda(u) = sum_bulk w envelope_bulk(u) + sum_surface w envelope_surface(u)`.
pub fn compute_phi_lambda<T: Scalar>(
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    lambda: T,
    u: &BulkSurfaceField<T>,
) -> Result<T> {
    let v = ops.to_nodal(u)?;
    Ok(phi_lambda_nodal(ops, graphs, lambda, &v))
}

pub fn phi_lambda_nodal<T: Scalar>(
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    lambda: T,
    u: &[T],
) -> T {
    u.iter()
        .enumerate()
        .map(|(i, &r)| {
            let g = match ops.node_kind(i) {
                NodeKind::Bulk => &graphs.bulk,
                NodeKind::Surface => &graphs.surface,
            };
            ops.weights()[i] * g.envelope(lambda, r)
        })
        .sum()
}

/// Same as [`phi_lambda_nodal`] with the unregularized antiderivatives.
pub fn phi_nodal<T: Scalar>(ops: &DiscreteOperators<T>, graphs: &GraphPair<T>, u: &[T]) -> T {
    u.iter()
        .enumerate()
        .map(|(i, &r)| {
            let g = match ops.node_kind(i) {
                NodeKind::Bulk => &graphs.bulk,
                NodeKind::Surface => &graphs.surface,
            };
            ops.weights()[i] * g.antiderivative(r)
        })
        .sum()
}

struct NewtonRun<T> {
    outcome: StepOutcome<T>,
    converged: bool,
}

/// Rounding level of the step residual at `u`, in the residual's weighted norm.
///
/// Each nodal residual entry is bounded by `eps` times the sum of the magnitudes entering it,
/// where a flux perturbed by one rounding unit of `u` moves by `slope |u| eps`. A residual
/// below this level cannot be reduced further in the working precision.
#[allow(clippy::too_many_arguments)]
pub fn residual_floor<T: Scalar>(
    ops: &DiscreteOperators<T>,
    graphs: &GraphPair<T>,
    lambda: T,
    u: &[T],
    u_prev: &[T],
    f: &[T],
    xi: &[T],
    dt: T,
) -> T {
    let w = ops.weights();
    let spread: Vec<T> = (0..u.len())
        .map(|j| {
            let g = match ops.node_kind(j) {
                NodeKind::Bulk => &graphs.bulk,
                NodeKind::Surface => &graphs.surface,
            };
            xi[j].abs() + g.regularize(lambda, u[j]).slope * u[j].abs()
        })
        .collect();
    let mut acc = T::zero();
    for i in 0..u.len() {
        let coupling = ops
            .stiffness()
            .row(i)
            .fold(T::zero(), |s, (j, k)| s + k.abs() * spread[j]);
        let entry = T::epsilon() * (coupling + w[i] * ((u[i].abs() + u_prev[i].abs()) / dt + f[i].abs()));
        acc = acc + entry * entry / w[i];
    }
    acc.sqrt()
}

/// Result of one implicit step.
#[derive(Debug, Clone)]
pub struct StepOutcome<T> {
    pub u: Vec<T>,
    pub xi: Vec<T>,
    pub iterations: usize,
    pub residual: T,
}

/// Single-run solver state: operators, graphs, parameters and a cached factorization.
///
/// Each step minimizes the convex functional
/// `E(u) = |u - u_prev - dt f|_{V0*}^2 / (2 dt) + phi_lambda(u)` on the affine set of fields
/// with the mass of `u_prev`. The Newton direction is a descent direction for `E`
/// and the step length is the exact minimizer of `E` along it.
pub struct Stepper<'a, T> {
    ops: &'a DiscreteOperators<T>,
    ctx: &'a DualSolverContext<'a, T>,
    graphs: &'a GraphPair<T>,
    params: StepParams<T>,
    surface: Vec<bool>,
    cache: Option<(Vec<T>, T, BandedCholesky<T>)>,
    factorizations: usize,
}

impl<'a, T: Scalar> Stepper<'a, T> {
    pub fn new(
        ctx: &'a DualSolverContext<'a, T>,
        graphs: &'a GraphPair<T>,
        params: StepParams<T>,
    ) -> Result<Self> {
        params.validate()?;
        let ops = ctx.ops();
        let surface = (0..ops.n_nodes())
            .map(|i| ops.node_kind(i) == NodeKind::Surface)
            .collect();
        Ok(Self {
            ops,
            ctx,
            graphs,
            params,
            surface,
            cache: None,
            factorizations: 0,
        })
    }

    /// Number of Cholesky factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    fn evaluate(&self, lambda: T, u: &[T], xi: &mut [T], slope: &mut [T]) {
        for i in 0..u.len() {
            let g = if self.surface[i] { &self.graphs.surface } else { &self.graphs.bulk };
            let reg = g.regularize(lambda, u[i]);
            xi[i] = reg.yosida;
            slope[i] = reg.slope;
        }
    }

    /// Derivative of `E` along `u + alpha du`, given `w0 = F^-1(u - u_prev - dt f)` and `z = F^-1 du`.
    #[allow(clippy::too_many_arguments)]
    fn line_slope(&self, lambda: T, u: &[T], du: &[T], w0: &[T], z: &[T], dt: T, alpha: T) -> (T, T) {
        let weights = self.ops.weights();
        let mut acc = T::zero();
        let mut scale = T::zero();
        for i in 0..u.len() {
            let graph = if self.surface[i] { &self.graphs.surface } else { &self.graphs.bulk };
            let grad = (w0[i] + alpha * z[i]) / dt + graph.yosida(lambda, u[i] + alpha * du[i]);
            acc = acc + weights[i] * grad * du[i];
            scale = scale + weights[i] * (grad * du[i]).abs();
        }
        (acc, scale)
    }

    /// Fills `res` and returns the weighted norm.
    fn residual(&self, u: &[T], u_prev: &[T], f: &[T], dt: T, xi: &[T], res: &mut [T]) -> T {
        let w = self.ops.weights();
        self.ops.stiffness().mul_vec_into(xi, res);
        let mut acc = T::zero();
        for i in 0..u.len() {
            res[i] = res[i] + w[i] * ((u[i] - u_prev[i]) / dt - f[i]);
            acc = acc + res[i] * res[i] / w[i];
        }
        acc.sqrt()
    }

    /// One backward Euler step of size `dt` from `u_prev` with nodal forcing `f`.
    ///
    /// If Newton stalls from `u_prev`, the step is re-solved along `lambda 2^k, ..., 2 lambda`
    /// (starting at or above 1), each solve warm-starting the next, before the final solve at `lambda`.
    pub fn step(&mut self, u_prev: &[T], f: &[T], dt: T) -> Result<StepOutcome<T>> {
        let lambda = self.params.lambda;
        let first = self.newton(u_prev.to_vec(), u_prev, f, dt, lambda)?;
        if first.converged {
            return Ok(first.outcome);
        }
        let mut levels = Vec::new();
        let mut level = lambda;
        while level < T::one() && levels.len() < 64 {
            level = level * T::two();
            levels.push(level);
        }
        if levels.is_empty() {
            return Err(self.stalled(first.outcome.iterations, first.outcome.residual, &first.outcome.u));
        }
        debug!("Newton stalled at lambda {lambda}; continuing from lambda {level}");
        let mut spent = first.outcome.iterations;
        let mut u = u_prev.to_vec();
        for &level in levels.iter().rev() {
            let warm = self.newton(u, u_prev, f, dt, level)?;
            spent += warm.outcome.iterations;
            u = warm.outcome.u;
        }
        let last = self.newton(u, u_prev, f, dt, lambda)?;
        let mut outcome = last.outcome;
        outcome.iterations += spent;
        if last.converged {
            Ok(outcome)
        } else {
            Err(self.stalled(outcome.iterations, outcome.residual, &outcome.u))
        }
    }

    /// Damped semismooth Newton from `u` at regularization `lambda`; returns the last iterate either way.
    fn newton(&mut self, mut u: Vec<T>, u_prev: &[T], f: &[T], dt: T, lambda: T) -> Result<NewtonRun<T>> {
        let n = u_prev.len();
        let p = self.params;
        let w = self.ops.weights().to_vec();
        let mut xi = vec![T::zero(); n];
        let mut slope = vec![T::zero(); n];
        let mut res = vec![T::zero(); n];
        self.evaluate(lambda, &u, &mut xi, &mut slope);
        let mut norm = self.residual(&u, u_prev, f, dt, &xi, &mut res);

        let mut trial = vec![T::zero(); n];
        let mut trial_xi = vec![T::zero(); n];
        let mut trial_slope = vec![T::zero(); n];
        let mut trial_res = vec![T::zero(); n];
        let mut a_dxi = vec![T::zero(); n];
        let finish = |u, xi, iterations, residual, converged| NewtonRun {
            outcome: StepOutcome {
                u,
                xi,
                iterations,
                residual,
            },
            converged,
        };
        let mut previous = T::infinity();
        for it in 0..=p.newton_max_iter {
            if norm <= p.newton_tol {
                return Ok(finish(u, xi, it, norm, true));
            }
            // stagnation below the rounding floor counts as convergence
            if norm > previous * T::half()
                && norm <= residual_floor(self.ops, self.graphs, lambda, &u, u_prev, f, &xi, dt)
            {
                return Ok(finish(u, xi, it, norm, true));
            }
            previous = norm;
            if it == p.newton_max_iter {
                break;
            }
            let reuse = matches!(&self.cache, Some((d, cached_dt, _)) if *cached_dt == dt && *d == slope);
            if !reuse {
                let active: Vec<bool> = slope.iter().map(|&d| d > T::zero()).collect();
                let shift: Vec<T> = (0..n)
                    .map(|i| if active[i] { w[i] / (dt * slope[i]) } else { T::zero() })
                    .collect();
                let chol = BandedCholesky::factor_masked(self.ops.stiffness(), self.ops.band(), &active, &shift)
                    .map_err(|source| StepError::Linear { step: 0, source })?;
                self.factorizations += 1;
                self.cache = Some((slope.clone(), dt, chol));
            }
            let chol = &self.cache.as_ref().expect("factorization cached").2;
            let mut dxi: Vec<T> = (0..n)
                .map(|i| if slope[i] > T::zero() { -res[i] } else { T::zero() })
                .collect();
            chol.solve_in_place(&mut dxi);
            self.ops.stiffness().mul_vec_into(&dxi, &mut a_dxi);
            let du: Vec<T> = (0..n)
                .map(|i| {
                    if slope[i] > T::zero() {
                        dxi[i] / slope[i]
                    } else {
                        dt * (-res[i] - a_dxi[i]) / w[i]
                    }
                })
                .collect();

            // E is convex and piecewise quadratic along du: minimize it exactly on (0, 1]
            let g0: Vec<T> = (0..n).map(|i| u[i] - u_prev[i] - dt * f[i]).collect();
            let w0 = self.ctx.f_inverse_projected(&g0)?;
            let z = self.ctx.f_inverse_projected(&du)?;
            let (h0, scale) = self.line_slope(lambda, &u, &du, &w0, &z, dt, T::zero());
            let rounding = scale * T::epsilon() * T::lit(1e3);
            let exact = if h0 < -rounding {
                Some(self.line_minimizer(lambda, &u, &du, &w0, &z, dt, h0))
            } else {
                None
            };
            // near the solution the predicted decrease drowns in rounding; fall back to the residual
            if exact.is_none() && norm <= residual_floor(self.ops, self.graphs, lambda, &u, u_prev, f, &xi, dt) {
                return Ok(finish(u, xi, it, norm, true));
            }
            let mut alpha = exact.unwrap_or_else(T::one);
            let mut accepted = false;
            for _ in 0..=p.max_halvings {
                for i in 0..n {
                    trial[i] = u[i] + alpha * du[i];
                }
                self.evaluate(lambda, &trial, &mut trial_xi, &mut trial_slope);
                let trial_norm = self.residual(&trial, u_prev, f, dt, &trial_xi, &mut trial_res);
                if exact.is_some() || trial_norm < norm {
                    std::mem::swap(&mut u, &mut trial);
                    std::mem::swap(&mut xi, &mut trial_xi);
                    std::mem::swap(&mut slope, &mut trial_slope);
                    std::mem::swap(&mut res, &mut trial_res);
                    norm = trial_norm;
                    accepted = true;
                    break;
                }
                alpha = alpha * p.backtrack;
            }
            if !accepted {
                let floor = residual_floor(self.ops, self.graphs, lambda, &u, u_prev, f, &xi, dt);
                debug!("line search failed at Newton iteration {it}, residual {norm}, rounding floor {floor}");
                let converged = norm <= floor;
                return Ok(finish(u, xi, it + 1, norm, converged));
            }
        }
        let floor = residual_floor(self.ops, self.graphs, lambda, &u, u_prev, f, &xi, dt);
        let converged = norm <= floor;
        Ok(finish(u, xi, p.newton_max_iter, norm, converged))
    }

    /// Root of the monotone line derivative on (0, 1], or 1 if it is still negative there.
    #[allow(clippy::too_many_arguments)]
    fn line_minimizer(&self, lambda: T, u: &[T], du: &[T], w0: &[T], z: &[T], dt: T, h0: T) -> T {
        let (h1, _) = self.line_slope(lambda, u, du, w0, z, dt, T::one());
        if h1 <= T::zero() {
            return T::one();
        }
        // Illinois false position; the derivative is piecewise linear so this terminates quickly
        let (mut a, mut ha, mut b, mut hb) = (T::zero(), h0, T::one(), h1);
        let mut side = 0i8;
        for _ in 0..100 {
            let c = (a * hb - b * ha) / (hb - ha);
            let (hc, _) = self.line_slope(lambda, u, du, w0, z, dt, c);
            if hc == T::zero() || (b - a) <= T::epsilon() * T::lit(4.0) {
                return c;
            }
            if hc < T::zero() {
                a = c;
                ha = hc;
                if side == -1 {
                    hb = hb * T::half();
                }
                side = -1;
            } else {
                b = c;
                hb = hc;
                if side == 1 {
                    ha = ha * T::half();
                }
                side = 1;
            }
            if hc.abs() <= h0.abs() * T::epsilon() * T::lit(16.0) {
                return c;
            }
        }
        (a + b) * T::half()
    }

    fn stalled(&self, iterations: usize, residual: T, best: &[T]) -> StepError {
        StepError::NewtonStalled {
            step: 0,
            iterations,
            residual: residual.to_f64().unwrap_or(f64::NAN),
            best: best.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }
}

fn at_step(err: StepError, step: usize) -> StepError {
    match err {
        StepError::NewtonStalled {
            iterations,
            residual,
            best,
            ..
        } => StepError::NewtonStalled {
            step,
            iterations,
            residual,
            best,
        },
        StepError::Linear { source, .. } => StepError::Linear { step, source },
        other => other,
    }
}

/// Step sizes covering `[0, horizon]`; the last one is shortened if `horizon / tau` is not integral.
pub fn time_grid<T: Scalar>(tau: T, horizon: T) -> Vec<T> {
    let mut times = vec![T::zero()];
    if horizon <= T::zero() {
        return times;
    }
    let ratio = horizon / tau;
    let whole = ratio.round();
    let steps = if (ratio - whole).abs() <= T::lit(1e-9) * ratio.max(T::one()) {
        whole.to_usize().unwrap_or(0)
    } else {
        ratio.ceil().to_usize().unwrap_or(0)
    };
    for n in 1..=steps {
        let t = (tau * T::from_usize_lossy(n)).min(horizon);
        times.push(if n == steps { horizon } else { t });
    }
    times
}

/// Runs the data as given (no mean shift); any initial mean is carried along.
pub fn run<T: Scalar>(
    data: &ProblemData<'_, T>,
    params: &StepParams<T>,
    ops: &DiscreteOperators<T>,
    ctx: &DualSolverContext<'_, T>,
) -> Result<Trajectory<T>> {
    params.validate()?;
    let times = time_grid(params.tau, data.horizon);
    let u0 = ops.to_nodal(&data.initial)?;
    let mut stepper = Stepper::new(ctx, &data.graphs, *params)?;
    let lambda = params.lambda;

    let flux = |u: &[T]| -> Vec<T> {
        u.iter()
            .enumerate()
            .map(|(i, &r)| match ops.node_kind(i) {
                NodeKind::Bulk => data.graphs.bulk.yosida(lambda, r),
                NodeKind::Surface => data.graphs.surface.yosida(lambda, r),
            })
            .collect()
    };
    let xi0 = flux(&u0);
    let mut records = vec![StepRecord {
        step: 0,
        t: T::zero(),
        mass: ops.mean_nodal(&u0),
        phi_lambda: phi_lambda_nodal(ops, &data.graphs, lambda, &u0),
        newton_iters: 0,
        residual: T::zero(),
        du_dualnorm: T::zero(),
        xi_mean: ops.mean_nodal(&xi0),
    }];
    let mut fields = vec![u0];
    let mut fluxes = vec![xi0];
    let mut forcing = Vec::with_capacity(times.len().saturating_sub(1));
    let mut discarded = T::zero();

    for n in 0..times.len() - 1 {
        let dt = times[n + 1] - times[n];
        let mut f = ops.to_nodal(&data.forcing.sample(times[n + 1]))?;
        let m = ops.mean_nodal(&f);
        if m.abs() > forcing_mean_tolerance() {
            if !params.project_forcing {
                return Err(StepError::ForcingNotMeanZero {
                    step: n,
                    mean: m.to_f64().unwrap_or(f64::NAN),
                });
            }
            info!("step {n}: discarded forcing mean {m}");
        }
        if params.project_forcing {
            let removed = ops.project_nodal(&mut f);
            discarded = discarded.max(removed.abs());
        }
        let out = stepper
            .step(&fields[n], &f, dt)
            .map_err(|e| at_step(e, n))?;
        let du: Vec<T> = out.u.iter().zip(&fields[n]).map(|(&a, &b)| a - b).collect();
        let du_norm = ctx.dual_norm_projected(&du)? / dt;
        records.push(StepRecord {
            step: n + 1,
            t: times[n + 1],
            mass: ops.mean_nodal(&out.u),
            phi_lambda: phi_lambda_nodal(ops, &data.graphs, lambda, &out.u),
            newton_iters: out.iterations,
            residual: out.residual,
            du_dualnorm: du_norm,
            xi_mean: ops.mean_nodal(&out.xi),
        });
        fields.push(out.u);
        fluxes.push(out.xi);
        forcing.push(f);
    }
    debug!(
        "run finished: {} steps, {} factorizations",
        times.len() - 1,
        stepper.factorizations()
    );
    Ok(Trajectory {
        lambda,
        tau: params.tau,
        newton_tol: params.newton_tol,
        mean_shift: T::zero(),
        times,
        fields,
        fluxes,
        forcing,
        records,
        discarded_forcing_mean: discarded,
    })
}

/// Equivalent mean-zero problem: graphs `r -> beta(r + m0)` and initial datum `P u0`,
/// with `m0 = m(u0)`. Returns the shifted data and `m0`.
pub fn shift_mean_mode<'f, T: Scalar>(
    ops: &DiscreteOperators<T>,
    data: &ProblemData<'f, T>,
) -> Result<(ProblemData<'f, T>, T)> {
    let m0 = ops.mean(&data.initial)?;
    let shifted = ProblemData {
        graphs: if m0 == T::zero() {
            data.graphs.clone()
        } else {
            data.graphs.translated(m0)
        },
        initial: ops.project(&data.initial)?,
        horizon: data.horizon,
        forcing: data.forcing,
    };
    Ok((shifted, m0))
}

/// Solves the mean-shifted problem and reconstructs `u^n = v^n + m0`.
pub fn run_mean_shifted<T: Scalar>(
    data: &ProblemData<'_, T>,
    params: &StepParams<T>,
    ops: &DiscreteOperators<T>,
    ctx: &DualSolverContext<'_, T>,
) -> Result<Trajectory<T>> {
    let (shifted, m0) = shift_mean_mode(ops, data)?;
    if m0 != T::zero() {
        info!("mean-shift mode: m0 = {m0}");
    }
    let mut traj = run(&shifted, params, ops, ctx)?;
    for u in &mut traj.fields {
        u.iter_mut().for_each(|x| *x = *x + m0);
    }
    for r in &mut traj.records {
        r.mass = r.mass + m0;
    }
    traj.mean_shift = m0;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_operators, Geometry};
    use crate::graph::{make_preset, Preset};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn strip(lx: f64, nx: usize, ny: usize) -> DiscreteOperators<f64> {
        build_operators(Geometry::Strip { lx, nx, ny }).unwrap()
    }

    fn linear_pair() -> GraphPair<f64> {
        GraphPair::same(make_preset(Preset::Linear { c0: 1.0 }).unwrap())
    }

    fn heleshaw_pair() -> GraphPair<f64> {
        GraphPair::same(make_preset(Preset::HeleShawClipped { c0_prime: 1.0 }).unwrap())
    }

    fn random_mean_zero(ops: &DiscreteOperators<f64>, seed: u64, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..ops.n_nodes()).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
        ops.project_nodal(&mut v);
        v
    }

    #[test]
    fn graph_pair_application() {
        let ops = strip(1.0, 4, 2);
        let z = apply_graph_pair(&ops, &linear_pair(), 1.0, &ops.zeros()).unwrap();
        assert!(z.bulk.iter().chain(&z.surface).all(|&x| x == 0.0));

        let u = ops.sample(|p, _| p.x + 0.3);
        let xi = apply_graph_pair(&ops, &linear_pair(), 1.0, &u).unwrap();
        for (a, b) in xi.bulk.iter().zip(&u.bulk) {
            assert_eq!(*a, b / 2.0);
        }

        let pair = GraphPair::new(
            make_preset(Preset::HeleShawClipped { c0_prime: 1.0 }).unwrap(),
            make_preset(Preset::Linear { c0: 1.0 }).unwrap(),
        );
        let lambda = 0.3;
        let u = BulkSurfaceField::new(vec![0.5; ops.n_bulk()], vec![2.0; ops.n_surface()]);
        let xi = apply_graph_pair(&ops, &pair, lambda, &u).unwrap();
        assert!(xi.bulk.iter().all(|&x| x == 0.0));
        assert!(xi.surface.iter().all(|&x| (x - 2.0 / (1.0 + lambda)).abs() < 1e-15));
    }

    #[test]
    fn phi_lambda_of_quadratic_envelope() {
        let ops = strip(1.0, 8, 4);
        let u = ops.from_nodal(&random_mean_zero(&ops, 3, 1.0));
        let phi = compute_phi_lambda(&ops, &linear_pair(), 1.0, &u).unwrap();
        let h2 = ops.inner_h(&u, &u).unwrap();
        assert!((phi - 0.25 * h2).abs() < 1e-14);
        assert_eq!(compute_phi_lambda(&ops, &linear_pair(), 1.0, &ops.zeros()).unwrap(), 0.0);
        let hs = heleshaw_pair();
        for seed in 0..20 {
            let u = ops.from_nodal(&random_mean_zero(&ops, seed, 3.0));
            let a = compute_phi_lambda(&ops, &hs, 0.2, &u).unwrap();
            let b = compute_phi_lambda(&ops, &hs, 0.1, &u).unwrap();
            assert!(b >= a);
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let ops = strip(1.0, 8, 4);
        let pair = heleshaw_pair();
        let ctx = DualSolverContext::new(&ops).unwrap();
        let mut stepper = Stepper::new(&ctx, &pair, StepParams::new(0.01, 0.05)).unwrap();
        let zero = vec![0.0; ops.n_nodes()];
        let out = stepper.step(&zero, &zero, 0.01).unwrap();
        assert!(out.u.iter().all(|&x| x == 0.0));
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn linear_step_matches_dense_solve() {
        let ops = strip(1.0, 8, 4);
        let pair = linear_pair();
        let (tau, lambda) = (0.01, 0.1);
        let u0 = ops.to_nodal(&ops.sample(|p, _| (2.0 * PI * p.x).cos())).unwrap();
        let ctx = DualSolverContext::new(&ops).unwrap();
        let mut stepper = Stepper::new(&ctx, &pair, StepParams::new(tau, lambda)).unwrap();
        let zero = vec![0.0; ops.n_nodes()];
        let out = stepper.step(&u0, &zero, tau).unwrap();
        let n = ops.n_nodes();
        let c = 1.0 / (1.0 + lambda);
        let sys = DMatrix::from_fn(n, n, |i, j| {
            let m = if i == j { ops.weights()[i] / tau } else { 0.0 };
            m + c * ops.stiffness().get(i, j)
        });
        let rhs = DVector::from_iterator(n, (0..n).map(|i| ops.weights()[i] * u0[i] / tau));
        let oracle = sys.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert!((out.u[i] - oracle[i]).abs() < 1e-12);
        }
        // a y-constant mode decays by the discrete symbol
        let hx = 1.0 / 8.0;
        let k2 = (2.0 - 2.0 * (2.0 * PI * hx).cos()) / (hx * hx);
        let factor = 1.0 / (1.0 + tau * c * k2);
        for i in 0..n {
            assert!((out.u[i] - factor * u0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_is_conserved_for_random_data() {
        let ops = strip(1.0, 16, 8);
        let f_field = random_mean_zero(&ops, 99, 2.0);
        let forcing = FnForcing(|t: f64| ops.from_nodal(&f_field.iter().map(|x| x * (3.0 * t).cos()).collect::<Vec<_>>()));
        for pair in [linear_pair(), heleshaw_pair()] {
            let data = ProblemData {
                graphs: pair,
                initial: ops.from_nodal(&random_mean_zero(&ops, 5, 1.5)),
                horizon: 0.2,
                forcing: &forcing,
            };
            let ctx = DualSolverContext::new(&ops).unwrap();
            let traj = run(&data, &StepParams::new(0.01, 0.05), &ops, &ctx).unwrap();
            let m0 = traj.records[0].mass;
            for r in &traj.records {
                assert!((r.mass - m0).abs() < 1e-12, "drift {}", r.mass - m0);
                assert!(r.residual <= 1e-11);
            }
        }
    }

    #[test]
    fn stiff_step_falls_back_to_lambda_continuation() {
        // heleshaw at small lambda stalls from u_prev and needs the continuation path
        let ops = strip(1.0, 32, 16);
        let pair = heleshaw_pair();
        let ctx = DualSolverContext::new(&ops).unwrap();
        let params = StepParams::new(0.01, 0.01);
        let mut stepper = Stepper::new(&ctx, &pair, params).unwrap();
        let u0 = random_mean_zero(&ops, 11, 1.5);
        let f = random_mean_zero(&ops, 7, 2.0);
        let out = stepper.step(&u0, &f, 0.01).unwrap();
        assert!(out.iterations > params.newton_max_iter, "{}", out.iterations);
        let mut res = vec![0.0; u0.len()];
        let norm = stepper.residual(&out.u, &u0, &f, 0.01, &out.xi, &mut res);
        assert!(norm <= params.newton_tol, "{norm}");
        let mass = |v: &[f64]| v.iter().zip(ops.weights()).map(|(x, w)| x * w).sum::<f64>();
        assert!(mass(&out.u).abs() < 1e-12);
    }

    #[test]
    fn residual_floor_scales_with_the_state() {
        let ops = strip(1.0, 8, 4);
        let pair = linear_pair();
        let zero = vec![0.0; ops.n_nodes()];
        assert_eq!(residual_floor(&ops, &pair, 0.1, &zero, &zero, &zero, &zero, 0.01), 0.0);
        let u = random_mean_zero(&ops, 2, 1.0);
        let xi: Vec<f64> = u.iter().map(|x| x / 1.1).collect();
        let one = residual_floor(&ops, &pair, 0.1, &u, &u, &zero, &xi, 0.01);
        let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
        let xi2: Vec<f64> = xi.iter().map(|x| 2.0 * x).collect();
        let two = residual_floor(&ops, &pair, 0.1, &u2, &u2, &zero, &xi2, 0.01);
        assert!((two - 2.0 * one).abs() <= 1e-15 * two);
        assert!(one > 0.0 && one < 1e-12);
    }

    #[test]
    fn non_mean_zero_forcing() {
        let ops = strip(1.0, 8, 4);
        let forcing = FnForcing(|_t: f64| ops.constant(1.0));
        let data = ProblemData {
            graphs: linear_pair(),
            initial: ops.zeros(),
            horizon: 0.05,
            forcing: &forcing,
        };
        let ctx = DualSolverContext::new(&ops).unwrap();
        let mut params = StepParams::new(0.01, 0.1);
        assert!(matches!(
            run(&data, &params, &ops, &ctx),
            Err(StepError::ForcingNotMeanZero { step: 0, .. })
        ));
        params.project_forcing = true;
        let traj = run(&data, &params, &ops, &ctx).unwrap();
        assert!((traj.discarded_forcing_mean - 1.0).abs() < 1e-14);
        assert!(traj.fields.last().unwrap().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn richardson_consistency() {
        let ops = strip(1.0, 8, 4);
        let pair = linear_pair();
        let u0 = ops.to_nodal(&ops.sample(|p, _| (2.0 * PI * p.x).cos() + 0.3 * (4.0 * PI * p.x).sin())).unwrap();
        let zero = vec![0.0; ops.n_nodes()];
        let mut diffs = Vec::new();
        for tau in [0.002, 0.001, 0.0005] {
            let ctx = DualSolverContext::new(&ops).unwrap();
            let mut s = Stepper::new(&ctx, &pair, StepParams::new(tau, 0.1)).unwrap();
            let one = s.step(&u0, &zero, tau).unwrap().u;
            let half = s.step(&u0, &zero, tau / 2.0).unwrap().u;
            let two = s.step(&half, &zero, tau / 2.0).unwrap().u;
            diffs.push(one.iter().zip(&two).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        for w in diffs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.0 && ratio < 5.0, "ratio {ratio}");
        }
    }

    #[test]
    fn time_grid_shortens_last_step() {
        assert_eq!(time_grid(0.25, 1.0), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g: Vec<f64> = time_grid(0.3, 1.0);
        assert_eq!(g.len(), 5);
        assert!((g[4] - 1.0).abs() < 1e-15 && (g[4] - g[3] - 0.1).abs() < 1e-12);
        assert_eq!(time_grid(0.1, 0.0), vec![0.0]);
        assert_eq!(time_grid(1e-2, 1.0).len(), 101);
    }

    #[test]
    fn runs_are_deterministic_and_zero_stays_zero() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let zf = ZeroForcing::for_ops(&ops);
        let zero = ProblemData {
            graphs: heleshaw_pair(),
            initial: ops.zeros(),
            horizon: 0.1,
            forcing: &zf,
        };
        let traj = run(&zero, &StepParams::new(0.01, 0.05), &ops, &ctx).unwrap();
        assert!(traj.fields.iter().flatten().all(|&x| x == 0.0));

        let data = ProblemData {
            graphs: heleshaw_pair(),
            initial: ops.from_nodal(&random_mean_zero(&ops, 8, 2.0)),
            horizon: 0.1,
            forcing: &zf,
        };
        let a = run(&data, &StepParams::new(0.01, 0.05), &ops, &ctx).unwrap();
        let b = run(&data, &StepParams::new(0.01, 0.05), &ops, &ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_shift_reconstruction() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let zf = ZeroForcing::for_ops(&ops);
        // constants are steady states of the linear flow
        let data = ProblemData {
            graphs: linear_pair(),
            initial: ops.constant(0.7),
            horizon: 0.05,
            forcing: &zf,
        };
        let (shifted, m0) = shift_mean_mode(&ops, &data).unwrap();
        assert!((m0 - 0.7).abs() < 1e-15);
        assert!(ops.to_nodal(&shifted.initial).unwrap().iter().all(|x| x.abs() < 1e-15));
        let traj = run_mean_shifted(&data, &StepParams::new(0.01, 0.1), &ops, &ctx).unwrap();
        for u in &traj.fields {
            assert!(u.iter().all(|x| (x - 0.7).abs() < 1e-14));
        }

        // zero mean leaves the problem untouched
        let data = ProblemData {
            graphs: heleshaw_pair(),
            initial: ops.sample(|p, _| if p.x < 0.5 { 1.0 } else { -1.0 }),
            horizon: 0.05,
            forcing: &zf,
        };
        let (same, m0) = shift_mean_mode(&ops, &data).unwrap();
        assert_eq!(m0, 0.0);
        assert_eq!(same.graphs, data.graphs);
        assert_eq!(same.initial, data.initial);
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = StepParams::new(0.0, 0.1);
        assert!(p.validate().is_err());
        p.tau = 0.1;
        p.lambda = -1.0;
        assert!(p.validate().is_err());
        p.lambda = 0.1;
        p.backtrack = 1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn chain_rule_inequality_per_step() {
        let ops = strip(1.0, 16, 8);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let zf = ZeroForcing::for_ops(&ops);
        let pair = GraphPair::same(make_preset(Preset::FastDiffusionClipped { m: 0.5, m0: 1.0, pieces: 64 }).unwrap());
        let data = ProblemData {
            graphs: pair,
            initial: ops.from_nodal(&random_mean_zero(&ops, 12, 2.0)),
            horizon: 0.1,
            forcing: &zf,
        };
        let traj = run(&data, &StepParams::new(0.01, 0.05), &ops, &ctx).unwrap();
        for n in 0..traj.steps() {
            let du: Vec<f64> = traj.fields[n + 1].iter().zip(&traj.fields[n]).map(|(a, b)| a - b).collect();
            let rhs = ops.inner_nodal(&traj.fluxes[n + 1], &du);
            let lhs = traj.records[n + 1].phi_lambda - traj.records[n].phi_lambda;
            assert!(lhs <= rhs + 1e-12);
        }
    }
}
