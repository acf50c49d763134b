//! Scalar maximal monotone graphs with exact resolvents and Moreau-Yosida envelopes.
//!
//! A graph is stored as a finite list of knots `b_0 < ... < b_{K-1}`, each with a
//! left and right limit, joined by affine pieces. A knot with `left < right`
//! is a vertical segment, i.e. the graph is multivalued there. The two outer
//! pieces are rays whose slope and intercept form the far field.
//!
//! For `lambda > 0` the map `s -> s + lambda * beta(s)` is strictly increasing and
//! onto, so the resolvent `J_lambda = (I + lambda beta)^{-1}` is single valued. On
//! an affine piece `beta(s) = a s + c` it is `(r - lambda c) / (1 + lambda a)`; on the
//! image of a vertical segment at `b` it is `b`. Everything downstream (Yosida
//! approximation, its generalized derivative, the envelope) follows in closed form.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph parameters: {0}")]
    InvalidParams(String),
    #[error("graph is not monotone: {0}")]
    NotMonotone(String),
    #[error("far field is not affine beyond +/-M0: {0}")]
    NotAffineFarField(String),
    #[error("far-field intercept {intercept} is negative (set relax_intercept to admit it)")]
    NegativeIntercept { intercept: f64 },
    #[error("graph pair far fields differ: {0}")]
    FarFieldMismatch(String),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Closed interval `[lo, hi]`; `lo == hi` where the graph is single valued.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn point(x: T) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn contains(&self, x: T, tol: T) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }

    pub fn max_abs(&self) -> T {
        self.lo.abs().max(self.hi.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot<T> {
    pub at: T,
    pub left: T,
    pub right: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine<T> {
    pub slope: T,
    pub intercept: T,
}

impl<T: Scalar> Affine<T> {
    #[inline]
    pub fn at(&self, r: T) -> T {
        self.slope * r + self.intercept
    }
}

/// Far-field data read off the outer rays, together with the declared threshold `m0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarField<T> {
    pub c0: T,
    pub c0_plus: T,
    pub c0_minus: T,
    pub m0: T,
}

/// `beta_hat(r) >= c1 r^2 - c2` for every real `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthCertificate<T> {
    pub c1: T,
    pub c2: T,
}

/// Certified far-field triple `(c0, c0', M0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearBoundCertificate<T> {
    pub c0: T,
    pub c0_prime: T,
    pub m0: T,
}

/// Output of one resolvent evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularized<T> {
    /// `J_lambda(r)`
    pub resolvent: T,
    /// `beta_lambda(r)`
    pub yosida: T,
    /// Right-hand derivative of `beta_lambda` at `r`, in `[0, 1/lambda]`.
    pub slope: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneGraph<T> {
    knots: Vec<Knot<T>>,
    // pieces[p] lives between knots[p-1] and knots[p]; pieces[0] and pieces[K] are rays.
    pieces: Vec<Affine<T>>,
    // integral of beta from the first knot (or from 0 without knots) up to each knot
    integral_at_knot: Vec<T>,
    hat_offset: T,
    m0: T,
    growth: Option<GrowthCertificate<T>>,
    relax_intercept: bool,
}

impl<T: Scalar> MonotoneGraph<T> {
    /// Single-valued affine graph `beta(r) = slope * r + intercept`.
    pub fn affine(slope: T, intercept: T, m0: T) -> Result<Self> {
        if !(slope.is_finite() && intercept.is_finite()) || slope < T::zero() {
            return Err(GraphError::InvalidParams(format!(
                "affine graph needs finite nonnegative slope, got {slope}"
            )));
        }
        Self::assemble(Vec::new(), vec![Affine { slope, intercept }], m0)
    }

    /// Piecewise-affine graph through `knots`, continued by rays of the given slopes.
    pub fn from_knots(knots: Vec<Knot<T>>, left_slope: T, right_slope: T, m0: T) -> Result<Self> {
        if knots.is_empty() {
            return Err(GraphError::InvalidParams(
                "at least one knot required; use `affine` for a single line".into(),
            ));
        }
        for k in &knots {
            if !(k.at.is_finite() && k.left.is_finite() && k.right.is_finite()) {
                return Err(GraphError::InvalidParams("non-finite knot".into()));
            }
            if k.left > k.right {
                return Err(GraphError::NotMonotone(format!(
                    "knot at {}: left limit {} exceeds right limit {}",
                    k.at, k.left, k.right
                )));
            }
        }
        for w in knots.windows(2) {
            if w[1].at <= w[0].at {
                return Err(GraphError::InvalidParams(format!(
                    "knots must be strictly increasing ({} then {})",
                    w[0].at, w[1].at
                )));
            }
            if w[1].left < w[0].right {
                return Err(GraphError::NotMonotone(format!(
                    "value drops from {} at {} to {} at {}",
                    w[0].right, w[0].at, w[1].left, w[1].at
                )));
            }
        }
        if !(left_slope >= T::zero() && right_slope >= T::zero()) {
            return Err(GraphError::NotMonotone("ray slopes must be nonnegative".into()));
        }

        let first = knots[0];
        let last = knots[knots.len() - 1];
        let mut pieces = Vec::with_capacity(knots.len() + 1);
        pieces.push(Affine {
            slope: left_slope,
            intercept: first.left - left_slope * first.at,
        });
        for w in knots.windows(2) {
            let slope = (w[1].left - w[0].right) / (w[1].at - w[0].at);
            pieces.push(Affine {
                slope,
                intercept: w[0].right - slope * w[0].at,
            });
        }
        pieces.push(Affine {
            slope: right_slope,
            intercept: last.right - right_slope * last.at,
        });
        Self::assemble(knots, pieces, m0)
    }

    fn assemble(knots: Vec<Knot<T>>, pieces: Vec<Affine<T>>, m0: T) -> Result<Self> {
        if !(m0 > T::zero() && m0.is_finite()) {
            return Err(GraphError::InvalidParams(format!("M0 must be positive, got {m0}")));
        }
        let mut integral_at_knot = Vec::with_capacity(knots.len());
        if !knots.is_empty() {
            integral_at_knot.push(T::zero());
            for p in 1..knots.len() {
                let (a, b) = (knots[p - 1].at, knots[p].at);
                let piece = pieces[p];
                let inc = (b - a) * (piece.slope * (a + b) * T::half() + piece.intercept);
                integral_at_knot.push(integral_at_knot[p - 1] + inc);
            }
        }
        let mut graph = Self {
            knots,
            pieces,
            integral_at_knot,
            hat_offset: T::zero(),
            m0,
            growth: None,
            relax_intercept: false,
        };
        // normalize so that beta_hat(0) = 0
        graph.hat_offset = -graph.integral(T::zero());
        let c0 = graph.pieces[0].slope.min(graph.pieces[graph.pieces.len() - 1].slope);
        graph.growth = graph.growth_certificate(c0 / T::lit(4.0));
        Ok(graph)
    }

    /// Replaces the stored growth certificate by one with the given `c1`.
    pub fn with_growth_c1(mut self, c1: T) -> Self {
        self.growth = self.growth_certificate(c1);
        self
    }

    pub fn with_relaxed_intercept(mut self, relax: bool) -> Self {
        self.relax_intercept = relax;
        self
    }

    pub fn knots(&self) -> &[Knot<T>] {
        &self.knots
    }

    pub fn pieces(&self) -> &[Affine<T>] {
        &self.pieces
    }

    pub fn growth(&self) -> Option<GrowthCertificate<T>> {
        self.growth
    }

    pub fn relax_intercept(&self) -> bool {
        self.relax_intercept
    }

    pub fn far_field(&self) -> FarField<T> {
        let left = self.pieces[0];
        let right = self.pieces[self.pieces.len() - 1];
        FarField {
            c0: right.slope,
            c0_plus: right.intercept,
            c0_minus: left.intercept,
            m0: self.m0,
        }
    }

    /// Index of the piece containing `r`, or `Err(p)` if `r` sits exactly on knot `p`.
    #[inline]
    fn locate(&self, r: T) -> std::result::Result<usize, usize> {
        let p = self.knots.partition_point(|k| k.at < r);
        if p < self.knots.len() && self.knots[p].at == r {
            Err(p)
        } else {
            Ok(p)
        }
    }

    /// The set `beta(r)`.
    pub fn eval(&self, r: T) -> Interval<T> {
        match self.locate(r) {
            Err(p) => Interval {
                lo: self.knots[p].left,
                hi: self.knots[p].right,
            },
            Ok(p) => Interval::point(self.pieces[p].at(r)),
        }
    }

    fn integral(&self, r: T) -> T {
        if self.knots.is_empty() {
            let piece = self.pieces[0];
            return r * (piece.slope * r * T::half() + piece.intercept);
        }
        match self.locate(r) {
            Err(p) => self.integral_at_knot[p],
            Ok(p) => {
                let (base, acc) = if p == 0 {
                    (self.knots[0].at, T::zero())
                } else {
                    (self.knots[p - 1].at, self.integral_at_knot[p - 1])
                };
                let piece = self.pieces[p];
                acc + (r - base) * (piece.slope * (r + base) * T::half() + piece.intercept)
            }
        }
    }

    /// Convex antiderivative `beta_hat`, normalized by `beta_hat(0) = 0`
    /// (translated graphs keep the normalization of the original).
    pub fn antiderivative(&self, r: T) -> T {
        self.integral(r) + self.hat_offset
    }

    /// Resolvent, Yosida approximation and its generalized derivative in one lookup.
    #[inline]
    pub fn regularize(&self, lambda: T, r: T) -> Regularized<T> {
        let q = self.knots.partition_point(|k| k.at + lambda * k.left <= r);
        if q > 0 {
            let k = self.knots[q - 1];
            let top = k.at + lambda * k.right;
            if r <= top {
                let slope = if r < top {
                    T::one() / lambda
                } else {
                    let s = self.pieces[q].slope;
                    s / (T::one() + lambda * s)
                };
                return Regularized {
                    resolvent: k.at,
                    yosida: (r - k.at) / lambda,
                    slope,
                };
            }
        }
        let piece = self.pieces[q];
        let denom = T::one() + lambda * piece.slope;
        let mut j = (r - lambda * piece.intercept) / denom;
        if q > 0 {
            j = j.max(self.knots[q - 1].at);
        }
        if q < self.knots.len() {
            j = j.min(self.knots[q].at);
        }
        Regularized {
            resolvent: j,
            yosida: (piece.slope * r + piece.intercept) / denom,
            slope: piece.slope / denom,
        }
    }

    pub fn resolvent(&self, lambda: T, r: T) -> T {
        self.regularize(lambda, r).resolvent
    }

    pub fn yosida(&self, lambda: T, r: T) -> T {
        self.regularize(lambda, r).yosida
    }

    /// Moreau-Yosida envelope `beta_hat_lambda(r) = |r - J|^2 / (2 lambda) + beta_hat(J)`.
    pub fn envelope(&self, lambda: T, r: T) -> T {
        let reg = self.regularize(lambda, r);
        // r - J = lambda * beta_lambda(r), which avoids cancellation for small lambda
        lambda * reg.yosida * reg.yosida * T::half() + self.antiderivative(reg.resolvent)
    }

    /// Resolvent by bisection on the monotone map `s -> s + lambda beta(s)`.
    ///
    /// Independent of the closed-form path; used to cross-check it.
    pub fn resolvent_bisection(&self, lambda: T, r: T, tol: T) -> T {
        let spread = lambda * self.eval(r).max_abs();
        let (mut a, mut b) = (r - spread, r + spread);
        let stop = tol * T::one().max(r.abs());
        for _ in 0..400 {
            let mid = (a + b) * T::half();
            let img = self.eval(mid);
            if r < mid + lambda * img.lo {
                b = mid;
            } else if r > mid + lambda * img.hi {
                a = mid;
            } else {
                return mid;
            }
            if b - a <= stop {
                break;
            }
        }
        (a + b) * T::half()
    }

    /// Checks `0 in beta(0)` and `beta_hat(0) = 0`.
    pub fn check_origin(&self) -> Result<()> {
        if !self.eval(T::zero()).contains(T::zero(), T::zero()) {
            return Err(GraphError::InvalidParams("0 is not in beta(0)".into()));
        }
        if self.antiderivative(T::zero()) != T::zero() {
            return Err(GraphError::InvalidParams("beta_hat(0) != 0".into()));
        }
        Ok(())
    }

    /// Certifies that `beta(r) = c0 r + c0'` for `r > M0` and `c0 r - c0'` for `r < -M0`.
    ///
    /// Vertical segments exactly at `+/-M0` are admitted.
    pub fn linear_bound(&self) -> Result<LinearBoundCertificate<T>> {
        let ff = self.far_field();
        let left = self.pieces[0];
        let right = self.pieces[self.pieces.len() - 1];
        let tol = T::lit(1e-12);
        let close = |x: T, y: T| (x - y).abs() <= tol * T::one().max(x.abs()).max(y.abs());

        if !close(left.slope, right.slope) {
            return Err(GraphError::NotAffineFarField(format!(
                "ray slopes differ: {} on the left, {} on the right",
                left.slope, right.slope
            )));
        }
        if ff.c0 <= T::zero() {
            return Err(GraphError::NotAffineFarField("far-field slope c0 must be positive".into()));
        }
        for (p, k) in self.knots.iter().enumerate() {
            let beyond_right = k.at > ff.m0 && !close(k.at, ff.m0);
            let beyond_left = k.at < -ff.m0 && !close(k.at, -ff.m0);
            let inert = |ray: Affine<T>| {
                close(k.left, k.right)
                    && close(self.pieces[p].slope, ray.slope)
                    && close(self.pieces[p + 1].slope, ray.slope)
                    && close(self.pieces[p].intercept, ray.intercept)
                    && close(self.pieces[p + 1].intercept, ray.intercept)
            };
            if (beyond_right && !inert(right)) || (beyond_left && !inert(left)) {
                return Err(GraphError::NotAffineFarField(format!(
                    "knot at {} lies beyond M0 = {}",
                    k.at, ff.m0
                )));
            }
        }
        if !close(ff.c0_plus, -ff.c0_minus) {
            return Err(GraphError::NotAffineFarField(format!(
                "intercepts {} (right) and {} (left) are not opposite",
                ff.c0_plus, ff.c0_minus
            )));
        }
        if ff.c0_plus < T::zero() && !self.relax_intercept {
            return Err(GraphError::NegativeIntercept {
                intercept: ff.c0_plus.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(LinearBoundCertificate {
            c0: ff.c0,
            c0_prime: ff.c0_plus,
            m0: ff.m0,
        })
    }

    /// `max |beta|` over the sets `beta(M0)` and `beta(-M0)`.
    pub fn c_star(&self) -> T {
        self.eval(self.m0).max_abs().max(self.eval(-self.m0).max_abs())
    }

    /// The graph `r -> beta(r + shift)`, with `beta_hat` translated alongside.
    pub fn translated(&self, shift: T) -> Self {
        let knots: Vec<_> = self
            .knots
            .iter()
            .map(|k| Knot {
                at: k.at - shift,
                ..*k
            })
            .collect();
        let mut out = if knots.is_empty() {
            let piece = self.pieces[0];
            Self::assemble(
                Vec::new(),
                vec![Affine {
                    slope: piece.slope,
                    intercept: piece.intercept + piece.slope * shift,
                }],
                self.m0,
            )
        } else {
            let n = self.pieces.len();
            Self::from_knots(knots, self.pieces[0].slope, self.pieces[n - 1].slope, self.m0)
        }
        .expect("translation preserves validity");
        out.hat_offset = self.antiderivative(shift) - out.integral(T::zero());
        out.relax_intercept = self.relax_intercept;
        out.growth = self
            .growth
            .and_then(|g| out.growth_certificate(g.c1));
        out
    }

    /// Smallest `c2` with `beta_hat(r) >= c1 r^2 - c2` on all of R, if finite.
    pub fn growth_certificate(&self, c1: T) -> Option<GrowthCertificate<T>> {
        if !(c1 > T::zero()) {
            return None;
        }
        let k = self.knots.len();
        let h = |r: T| c1 * r * r - self.antiderivative(r);
        let mut worst = h(T::zero()).max(T::zero());
        for knot in &self.knots {
            worst = worst.max(h(knot.at));
        }
        for (p, piece) in self.pieces.iter().enumerate() {
            // on this piece h(r) = (c1 - s/2) r^2 - c r + const
            let quad = c1 - piece.slope * T::half();
            let lo = (p > 0).then(|| self.knots[p - 1].at);
            let hi = (p < k).then(|| self.knots[p].at);
            if quad > T::zero() && (lo.is_none() || hi.is_none()) {
                return None;
            }
            if quad == T::zero() {
                // linear in r: bounded on a ray only if it decreases outward
                if hi.is_none() && -piece.intercept > T::zero() {
                    return None;
                }
                if lo.is_none() && -piece.intercept < T::zero() {
                    return None;
                }
                continue;
            }
            if quad < T::zero() {
                let vertex = piece.intercept / (T::two() * quad);
                let inside = lo.is_none_or(|a| vertex > a) && hi.is_none_or(|b| vertex < b);
                if inside {
                    worst = worst.max(h(vertex));
                }
            }
        }
        Some(GrowthCertificate { c1, c2: worst })
    }
}

/// Named graph families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preset<T> {
    /// `beta(r) = c0 r`
    Linear { c0: T },
    /// Hele-Shaw graph `d I_[0,1]` clipped with slope 1 and intercept `c0'`.
    HeleShawClipped { c0_prime: T },
    /// `|r|^(m-1) r` on `[-M0, M0]` (0 < m < 1), tangent rays outside.
    FastDiffusionClipped { m: T, m0: T, pieces: usize },
    /// Zero on `(a, b)`, vertical segments at `a` and `b`, rays `c0 r -/+ c0'` outside.
    DeadzoneJump { a: T, b: T, c0: T, c0_prime: T },
    /// `|r|^(m-1) r` on `[-M0, M0]` (m > 1); the tangent intercept is negative.
    PorousClipped { m: T, m0: T, pieces: usize },
    /// Slope `c0 + c0'/M0` on `[-M0, M0]`, rays `c0 r +/- c0'` outside.
    TwoSlope { c0: T, c0_prime: T, m0: T },
}

pub const DEFAULT_POWER_PIECES: usize = 256;

pub fn make_preset<T: Scalar>(preset: Preset<T>) -> Result<MonotoneGraph<T>> {
    let bad = |msg: String| Err(GraphError::InvalidParams(msg));
    match preset {
        Preset::Linear { c0 } => {
            if !(c0 > T::zero()) {
                return bad(format!("linear: c0 must be positive, got {c0}"));
            }
            Ok(MonotoneGraph::affine(c0, T::zero(), T::one())?.with_growth_c1(c0 * T::half()))
        }
        Preset::HeleShawClipped { c0_prime } => make_preset(Preset::DeadzoneJump {
            a: T::zero(),
            b: T::one(),
            c0: T::one(),
            c0_prime,
        }),
        Preset::DeadzoneJump { a, b, c0, c0_prime } => {
            if !(a <= T::zero() && b >= T::zero() && a < b) {
                return bad(format!("deadzone_jump needs a <= 0 <= b, a < b; got a={a}, b={b}"));
            }
            if !(c0 > T::zero()) || !(c0_prime >= T::zero()) {
                return bad("deadzone_jump needs c0 > 0 and c0' >= 0".into());
            }
            let knots = vec![
                Knot {
                    at: a,
                    left: c0 * a - c0_prime,
                    right: T::zero(),
                },
                Knot {
                    at: b,
                    left: T::zero(),
                    right: c0 * b + c0_prime,
                },
            ];
            MonotoneGraph::from_knots(knots, c0, c0, b.max(-a))
        }
        Preset::FastDiffusionClipped { m, m0, pieces } => {
            if !(m > T::zero() && m < T::one()) {
                return bad(format!("fast_diffusion_clipped needs 0 < m < 1, got {m}"));
            }
            power_graph(m, m0, pieces)
        }
        Preset::PorousClipped { m, m0, pieces } => {
            if !(m > T::one()) {
                return bad(format!("porous_clipped needs m > 1, got {m}"));
            }
            power_graph(m, m0, pieces)
        }
        Preset::TwoSlope { c0, c0_prime, m0 } => {
            if !(c0 > T::zero() && c0_prime >= T::zero() && m0 > T::zero()) {
                return bad("two_slope needs c0 > 0, c0' >= 0, M0 > 0".into());
            }
            let top = c0 * m0 + c0_prime;
            let knots = vec![
                Knot {
                    at: -m0,
                    left: -top,
                    right: -top,
                },
                Knot {
                    at: m0,
                    left: top,
                    right: top,
                },
            ];
            MonotoneGraph::from_knots(knots, c0, c0, m0)
        }
    }
}

/// `|r|^(m-1) r` sampled on `pieces` uniform intervals of `[-M0, M0]`, tangent rays outside.
fn power_graph<T: Scalar>(m: T, m0: T, pieces: usize) -> Result<MonotoneGraph<T>> {
    if !(m0 > T::zero()) || pieces < 2 {
        return Err(GraphError::InvalidParams(
            "power graph needs M0 > 0 and at least 2 pieces".into(),
        ));
    }
    let power = |r: T| r.signum() * r.abs().powf(m);
    let n = T::from_usize_lossy(pieces);
    let knots: Vec<_> = (0..=pieces)
        .map(|i| {
            let at = m0 * (T::two() * T::from_usize_lossy(i) - n) / n;
            let v = if at == T::zero() { T::zero() } else { power(at) };
            Knot { at, left: v, right: v }
        })
        .collect();
    let c0 = m * m0.powf(m - T::one());
    MonotoneGraph::from_knots(knots, c0, c0, m0)
}

/// Bulk and surface graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPair<T> {
    pub bulk: MonotoneGraph<T>,
    pub surface: MonotoneGraph<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCertificate<T> {
    pub bulk: LinearBoundCertificate<T>,
    pub surface: LinearBoundCertificate<T>,
}

impl<T: Scalar> GraphPair<T> {
    pub fn same(graph: MonotoneGraph<T>) -> Self {
        Self {
            bulk: graph.clone(),
            surface: graph,
        }
    }

    pub fn new(bulk: MonotoneGraph<T>, surface: MonotoneGraph<T>) -> Self {
        Self { bulk, surface }
    }

    /// Both graphs certified with a shared far-field slope and shared `M0`.
    pub fn validate(&self) -> Result<PairCertificate<T>> {
        let bulk = self.bulk.linear_bound()?;
        let surface = self.surface.linear_bound()?;
        let tol = T::lit(1e-12);
        if (bulk.c0 - surface.c0).abs() > tol * bulk.c0.max(surface.c0) {
            return Err(GraphError::FarFieldMismatch(format!(
                "far-field slopes differ: {} (bulk) vs {} (surface)",
                bulk.c0, surface.c0
            )));
        }
        if (bulk.m0 - surface.m0).abs() > tol * bulk.m0.max(surface.m0) {
            return Err(GraphError::FarFieldMismatch(format!(
                "thresholds differ: M0 = {} (bulk) vs {} (surface)",
                bulk.m0, surface.m0
            )));
        }
        Ok(PairCertificate { bulk, surface })
    }

    pub fn translated(&self, shift: T) -> Self {
        Self {
            bulk: self.bulk.translated(shift),
            surface: self.surface.translated(shift),
        }
    }
}
