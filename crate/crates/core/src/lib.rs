//! Structure-preserving solver for degenerate parabolic problems with dynamic
//! boundary conditions,
//!
//! ```text
//! u_t - Laplace xi = f,                          xi in beta(u)        in Omega
//! (u_G)_t + d_nu xi - LaplaceBeltrami xi_G = f_G, xi_G in beta(u_G)   on Gamma
//! ```
//!
//! regularized by the Moreau-Yosida approximation of the maximal monotone
//! graph `beta`, discretized by lumped finite volumes on a periodic strip or an
//! interval, and advanced by backward Euler with a semismooth Newton solver.
//! The [`estimates`] module checks the discrete counterparts of the uniform
//! energy bounds along every computed trajectory.
//!
//! Every numerical type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

pub mod discretization;
pub mod dual;
pub mod estimates;
pub mod graph;
pub mod linalg;
pub mod scalar;
pub mod stepper;

pub use discretization::{build_operators, BulkSurfaceField, DiscreteOperators, Geometry, NodeKind};
pub use dual::{DualMethod, DualSolverContext, PoincareConstants};
pub use graph::{make_preset, GraphPair, MonotoneGraph, Preset};
pub use scalar::Scalar;
pub use stepper::{ProblemData, StepParams, Trajectory};

pub type Graph = MonotoneGraph<f64>;
pub type Pair = GraphPair<f64>;
pub type Field = BulkSurfaceField<f64>;
pub type Operators = DiscreteOperators<f64>;
pub type Params = StepParams<f64>;
pub type History = Trajectory<f64>;

pub type GraphF32 = MonotoneGraph<f32>;
pub type FieldF32 = BulkSurfaceField<f32>;
pub type OperatorsF32 = DiscreteOperators<f32>;
pub type HistoryF32 = Trajectory<f32>;
