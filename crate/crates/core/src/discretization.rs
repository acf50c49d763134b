//! Bulk-surface grids, lumped masses and the combined stiffness matrix.
//!
//! Two geometries are supported: a strip periodic in `x` with height 1, whose
//! boundary is the pair of rows `y = 0` and `y = 1`, and the unit interval with
//! its two endpoints. Bulk values live on interior nodes, surface values on the
//! boundary nodes. Both are stacked into one nodal vector:
//!
//! ```text
//! [ first half of the surface | bulk (row-major) | second half of the surface ]
//! ```
//!
//! so the strip is numbered row by row from `y = 0` to `y = 1`, and every
//! stiffness entry lies within `nx` (strip) or `1` (interval) of the diagonal.
//!
//! Masses are lumped. The half cells between the boundary and the first
//! interior row are absorbed into that row, so bulk weights sum to `|Omega|`
//! exactly and horizontal fluxes in those rows use the same enlarged height.

use std::io::{self, Write};

use thiserror::Error;

use crate::linalg::CsrMatrix;
use crate::scalar::{weighted_dot, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizationError {
    #[error("grid too small: {0}")]
    GridTooSmall(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: expected {expected_bulk} bulk and {expected_surface} surface values, got {bulk} and {surface}")]
    ShapeMismatch {
        expected_bulk: usize,
        expected_surface: usize,
        bulk: usize,
        surface: usize,
    },
}

pub type Result<T, E = DiscretizationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry<T> {
    /// `(0, lx)` periodic times `(0, 1)`; `nx` nodes per row, `ny` interior rows.
    Strip { lx: T, nx: usize, ny: usize },
    /// `(0, 1)` with `n` interior nodes.
    Interval { n: usize },
}

impl<T: Scalar> Geometry<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Geometry::Strip { lx, nx, ny } => {
                if !(lx > T::zero() && lx.is_finite()) {
                    return Err(DiscretizationError::InvalidGeometry(format!(
                        "strip length must be positive, got {lx}"
                    )));
                }
                if nx < 4 || ny < 2 {
                    return Err(DiscretizationError::GridTooSmall(format!(
                        "strip needs nx >= 4 and ny >= 2, got nx={nx}, ny={ny}"
                    )));
                }
            }
            Geometry::Interval { n } => {
                if n < 2 {
                    return Err(DiscretizationError::GridTooSmall(format!(
                        "interval needs n >= 2, got {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_bulk(&self) -> usize {
        match *self {
            Geometry::Strip { nx, ny, .. } => nx * ny,
            Geometry::Interval { n } => n,
        }
    }

    pub fn n_surface(&self) -> usize {
        match *self {
            Geometry::Strip { nx, .. } => 2 * nx,
            Geometry::Interval { .. } => 2,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_bulk() + self.n_surface()
    }
}

/// Pair `(u, u_Gamma)` of independent bulk and surface values.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkSurfaceField<T> {
    pub bulk: Vec<T>,
    pub surface: Vec<T>,
}

impl<T: Scalar> BulkSurfaceField<T> {
    pub fn new(bulk: Vec<T>, surface: Vec<T>) -> Self {
        Self { bulk, surface }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Bulk,
    Surface,
}

/// Position of a node: `x`, `y` (0 for the interval) and the grid row
/// (strip: 0 ..= ny+1 from bottom to top; interval: the node index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodePosition<T> {
    pub x: T,
    pub y: T,
    pub row: usize,
    pub column: usize,
}

#[derive(Debug, Clone)]
pub struct DiscreteOperators<T> {
    geometry: Geometry<T>,
    weights: Vec<T>,
    stiffness: CsrMatrix<T>,
    vol_omega: T,
    vol_gamma: T,
    band: usize,
}

pub fn build_operators<T: Scalar>(geometry: Geometry<T>) -> Result<DiscreteOperators<T>> {
    geometry.validate()?;
    let n = geometry.n_nodes();
    let mut weights = vec![T::zero(); n];
    let mut edges: Vec<(usize, usize, T)> = Vec::new();
    let (vol_omega, vol_gamma, band);
    match geometry {
        Geometry::Strip { lx, nx, ny } => {
            let hx = lx / T::from_usize_lossy(nx);
            let hy = T::one() / T::from_usize_lossy(ny + 1);
            let node = |i: usize, row: usize| row * nx + (i % nx);
            // height of the dual cell around interior row j (rows 1..=ny)
            let height = |row: usize| {
                if row == 1 || row == ny {
                    T::lit(1.5) * hy
                } else {
                    hy
                }
            };
            for i in 0..nx {
                weights[node(i, 0)] = hx;
                weights[node(i, ny + 1)] = hx;
                for row in 1..=ny {
                    weights[node(i, row)] = hx * height(row);
                }
            }
            for row in 0..=ny + 1 {
                let coeff = if row == 0 || row == ny + 1 {
                    T::one() / hx
                } else {
                    height(row) / hx
                };
                for i in 0..nx {
                    edges.push((node(i, row), node(i + 1, row), coeff));
                }
            }
            let vertical = hx / hy;
            for row in 0..=ny {
                for i in 0..nx {
                    edges.push((node(i, row), node(i, row + 1), vertical));
                }
            }
            vol_omega = lx;
            vol_gamma = T::two() * lx;
            band = nx;
        }
        Geometry::Interval { n: m } => {
            let h = T::one() / T::from_usize_lossy(m + 1);
            weights[0] = T::one();
            weights[m + 1] = T::one();
            for k in 1..=m {
                weights[k] = if k == 1 || k == m { T::lit(1.5) * h } else { h };
            }
            for k in 0..=m {
                edges.push((k, k + 1, T::one() / h));
            }
            vol_omega = T::one();
            vol_gamma = T::two();
            band = 1;
        }
    }
    let mut triplets = Vec::with_capacity(4 * edges.len());
    let mut diag = vec![T::zero(); n];
    for &(p, q, c) in &edges {
        triplets.push((p, q, -c));
        triplets.push((q, p, -c));
        diag[p] = diag[p] + c;
        diag[q] = diag[q] + c;
    }
    triplets.extend(diag.iter().enumerate().map(|(i, &d)| (i, i, d)));
    let stiffness = CsrMatrix::from_triplets(n, &triplets);
    Ok(DiscreteOperators {
        geometry,
        weights,
        stiffness,
        vol_omega,
        vol_gamma,
        band,
    })
}

impl<T: Scalar> DiscreteOperators<T> {
    pub fn geometry(&self) -> Geometry<T> {
        self.geometry
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn n_bulk(&self) -> usize {
        self.geometry.n_bulk()
    }

    pub fn n_surface(&self) -> usize {
        self.geometry.n_surface()
    }

    /// Lumped mass, one weight per node in nodal order.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn stiffness(&self) -> &CsrMatrix<T> {
        &self.stiffness
    }

    /// Half bandwidth of the stiffness in nodal order.
    pub fn band(&self) -> usize {
        self.band
    }

    pub fn vol_omega(&self) -> T {
        self.vol_omega
    }

    pub fn vol_gamma(&self) -> T {
        self.vol_gamma
    }

    /// `|Omega| + |Gamma|`
    pub fn total_measure(&self) -> T {
        self.vol_omega + self.vol_gamma
    }

    fn split(&self) -> usize {
        self.n_surface() / 2
    }

    pub fn node_kind(&self, i: usize) -> NodeKind {
        let s = self.split();
        if i < s || i >= s + self.n_bulk() {
            NodeKind::Surface
        } else {
            NodeKind::Bulk
        }
    }

    pub fn node_position(&self, i: usize) -> NodePosition<T> {
        match self.geometry {
            Geometry::Strip { lx, nx, ny } => {
                let (row, column) = (i / nx, i % nx);
                NodePosition {
                    x: lx * T::from_usize_lossy(column) / T::from_usize_lossy(nx),
                    y: T::from_usize_lossy(row) / T::from_usize_lossy(ny + 1),
                    row,
                    column,
                }
            }
            Geometry::Interval { n } => NodePosition {
                x: T::from_usize_lossy(i) / T::from_usize_lossy(n + 1),
                y: T::zero(),
                row: i,
                column: 0,
            },
        }
    }

    pub fn check_shape(&self, z: &BulkSurfaceField<T>) -> Result<()> {
        if z.bulk.len() != self.n_bulk() || z.surface.len() != self.n_surface() {
            return Err(DiscretizationError::ShapeMismatch {
                expected_bulk: self.n_bulk(),
                expected_surface: self.n_surface(),
                bulk: z.bulk.len(),
                surface: z.surface.len(),
            });
        }
        Ok(())
    }

    pub fn to_nodal(&self, z: &BulkSurfaceField<T>) -> Result<Vec<T>> {
        self.check_shape(z)?;
        let s = self.split();
        let mut out = Vec::with_capacity(self.n_nodes());
        out.extend_from_slice(&z.surface[..s]);
        out.extend_from_slice(&z.bulk);
        out.extend_from_slice(&z.surface[s..]);
        Ok(out)
    }

    pub fn from_nodal(&self, v: &[T]) -> BulkSurfaceField<T> {
        assert_eq!(v.len(), self.n_nodes(), "nodal vector has wrong length");
        let s = self.split();
        let nb = self.n_bulk();
        let mut surface = Vec::with_capacity(self.n_surface());
        surface.extend_from_slice(&v[..s]);
        surface.extend_from_slice(&v[s + nb..]);
        BulkSurfaceField {
            bulk: v[s..s + nb].to_vec(),
            surface,
        }
    }

    pub fn zeros(&self) -> BulkSurfaceField<T> {
        self.constant(T::zero())
    }

    pub fn constant(&self, c: T) -> BulkSurfaceField<T> {
        BulkSurfaceField {
            bulk: vec![c; self.n_bulk()],
            surface: vec![c; self.n_surface()],
        }
    }

    /// Samples `f(position, kind)` at every node.
    pub fn sample(&self, f: impl Fn(NodePosition<T>, NodeKind) -> T) -> BulkSurfaceField<T> {
        let v: Vec<T> = (0..self.n_nodes())
            .map(|i| f(self.node_position(i), self.node_kind(i)))
            .collect();
        self.from_nodal(&v)
    }

    pub fn mean_nodal(&self, v: &[T]) -> T {
        weighted_dot(&self.weights, v, &vec![T::one(); v.len()]) / self.total_measure()
    }

    pub fn project_nodal(&self, v: &mut [T]) -> T {
        let m = self.mean_nodal(v);
        v.iter_mut().for_each(|x| *x = *x - m);
        m
    }

    pub fn inner_nodal(&self, u: &[T], z: &[T]) -> T {
        weighted_dot(&self.weights, u, z)
    }

    pub fn a_nodal(&self, u: &[T], z: &[T]) -> T {
        self.stiffness.bilinear(u, z)
    }

    pub fn mean(&self, z: &BulkSurfaceField<T>) -> Result<T> {
        Ok(self.mean_nodal(&self.to_nodal(z)?))
    }

    pub fn project(&self, z: &BulkSurfaceField<T>) -> Result<BulkSurfaceField<T>> {
        let mut v = self.to_nodal(z)?;
        self.project_nodal(&mut v);
        Ok(self.from_nodal(&v))
    }

    pub fn a_form(&self, u: &BulkSurfaceField<T>, z: &BulkSurfaceField<T>) -> Result<T> {
        Ok(self.a_nodal(&self.to_nodal(u)?, &self.to_nodal(z)?))
    }

    pub fn inner_h(&self, u: &BulkSurfaceField<T>, z: &BulkSurfaceField<T>) -> Result<T> {
        Ok(self.inner_nodal(&self.to_nodal(u)?, &self.to_nodal(z)?))
    }

    /// Writes the stiffness as `row col value` lines (0-based, nodal order).
    pub fn dump_stiffness(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "# {} {} {}", self.n_nodes(), self.n_nodes(), self.stiffness.nnz())?;
        for (i, j, v) in self.stiffness.entries() {
            writeln!(out, "{i} {j} {v:e}")?;
        }
        Ok(())
    }
}
