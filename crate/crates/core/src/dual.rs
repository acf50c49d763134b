//! Duality mapping `F: V0 -> V0*`, its inverse, the `V0*` norm and the
//! discrete Poincare-Wirtinger constant.
//!
//! `F z` is represented by the nodal vector `A z`, which acts on test fields by
//! the Euclidean pairing. `F^{-1}` of an `H`-vector `g` is the mean-zero
//! solution of `A w = M g`.

use thiserror::Error;

use crate::discretization::{BulkSurfaceField, DiscreteOperators, DiscretizationError};
use crate::linalg::{pcg_deflated, BandedCholesky, LinalgError};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("field is not mean-zero (mean {mean:e})")]
    NotMeanZero { mean: f64 },
    #[error("constrained solve failed: {0}")]
    SolverDiverged(#[from] LinalgError),
    #[error("eigenvalue iteration did not settle after {iterations} iterations")]
    IterationDiverged { iterations: usize },
    #[error(transparent)]
    Shape(#[from] DiscretizationError),
}

pub type Result<T, E = DualError> = std::result::Result<T, E>;

/// Nodal representation of an element of `V0*` (the vector `A z` for `z` in `V0`).
#[derive(Debug, Clone, PartialEq)]
pub struct DualVector<T>(pub Vec<T>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualMethod {
    /// Fix one nodal value, factor the remaining SPD block once, then project.
    #[default]
    PinnedCholesky,
    /// Jacobi-preconditioned CG kept orthogonal to the constants.
    DeflatedCg,
}

/// Sharp discrete constants of the mean-zero complex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareConstants<T> {
    /// Smallest positive eigenvalue of `A v = mu M v`.
    pub mu1: T,
    /// `max(|Omega| + |Gamma|, 1 + 1/mu1)`
    pub c_p: T,
    /// `|g|_{V0*} <= c_emb |g|_H`, equal to `1/sqrt(mu1)`.
    pub c_emb: T,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct DualSolverContext<'a, T> {
    ops: &'a DiscreteOperators<T>,
    method: DualMethod,
    factor: Option<BandedCholesky<T>>,
    tol: T,
}

const PIN: usize = 0;

/// Mean tolerance for arguments that must lie in the mean-zero subspace.
pub fn mean_zero_tolerance<T: Scalar>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(1e3))
}

impl<'a, T: Scalar> DualSolverContext<'a, T> {
    pub fn new(ops: &'a DiscreteOperators<T>) -> Result<Self> {
        Self::with_method(ops, DualMethod::default(), T::lit(1e-12))
    }

    pub fn with_method(ops: &'a DiscreteOperators<T>, method: DualMethod, tol: T) -> Result<Self> {
        let factor = match method {
            DualMethod::PinnedCholesky => {
                let mut active = vec![true; ops.n_nodes()];
                active[PIN] = false;
                let shift = vec![T::zero(); ops.n_nodes()];
                Some(BandedCholesky::factor_masked(ops.stiffness(), ops.band(), &active, &shift)?)
            }
            DualMethod::DeflatedCg => None,
        };
        Ok(Self {
            ops,
            method,
            factor,
            tol,
        })
    }

    pub fn ops(&self) -> &'a DiscreteOperators<T> {
        self.ops
    }

    pub fn method(&self) -> DualMethod {
        self.method
    }

    fn require_mean_zero(&self, v: &[T]) -> Result<()> {
        let m = self.ops.mean_nodal(v);
        if m.abs() > mean_zero_tolerance() {
            return Err(DualError::NotMeanZero {
                mean: m.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Mean-zero `w` with `A w = rhs`; `rhs` must annihilate constants.
    fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        let mut w = rhs.to_vec();
        match &self.factor {
            Some(chol) => {
                // the pinned equation is implied by the others since rhs sums to zero
                w[PIN] = T::zero();
                chol.solve_in_place(&mut w);
            }
            None => {
                w.iter_mut().for_each(|x| *x = T::zero());
                let n = self.ops.n_nodes();
                let centre = |v: &mut [T]| {
                    let avg = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len());
                    v.iter_mut().for_each(|x| *x = *x - avg);
                };
                pcg_deflated(self.ops.stiffness(), rhs, &mut w, self.tol, 10 * n + 100, centre)?;
            }
        }
        self.ops.project_nodal(&mut w);
        Ok(w)
    }

    /// `F^{-1} g` for a nodal `H`-vector, projecting `g` first (no mean check).
    pub fn f_inverse_projected(&self, g: &[T]) -> Result<Vec<T>> {
        let mut g = g.to_vec();
        self.ops.project_nodal(&mut g);
        let rhs: Vec<T> = g.iter().zip(self.ops.weights()).map(|(&g, &w)| g * w).collect();
        self.solve(&rhs)
    }

    pub fn f_inverse_nodal(&self, g: &[T]) -> Result<Vec<T>> {
        self.require_mean_zero(g)?;
        let rhs: Vec<T> = g.iter().zip(self.ops.weights()).map(|(&g, &w)| g * w).collect();
        self.solve(&rhs)
    }

    /// `|g|_{V0*}` of a nodal vector after projecting out its mean.
    pub fn dual_norm_projected(&self, g: &[T]) -> Result<T> {
        let mut g = g.to_vec();
        self.ops.project_nodal(&mut g);
        let w = self.f_inverse_projected(&g)?;
        Ok(self.ops.inner_nodal(&g, &w).max(T::zero()).sqrt())
    }

    pub fn dual_norm_nodal(&self, g: &[T]) -> Result<T> {
        let w = self.f_inverse_nodal(g)?;
        Ok(self.ops.inner_nodal(g, &w).max(T::zero()).sqrt())
    }

    pub fn f_apply(&self, z: &BulkSurfaceField<T>) -> Result<DualVector<T>> {
        let v = self.ops.to_nodal(z)?;
        self.require_mean_zero(&v)?;
        Ok(DualVector(self.ops.stiffness().mul_vec(&v)))
    }

    /// `F^{-1}` of a functional given in nodal form.
    pub fn f_inverse_dual(&self, d: &DualVector<T>) -> Result<BulkSurfaceField<T>> {
        let total: T = d.0.iter().copied().sum();
        if (total / self.ops.total_measure()).abs() > mean_zero_tolerance() {
            return Err(DualError::NotMeanZero {
                mean: total.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.ops.from_nodal(&self.solve(&d.0)?))
    }

    pub fn f_inverse(&self, g: &BulkSurfaceField<T>) -> Result<BulkSurfaceField<T>> {
        let v = self.ops.to_nodal(g)?;
        Ok(self.ops.from_nodal(&self.f_inverse_nodal(&v)?))
    }

    pub fn v0_dual_norm(&self, g: &BulkSurfaceField<T>) -> Result<T> {
        self.dual_norm_nodal(&self.ops.to_nodal(g)?)
    }

    /// `|F z|_{V0*}` computed from the functional directly.
    pub fn dual_norm_of(&self, d: &DualVector<T>) -> Result<T> {
        let w = self.f_inverse_dual(d)?;
        let w = self.ops.to_nodal(&w)?;
        Ok(w.iter().zip(&d.0).map(|(&a, &b)| a * b).sum::<T>().max(T::zero()).sqrt())
    }

    pub fn v0_norm(&self, z: &BulkSurfaceField<T>) -> Result<T> {
        v0_norm(self.ops, z)
    }

    /// Power iteration on `P F^{-1}` in the `H` inner product; its top eigenvalue is `1/mu1`.
    pub fn poincare_constants(&self) -> Result<PoincareConstants<T>> {
        let n = self.ops.n_nodes();
        let golden = T::lit(0.618_033_988_749_894_9);
        let mut x: Vec<T> = (0..n)
            .map(|i| {
                let t = T::from_usize_lossy(i + 1) * golden;
                t - t.floor() - T::half()
            })
            .collect();
        self.ops.project_nodal(&mut x);
        let norm = self.ops.inner_nodal(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v = *v / norm);
        let mut rho = T::zero();
        let max_iter = 50_000;
        for it in 1..=max_iter {
            let y = self.f_inverse_projected(&x)?;
            let next = self.ops.inner_nodal(&x, &y);
            let norm = self.ops.inner_nodal(&y, &y).sqrt();
            x = y.into_iter().map(|v| v / norm).collect();
            if it > 3 && (next - rho).abs() <= T::lit(1e-14).max(T::epsilon() * T::lit(8.0)) * next {
                let mu1 = T::one() / next;
                return Ok(PoincareConstants {
                    mu1,
                    c_p: self.ops.total_measure().max(T::one() + next),
                    c_emb: next.sqrt(),
                    iterations: it,
                });
            }
            rho = next;
        }
        Err(DualError::IterationDiverged { iterations: max_iter })
    }
}

/// `sqrt(a(z, z))` for a mean-zero field.
pub fn v0_norm<T: Scalar>(ops: &DiscreteOperators<T>, z: &BulkSurfaceField<T>) -> Result<T> {
    let v = ops.to_nodal(z)?;
    let m = ops.mean_nodal(&v);
    if m.abs() > mean_zero_tolerance() {
        return Err(DualError::NotMeanZero {
            mean: m.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(ops.a_nodal(&v, &v).max(T::zero()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_operators, Geometry};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strip(lx: f64, nx: usize, ny: usize) -> DiscreteOperators<f64> {
        build_operators(Geometry::Strip { lx, nx, ny }).unwrap()
    }

    fn random_mean_zero(ops: &DiscreteOperators<f64>, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..ops.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ops.project_nodal(&mut v);
        v
    }

    /// Generalized eigenpairs of `A v = mu M v`, sorted ascending, with `M`-orthonormal vectors.
    fn dense_eigen(ops: &DiscreteOperators<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = ops.n_nodes();
        let s: Vec<f64> = ops.weights().iter().map(|w| 1.0 / w.sqrt()).collect();
        let b = DMatrix::from_fn(n, n, |i, j| s[i] * ops.stiffness().get(i, j) * s[j]);
        let eig = b.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = order
            .iter()
            .map(|&k| (0..n).map(|i| eig.eigenvectors[(i, k)] * s[i]).collect())
            .collect();
        (values, vectors)
    }

    #[test]
    fn f_inverse_of_eigenvector() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let (values, vectors) = dense_eigen(&ops);
        assert!(values[0].abs() < 1e-10);
        for k in [1, 2, 5, 17] {
            let (mu, g) = (values[k], &vectors[k]);
            let w = ctx.f_inverse_nodal(g).unwrap();
            for i in 0..g.len() {
                assert!((w[i] - g[i] / mu).abs() < 1e-10);
            }
            let h_norm = ops.inner_nodal(g, g).sqrt();
            assert!((ctx.dual_norm_nodal(g).unwrap() - h_norm / mu.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let z = ops.zeros();
        assert!(ctx.f_apply(&z).unwrap().0.iter().all(|&x| x == 0.0));
        assert!(ctx.f_inverse(&z).unwrap().bulk.iter().all(|&x| x == 0.0));
        assert_eq!(ctx.v0_dual_norm(&z).unwrap(), 0.0);
        assert_eq!(ctx.v0_norm(&z).unwrap(), 0.0);
    }

    #[test]
    fn rejects_nonzero_mean() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let one = ops.constant(1.0);
        assert!(matches!(ctx.f_inverse(&one), Err(DualError::NotMeanZero { .. })));
        assert!(matches!(ctx.f_apply(&one), Err(DualError::NotMeanZero { .. })));
        assert!(matches!(ctx.v0_dual_norm(&one), Err(DualError::NotMeanZero { .. })));
        assert!(matches!(v0_norm(&ops, &one), Err(DualError::NotMeanZero { .. })));
        let mut d = vec![0.0; ops.n_nodes()];
        d[3] = 1.0;
        assert!(ctx.f_inverse_dual(&DualVector(d)).is_err());
    }

    #[test]
    fn both_solver_paths_agree() {
        for ops in [strip(1.0, 8, 4), strip(2.0, 16, 8), build_operators(Geometry::Interval { n: 30 }).unwrap()] {
            let direct = DualSolverContext::new(&ops).unwrap();
            let cg = DualSolverContext::with_method(&ops, DualMethod::DeflatedCg, 1e-13).unwrap();
            for seed in 0..5 {
                let g = random_mean_zero(&ops, seed);
                let a = direct.f_inverse_nodal(&g).unwrap();
                let b = cg.f_inverse_nodal(&g).unwrap();
                let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                for i in 0..a.len() {
                    assert!((a[i] - b[i]).abs() < 1e-10 * scale.max(1.0));
                }
                assert!(ops.mean_nodal(&a).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn poincare_matches_dense_eigensolve() {
        let ops = strip(1.0, 8, 4);
        let ctx = DualSolverContext::new(&ops).unwrap();
        let pc = ctx.poincare_constants().unwrap();
        let (values, _) = dense_eigen(&ops);
        let mu1 = values[1];
        assert!((pc.mu1 - mu1).abs() < 1e-8 * mu1);
        // independent route: largest ratio of (M + A) against A + w w^T / V^2 over all fields
        let n = ops.n_nodes();
        let w = DVector::from_vec(ops.weights().to_vec());
        let v = ops.total_measure();
        let a = DMatrix::from_fn(n, n, |i, j| ops.stiffness().get(i, j));
        let m = DMatrix::from_diagonal(&w);
        let rhs = &a + &w * w.transpose() / (v * v);
        let chol = rhs.cholesky().unwrap();
        let l_inv = chol.l().try_inverse().unwrap();
        let sym = &l_inv * (&m + &a) * l_inv.transpose();
        let top = sym.symmetric_eigen().eigenvalues.max();
        assert!((pc.c_p - top).abs() < 1e-8 * top, "{} vs {}", pc.c_p, top);
        assert!(pc.c_p >= ops.total_measure());
        assert!((pc.c_emb - (1.0 / mu1).sqrt()).abs() < 1e-8);
        let again = ctx.poincare_constants().unwrap();
        assert_eq!(pc, again);
    }

    #[test]
    fn poincare_is_stable_under_refinement() {
        let coarse = strip(1.0, 16, 8);
        let fine = strip(1.0, 32, 16);
        let a = DualSolverContext::new(&coarse).unwrap().poincare_constants().unwrap();
        let b = DualSolverContext::new(&fine).unwrap().poincare_constants().unwrap();
        assert!((a.c_p - b.c_p).abs() <= 0.2 * b.c_p);
        assert!((a.mu1 - b.mu1).abs() <= 0.2 * b.mu1);
    }

    #[test]
    fn poincare_inequality_on_random_fields() {
        let ops = strip(1.0, 8, 4);
        let pc = DualSolverContext::new(&ops).unwrap().poincare_constants().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let shift: f64 = rng.gen_range(-2.0..2.0);
            let z: Vec<f64> = (0..ops.n_nodes()).map(|_| rng.gen_range(-1.0..1.0) + shift).collect();
            let a = ops.a_nodal(&z, &z);
            let lhs = ops.inner_nodal(&z, &z) + a;
            let m = ops.mean_nodal(&z);
            assert!(lhs <= pc.c_p * (a + m * m) * (1.0 + 1e-10));
        }
    }

    proptest! {
        #[test]
        fn inverse_pair_and_isometry(seed in any::<u64>(), alpha in -5.0f64..5.0) {
            let ops = strip(1.0, 8, 4);
            let ctx = DualSolverContext::new(&ops).unwrap();
            let z = ops.from_nodal(&random_mean_zero(&ops, seed));
            let fz = ctx.f_apply(&z).unwrap();
            let back = ctx.f_inverse_dual(&fz).unwrap();
            for (a, b) in back.bulk.iter().zip(&z.bulk).chain(back.surface.iter().zip(&z.surface)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let iso = ctx.dual_norm_of(&fz).unwrap();
            prop_assert!((iso - ctx.v0_norm(&z).unwrap()).abs() < 1e-10);

            let g = random_mean_zero(&ops, seed.wrapping_add(1));
            let scaled: Vec<f64> = g.iter().map(|x| alpha * x).collect();
            let (w1, w2) = (ctx.f_inverse_nodal(&g).unwrap(), ctx.f_inverse_nodal(&scaled).unwrap());
            for i in 0..w1.len() {
                prop_assert!((alpha * w1[i] - w2[i]).abs() < 1e-11);
            }
        }

        #[test]
        fn dual_norm_inequalities(s1 in any::<u64>(), s2 in any::<u64>()) {
            let ops = strip(1.0, 8, 4);
            let ctx = DualSolverContext::new(&ops).unwrap();
            let (g, h) = (random_mean_zero(&ops, s1), random_mean_zero(&ops, s2));
            let sum: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a + b).collect();
            let (ng, nh) = (ctx.dual_norm_nodal(&g).unwrap(), ctx.dual_norm_nodal(&h).unwrap());
            prop_assert!(ctx.dual_norm_nodal(&sum).unwrap() <= ng + nh + 1e-12);
            prop_assert!(ng > 0.0);
            let pairing = ops.inner_nodal(&g, &h).abs();
            let v0 = ops.a_nodal(&h, &h).sqrt();
            prop_assert!(pairing <= ng * v0 * (1.0 + 1e-10));
        }
    }
}
