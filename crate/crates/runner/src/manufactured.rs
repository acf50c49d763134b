//! Single-mode exact solutions of the linear problem on the periodic strip.
//!
//! `u(t, x, y) = A e^{-rate t} cos(kappa x)` with `kappa = 2 pi k / Lx` is
//! constant in `y`, so the normal derivative vanishes and the boundary rows
//! obey the same one-dimensional heat equation as the bulk.

use std::f64::consts::PI;

use dynbc_core::stepper::Forcing;
use dynbc_core::{Field, Geometry, Operators};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManufacturedError {
    #[error("single-mode solutions need a strip geometry")]
    WrongGeometry,
    #[error("mode index must be at least 1")]
    ZeroMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedCase {
    pub k: usize,
    pub amplitude: f64,
    pub kappa: f64,
    /// Slope of the regularized linear flux, `c0 / (1 + lambda c0)`.
    pub diffusivity: f64,
    pub rate: f64,
}

impl ManufacturedCase {
    /// Mode `k` under `beta(r) = c0 r` regularized with `lambda`; `rate = None` gives the free decay.
    pub fn single_mode(
        geometry: Geometry<f64>,
        c0: f64,
        lambda: f64,
        k: usize,
        amplitude: f64,
        rate: Option<f64>,
    ) -> Result<Self, ManufacturedError> {
        let Geometry::Strip { lx, .. } = geometry else {
            return Err(ManufacturedError::WrongGeometry);
        };
        if k == 0 {
            return Err(ManufacturedError::ZeroMode);
        }
        let kappa = 2.0 * PI * k as f64 / lx;
        let diffusivity = c0 / (1.0 + lambda * c0);
        Ok(Self {
            k,
            amplitude,
            kappa,
            diffusivity,
            rate: rate.unwrap_or(diffusivity * kappa * kappa),
        })
    }

    pub fn exact(&self, ops: &Operators, t: f64) -> Field {
        let scale = self.amplitude * (-self.rate * t).exp();
        ops.sample(|p, _| scale * (self.kappa * p.x).cos())
    }

    /// `f = u_t - diffusivity * u_xx`, identically zero for the free decay.
    pub fn forcing_at(&self, ops: &Operators, t: f64) -> Field {
        let factor = self.diffusivity * self.kappa * self.kappa - self.rate;
        let scale = factor * self.amplitude * (-self.rate * t).exp();
        ops.sample(|p, _| scale * (self.kappa * p.x).cos())
    }

    /// Exact solution of the spatially discrete problem on a uniform strip of spacing `h`.
    ///
    /// The mode is an eigenvector of the lumped stiffness with eigenvalue
    /// `(2 - 2 cos(kappa h)) / h^2`, so only the time discretization error remains.
    pub fn semi_discrete(&self, ops: &Operators, t: f64) -> Field {
        let Geometry::Strip { lx, nx, .. } = ops.geometry() else {
            return self.exact(ops, t);
        };
        let h = lx / nx as f64;
        let decay = self.diffusivity * (2.0 - 2.0 * (self.kappa * h).cos()) / (h * h);
        let source = (self.diffusivity * self.kappa * self.kappa - self.rate) * self.amplitude;
        // u' = -decay u + source e^{-rate t}, u(0) = amplitude
        let gap = decay - self.rate;
        let particular = if gap.abs() > 1e-12 * decay {
            source / gap * ((-self.rate * t).exp() - (-decay * t).exp())
        } else {
            source * t * (-self.rate * t).exp()
        };
        let scale = self.amplitude * (-decay * t).exp() + particular;
        ops.sample(|p, _| scale * (self.kappa * p.x).cos())
    }

    pub fn is_free(&self) -> bool {
        self.diffusivity * self.kappa * self.kappa == self.rate
    }
}

/// `e^{-kappa^2 t} cos(kappa x)` for the identity graph without regularization.
pub fn single_mode_exact(ops: &Operators, k: usize, t: f64) -> Result<Field, ManufacturedError> {
    let case = ManufacturedCase::single_mode(ops.geometry(), 1.0, 0.0, k, 1.0, None)?;
    Ok(case.exact(ops, t))
}

/// Forcing induced by a manufactured case.
pub struct ManufacturedForcing<'a> {
    pub case: ManufacturedCase,
    pub ops: &'a Operators,
}

impl Forcing<f64> for ManufacturedForcing<'_> {
    fn sample(&self, t: f64) -> Field {
        self.case.forcing_at(self.ops, t)
    }

    fn is_zero(&self) -> bool {
        self.case.is_free()
    }
}
