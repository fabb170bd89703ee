//! Linear interpolation paths between data and noise.
//!
//! Time runs backwards: t = 0 is a data point, t = 1 is pure source noise.
//! The interpolant is z_t = t*eps + (1-t)*z. Conditioned on the endpoint z,
//! the velocity that transports z_t toward z is (z_t - z)/t, which for the
//! generating pair (z, eps) equals eps - z identically.

use crate::error::{Error, Result};
use crate::numeric::Point;

/// Default floor below which path operations treat t as degenerate. Division
/// by t is the only place the interpolation time enters a denominator; below
/// this floor callers fall back to the exact endpoint velocity eps - z.
pub const DEFAULT_T_EPS: f64 = 1e-4;

/// An interpolant sample: the generating data index, the noise draw, the
/// time, and the interpolated position.
#[derive(Debug, Clone)]
pub struct PathPoint {
    z_t: Point,
    t: f64,
    eps: Point,
    data_index: usize,
}

impl PathPoint {
    /// Builds the interpolant z_t = t*eps + (1-t)*z for dataset entry
    /// `data_index` with value `z`.
    pub fn sample(z: &Point, eps: Point, t: f64, data_index: usize) -> Result<Self> {
        let z_t = interpolate(z, &eps, t)?;
        Ok(PathPoint { z_t, t, eps, data_index })
    }

    pub fn z_t(&self) -> &Point {
        &self.z_t
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn eps(&self) -> &Point {
        &self.eps
    }

    pub fn data_index(&self) -> usize {
        self.data_index
    }

    /// The exact conditional velocity toward the generating datum, eps - z.
    /// Algebraically equal to (z_t - z)/t but free of the division.
    pub fn endpoint_velocity(&self, z: &Point) -> Point {
        self.eps.sub(z)
    }
}

/// z_t = t*eps + (1-t)*z. Requires t in [0, 1).
pub fn interpolate(z: &Point, eps: &Point, t: f64) -> Result<Point> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {t} outside [0, 1)")));
    }
    if z.dim() != eps.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: data {} vs noise {}",
            z.dim(),
            eps.dim()
        )));
    }
    let s = 1.0 - t;
    let coords = z
        .coords()
        .iter()
        .zip(eps.coords())
        .map(|(zc, ec)| t * ec + s * zc)
        .collect();
    Ok(Point::new(coords))
}

/// Conditional velocity (z_t - z_target)/t. Errors when t is at or below the
/// degeneracy floor; callers that know the generating noise should use the
/// exact endpoint form there instead.
pub fn conditional_velocity(z_t: &Point, z_target: &Point, t: f64, t_eps: f64) -> Result<Point> {
    if t <= t_eps {
        return Err(Error::DegenerateTime { t });
    }
    if z_t.dim() != z_target.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: position {} vs target {}",
            z_t.dim(),
            z_target.dim()
        )));
    }
    Ok(z_t.sub(z_target).scale(1.0 / t))
}

/// Unnormalized log-likelihood of z_t under the path anchored at z_target:
/// -||z_t - (1-t) z_target||^2 / (2 t^2). The Gaussian normalizer is omitted;
/// it cancels in every posterior this feeds. Requires t > 0.
pub fn log_path_likelihood(z_t: &Point, z_target: &Point, t: f64) -> Result<f64> {
    if z_t.dim() != z_target.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: position {} vs target {}",
            z_t.dim(),
            z_target.dim()
        )));
    }
    log_path_likelihood_slices(z_t.coords(), z_target.coords(), t)
}

/// Slice-level form of [`log_path_likelihood`] for hot loops.
pub(crate) fn log_path_likelihood_slices(z_t: &[f64], z_target: &[f64], t: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::DegenerateTime { t });
    }
    let s = 1.0 - t;
    let mut q = 0.0;
    for (a, b) in z_t.iter().zip(z_target) {
        let d = a - s * b;
        q += d * d;
    }
    Ok(-q / (2.0 * t * t))
}
