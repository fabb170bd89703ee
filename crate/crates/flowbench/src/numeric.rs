//! Small fixed-precision numeric core.
//!
//! Everything downstream (paths, posteriors, the model, training) is built on
//! the few primitives in this module. All arithmetic is `f64`; accumulation
//! orders are fixed so that repeated runs produce bitwise-identical results on
//! the same platform.

use crate::error::{Error, Result};

/// Point in d-dimensional Euclidean space.
///
/// Stored data (datasets, sources) is validated finite at the parsing and
/// construction boundaries via [`Point::checked`]. Transient computational
/// points (velocities, residuals) may go non-finite when a model diverges;
/// the integrator and the optimizer detect that explicitly and surface it
/// as a numeric failure instead of poisoning downstream state.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(Vec<f64>);

impl Point {
    /// Wraps raw coordinates without validation.
    pub fn new(coords: Vec<f64>) -> Self {
        Point(coords)
    }

    /// Validating constructor for data read from external sources.
    pub fn checked(coords: Vec<f64>) -> Result<Self> {
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate {c}")));
        }
        Ok(Point(coords))
    }

    pub fn zeros(d: usize) -> Self {
        Point(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn add(&self, other: &Point) -> Point {
        debug_assert_eq!(self.dim(), other.dim());
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Point) -> Point {
        debug_assert_eq!(self.dim(), other.dim());
        Point(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Point {
        Point(self.0.iter().map(|a| a * s).collect())
    }

    pub fn dot(&self, other: &Point) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &Point) -> f64 {
        dist_sq(&self.0, &other.0)
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist_sq(other).sqrt()
    }
}

impl std::ops::Index<usize> for Point {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(Matrix { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.entries[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec shape mismatch: {}x{} vs vector of {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.entries, self.rows, self.cols, x, &mut out);
        Ok(out)
    }
}

/// Dot product with four-way unrolled accumulation. The split accumulators
/// give the optimizer room to vectorize; the combination order is fixed.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xs, ys) in ca.zip(cb) {
        acc[0] += xs[0] * ys[0];
        acc[1] += xs[1] * ys[1];
        acc[2] += xs[2] * ys[2];
        acc[3] += xs[3] * ys[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Squared Euclidean distance between two coordinate slices.
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// `y += alpha * x`, in place.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x` for a row-major `rows x cols` weight slice.
pub fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out = W^T y` for a row-major `rows x cols` weight slice; `out` has length
/// `cols` and is overwritten.
pub fn matvec_t_into(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for (yr, row) in y.iter().zip(w.chunks_exact(cols)) {
        axpy(*yr, row, out);
    }
}

/// Terms this far below the running maximum underflow to zero in `exp` and
/// cannot move any accumulator; skipping them is bitwise-neutral.
pub(crate) const LOG_NEGLIGIBLE: f64 = -700.0;

/// Numerically stable `log(sum_j exp(v_j))` via max-subtraction.
///
/// Entries may be negative infinity (they contribute nothing); positive
/// infinity and NaN are rejected. An all-negative-infinity input returns
/// negative infinity.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty list"));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::invalid(format!("log_sum_exp entry {v} is not allowed")));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sum = 0.0;
    for &v in values {
        let d = v - max;
        if d > LOG_NEGLIGIBLE {
            sum += d.exp();
        }
    }
    Ok(max + sum.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_arithmetic() {
        let a = Point::new(vec![1.0, 2.0]);
        let b = Point::new(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).coords(), &[4.0, 6.0]);
        assert_eq!(b.sub(&a).coords(), &[2.0, 2.0]);
        assert_eq!(a.scale(2.0).coords(), &[2.0, 4.0]);
        assert_eq!(a.dot(&b), 11.0);
        assert_eq!(a.dist_sq(&b), 8.0);
    }

    #[test]
    fn point_checked_rejects_non_finite() {
        assert!(Point::checked(vec![1.0, f64::NAN]).is_err());
        assert!(Point::checked(vec![f64::INFINITY]).is_err());
        assert!(Point::checked(vec![1.0, -0.0]).is_ok());
    }

    #[test]
    fn matrix_identity_fixes_vectors() {
        let m = Matrix::identity(3);
        let x = vec![1.5, -2.0, 0.25];
        assert_eq!(m.matvec(&x).unwrap(), x);
    }

    #[test]
    fn matrix_shape_mismatch_is_an_error() {
        let m = Matrix::zeros(2, 3);
        assert!(m.matvec(&[1.0, 2.0]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matvec_known_product() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_transpose_matches_explicit_transpose() {
        // W = [[1,2,3],[4,5,6]]; W^T y with y = (1, 10)
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 3];
        matvec_t_into(&w, 2, 3, &[1.0, 10.0], &mut out);
        assert_eq!(out, vec![41.0, 52.0, 63.0]);
    }

    #[test]
    fn axpy_with_zero_alpha_is_identity() {
        let x = [5.0, 6.0];
        let mut y = [1.0, 2.0];
        axpy(0.0, &x, &mut y);
        assert_eq!(y, [1.0, 2.0]);
    }

    #[test]
    fn dot_long_vectors_match_naive_sum() {
        let a: Vec<f64> = (0..103).map(|i| (i as f64) * 0.25 - 7.0).collect();
        let b: Vec<f64> = (0..103).map(|i| 3.0 - (i as f64) * 0.125).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9 * naive.abs().max(1.0));
    }

    #[test]
    fn log_sum_exp_of_two_zeros_is_ln_two() {
        let got = log_sum_exp(&[0.0, 0.0]).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_dominant_term_is_exact() {
        // exp(-1000) underflows to zero, so the result is exactly 0.
        assert_eq!(log_sum_exp(&[-1000.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn log_sum_exp_singleton_returns_the_entry() {
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        assert_eq!(log_sum_exp(&[1e9]).unwrap(), 1e9);
    }

    #[test]
    fn log_sum_exp_all_negative_infinity() {
        let got = log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_eq!(got, f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_rejects_bad_input() {
        assert!(log_sum_exp(&[]).is_err());
        assert!(log_sum_exp(&[f64::NAN]).is_err());
        assert!(log_sum_exp(&[0.0, f64::INFINITY]).is_err());
    }
}
