//! Uniform B-spline bases via the Cox-de Boor recursion, plus the derivative
//! identity used by KAN backward passes.
//!
//! A grid with `G` intervals and degree `k` carries `G + 2k + 1` uniformly
//! spaced knots (extended `k` deep on each side) and `B = G + k` basis
//! functions. Inside `[t_min, t_max]` the basis is a partition of unity and
//! at most `k + 1` functions are nonzero at any point.

use crate::error::{IfgError, Result};

/// Upper bound on the spline degree, sized so the Cox-de Boor scratch fits
/// on the stack in the per-sample hot path.
pub const MAX_DEGREE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    t_min: f64,
    t_max: f64,
    num_intervals: usize,
    degree: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(t_min: f64, t_max: f64, num_intervals: usize, degree: usize) -> Result<Self> {
        if !(t_min < t_max) {
            return Err(IfgError::InvalidArgument(format!(
                "degenerate spline grid: t_min={t_min}, t_max={t_max}"
            )));
        }
        if num_intervals == 0 || degree == 0 {
            return Err(IfgError::InvalidArgument(format!(
                "spline grid needs positive intervals and degree, got G={num_intervals}, k={degree}"
            )));
        }
        if degree > MAX_DEGREE {
            return Err(IfgError::InvalidArgument(format!(
                "spline degree {degree} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        let h = (t_max - t_min) / num_intervals as f64;
        let knots = (0..=num_intervals + 2 * degree)
            .map(|j| t_min + (j as f64 - degree as f64) * h)
            .collect();
        Ok(SplineGrid {
            t_min,
            t_max,
            num_intervals,
            degree,
            knots,
        })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `B = G + k`.
    pub fn num_basis(&self) -> usize {
        self.num_intervals + self.degree
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.t_min, self.t_max)
    }

    /// Knot span index for clamped `x`: the `s` with `knots[s] <= x < knots[s+1]`,
    /// in `[degree, degree + G - 1]` (x == t_max falls in the last interval).
    pub fn find_span(&self, x: f64) -> usize {
        let h = (self.t_max - self.t_min) / self.num_intervals as f64;
        let raw = ((x - self.t_min) / h).floor() as isize;
        let clamped = raw.clamp(0, self.num_intervals as isize - 1) as usize;
        clamped + self.degree
    }

    /// The `k + 1` nonzero basis values at clamped `x`, for global basis
    /// indices `span - k ..= span`. Triangular Cox-de Boor scheme.
    pub fn basis_local(&self, x: f64, span: usize, out: &mut [f64]) {
        let k = self.degree;
        debug_assert!(out.len() >= k + 1);
        let t = &self.knots;
        out[0] = 1.0;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        for j in 1..=k {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = out[r] / denom;
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Nonzero basis values and their first derivatives at clamped `x`.
    ///
    /// Derivatives use `N'_{i,k} = k (N_{i,k-1}/(t_{i+k}-t_i) -
    /// N_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))` with the level-(k-1) values taken
    /// from the same triangular pass.
    pub fn basis_and_deriv_local(&self, x: f64, span: usize, basis: &mut [f64], deriv: &mut [f64]) {
        let k = self.degree;
        debug_assert!(basis.len() >= k + 1 && deriv.len() >= k + 1);
        let t = &self.knots;
        basis[0] = 1.0;
        let mut left = [0.0; MAX_DEGREE + 1];
        let mut right = [0.0; MAX_DEGREE + 1];
        let mut lower = [0.0; MAX_DEGREE + 1]; // level k-1 values N_{span-(k-1)+r, k-1}
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&basis[..k]);
            }
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = basis[r] / denom;
                basis[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            basis[j] = saved;
        }
        for r in 0..=k {
            // global basis index i = span - k + r
            let lo = if r >= 1 { lower[r - 1] } else { 0.0 };
            let hi = if r < k { lower[r] } else { 0.0 };
            let d_lo = t[span + r] - t[span - k + r];
            let d_hi = t[span + r + 1] - t[span - k + r + 1];
            deriv[r] = k as f64 * (lo / d_lo - hi / d_hi);
        }
    }
}

/// Full basis vector (length `B = G + k`) at `x`, clamped into the grid range.
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(IfgError::NonFinite("bspline_basis input"));
    }
    let xc = grid.clamp(x);
    let span = grid.find_span(xc);
    let k = grid.degree();
    let mut local = vec![0.0; k + 1];
    grid.basis_local(xc, span, &mut local);
    let mut full = vec![0.0; grid.num_basis()];
    full[span - k..=span].copy_from_slice(&local);
    Ok(full)
}
