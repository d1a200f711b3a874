//! Trapezoidal reference for the Bhattacharyya integral in one and two
//! dimensions.
//!
//! Both kernels are normalized numerically on the same grid, so the result is
//! `Σ w √(p q) / √(Σ w p · Σ w q)` and does not depend on kernel amplitudes or
//! on the grid spacing.

use nalgebra::DMatrix;

use super::KernelSpec;
use crate::error::{KmclError, Result};

pub const MIN_POINTS: usize = 200;
pub const DEFAULT_POINTS: usize = 4001;
/// Half-width of the default grid, in units of the widest standard deviation.
pub const DEFAULT_SPAN: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

impl QuadGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: usize) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(KmclError::DimensionMismatch {
                what: "grid bounds",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l)) {
            return Err(KmclError::invalid("grid", "upper bound must exceed lower bound"));
        }
        if points < MIN_POINTS {
            return Err(KmclError::GridTooCoarse {
                points,
                min: MIN_POINTS,
            });
        }
        Ok(QuadGrid {
            lower,
            upper,
            points,
        })
    }

    /// Box `[min μ - 8σ_max, max μ + 8σ_max]` on every axis.
    pub fn covering(p: &KernelSpec, q: &KernelSpec, points: usize) -> Result<Self> {
        Self::covering_with_span(p, q, DEFAULT_SPAN, points)
    }

    pub fn covering_with_span(
        p: &KernelSpec,
        q: &KernelSpec,
        span: f64,
        points: usize,
    ) -> Result<Self> {
        if p.dim() != q.dim() {
            return Err(KmclError::DimensionMismatch {
                what: "kernel dimension",
                expected: p.dim(),
                found: q.dim(),
            });
        }
        let sigma = p.max_std().max(q.max_std());
        let (lower, upper) = (0..p.dim())
            .map(|i| {
                let lo = p.mean_at(i).min(q.mean_at(i)) - span * sigma;
                let hi = p.mean_at(i).max(q.mean_at(i)) + span * sigma;
                (lo, hi)
            })
            .unzip();
        Self::new(lower, upper, points)
    }

    pub fn default_for(p: &KernelSpec, q: &KernelSpec) -> Result<Self> {
        Self::covering(p, q, DEFAULT_POINTS)
    }

    fn axis(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.points;
        let step = (self.upper[i] - self.lower[i]) / (n - 1) as f64;
        let nodes = (0..n).map(|j| self.lower[i] + step * j as f64).collect();
        let weights = (0..n)
            .map(|j| if j == 0 || j == n - 1 { 0.5 } else { 1.0 })
            .collect();
        (nodes, weights)
    }
}

struct Quadratic {
    mean: Vec<f64>,
    precision: DMatrix<f64>,
    log_amplitude: f64,
}

impl Quadratic {
    fn new(k: &KernelSpec, amplitude: f64, which: &'static str) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(KmclError::invalid("amplitude", "must be positive and finite"));
        }
        let precision = nalgebra::Cholesky::new(k.covariance_matrix())
            .ok_or(KmclError::NotPositiveDefinite { which })?
            .inverse();
        Ok(Quadratic {
            mean: k.mean_vector().iter().copied().collect(),
            precision,
            log_amplitude: amplitude.ln(),
        })
    }

    #[inline]
    fn value_1d(&self, x: f64) -> f64 {
        let d = x - self.mean[0];
        (self.log_amplitude - 0.5 * self.precision[(0, 0)] * d * d).exp()
    }

    #[inline]
    fn value_2d(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean[0];
        let dy = y - self.mean[1];
        let p = &self.precision;
        let q = p[(0, 0)] * dx * dx + (p[(0, 1)] + p[(1, 0)]) * dx * dy + p[(1, 1)] * dy * dy;
        (self.log_amplitude - 0.5 * q).exp()
    }
}

/// Numerical Bhattacharyya coefficient on `grid` for unit-amplitude kernels.
pub fn quadrature_oracle(p: &KernelSpec, q: &KernelSpec, grid: &QuadGrid) -> Result<f64> {
    quadrature_oracle_scaled(p, 1.0, q, 1.0, grid)
}

/// As [`quadrature_oracle`] with kernels multiplied by positive amplitudes.
pub fn quadrature_oracle_scaled(
    p: &KernelSpec,
    amp_p: f64,
    q: &KernelSpec,
    amp_q: f64,
    grid: &QuadGrid,
) -> Result<f64> {
    let dim = p.dim();
    if q.dim() != dim || grid.lower.len() != dim {
        return Err(KmclError::DimensionMismatch {
            what: "quadrature dimension",
            expected: dim,
            found: if q.dim() != dim { q.dim() } else { grid.lower.len() },
        });
    }
    if !(1..=2).contains(&dim) {
        return Err(KmclError::invalid(
            "dim",
            format!("quadrature supports 1 or 2 dimensions, got {dim}"),
        ));
    }
    let kp = Quadratic::new(p, amp_p, "p")?;
    let kq = Quadratic::new(q, amp_q, "q")?;

    let (mut sum_p, mut sum_q, mut sum_pq) = (0.0, 0.0, 0.0);
    let (xs, wx) = grid.axis(0);
    if dim == 1 {
        for (&x, &w) in xs.iter().zip(&wx) {
            let a = kp.value_1d(x);
            let b = kq.value_1d(x);
            sum_p += w * a;
            sum_q += w * b;
            sum_pq += w * (a * b).sqrt();
        }
    } else {
        let (ys, wy) = grid.axis(1);
        for (&x, &w0) in xs.iter().zip(&wx) {
            let (mut row_p, mut row_q, mut row_pq) = (0.0, 0.0, 0.0);
            for (&y, &w1) in ys.iter().zip(&wy) {
                let a = kp.value_2d(x, y);
                let b = kq.value_2d(x, y);
                row_p += w1 * a;
                row_q += w1 * b;
                row_pq += w1 * (a * b).sqrt();
            }
            sum_p += w0 * row_p;
            sum_q += w0 * row_q;
            sum_pq += w0 * row_pq;
        }
    }
    Ok(sum_pq / (sum_p * sum_q).sqrt())
}
